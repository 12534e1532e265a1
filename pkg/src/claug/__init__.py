"""Memory-augmented continual learning for cross-sectional time-series
regression, with a synthetic-regime backtest harness."""

from .panel import (
    EmptyTrainingSetError,
    InvalidScheduleError,
    Panel,
    RegimeSchedule,
    RegimeSpec,
    TargetSeries,
    TrainingSet,
    generate_regime_panel,
    rolling_factor_loadings,
    sliding_window,
    winsorize,
)
from .learners import LearnerSpec, ParamSnapshot, predict, predict_sequences, train, train_sequences
from .autoencoder import AEParams, reconstruct, train_autoencoder
from .similarity import (
    AEOptions,
    ContextRepresentation,
    DissimilarityScore,
    SamplerConfig,
    SimilarityStrategy,
    ae_dissimilarity,
    dtw_dissimilarity,
    dtw_kernel,
    euclidean_dissimilarity,
    make_strategy,
    warp_ae_dissimilarity,
)
from .engine import (
    CLAEngine,
    GateState,
    MemoryColumn,
    MemoryStore,
    RunResult,
    StepTrace,
    balance_weights,
    learn_jcrit,
    run_baseline,
)
from .backtest import MetricsReport, PortfolioSeries, SignalSet, compute_metrics, decile_signals, simulate

__version__ = "0.1.0"

__all__ = [
    "AEOptions",
    "AEParams",
    "CLAEngine",
    "ContextRepresentation",
    "DissimilarityScore",
    "EmptyTrainingSetError",
    "GateState",
    "InvalidScheduleError",
    "LearnerSpec",
    "MemoryColumn",
    "MemoryStore",
    "MetricsReport",
    "Panel",
    "ParamSnapshot",
    "PortfolioSeries",
    "RegimeSchedule",
    "RegimeSpec",
    "RunResult",
    "SamplerConfig",
    "SignalSet",
    "SimilarityStrategy",
    "StepTrace",
    "TargetSeries",
    "TrainingSet",
    "ae_dissimilarity",
    "balance_weights",
    "compute_metrics",
    "decile_signals",
    "dtw_dissimilarity",
    "dtw_kernel",
    "euclidean_dissimilarity",
    "generate_regime_panel",
    "learn_jcrit",
    "make_strategy",
    "predict",
    "predict_sequences",
    "reconstruct",
    "rolling_factor_loadings",
    "run_baseline",
    "simulate",
    "sliding_window",
    "train",
    "train_autoencoder",
    "train_sequences",
    "warp_ae_dissimilarity",
    "winsorize",
]
