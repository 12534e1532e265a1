"""Dissimilarity strategies for memory recall.

Four interchangeable scorers compare a stored context representation with
the current cross-section: sampled Euclidean distance, sampled dynamic time
warping over each row's lag axis, autoencoder reconstruction error, and the
warp hybrid (DTW between each row and its own reconstruction). All scores
are nonnegative, finite and deterministic given explicit seeds.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .autoencoder import AEParams, reconstruct, train_autoencoder

__all__ = [
    "AEOptions",
    "ContextRepresentation",
    "DissimilarityScore",
    "SamplerConfig",
    "SimilarityStrategy",
    "STRATEGY_NAMES",
    "ae_dissimilarity",
    "dtw_dissimilarity",
    "dtw_kernel",
    "euclidean_dissimilarity",
    "make_strategy",
    "warp_ae_dissimilarity",
    "znormalize_rows",
]

STRATEGY_NAMES = ("ed", "dtw", "ae", "warp-ae")


@dataclass(frozen=True)
class SamplerConfig:
    """Row-pair sampling for the ED/DTW estimators.

    ``exhaustive`` switches to the full cross product of stored and current
    rows, used by tests to pin down the sampling estimator's limit.
    """

    n_samples: int = 64
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class ContextRepresentation:
    """Stored stand-in for a memory's training data.

    Exactly one variant is populated: raw feature rows (ED/DTW) or trained
    autoencoder parameters (AE/warp-AE). Scorers reject the wrong variant
    loudly instead of converting, since storage cost is a real difference
    between the strategies.
    """

    raw_rows: np.ndarray | None = None
    ae: AEParams | None = None

    def __post_init__(self) -> None:
        if (self.raw_rows is None) == (self.ae is None):
            raise ValueError("exactly one of raw_rows/ae must be set")
        if self.raw_rows is not None:
            rows = np.ascontiguousarray(np.asarray(self.raw_rows, dtype=float))
            if rows.ndim != 2 or rows.shape[0] == 0:
                raise ValueError("raw_rows must be a nonempty 2-D matrix")
            rows.flags.writeable = False
            object.__setattr__(self, "raw_rows", rows)

    @property
    def variant(self) -> str:
        return "raw_rows" if self.raw_rows is not None else "ae"


@dataclass(frozen=True)
class DissimilarityScore:
    value: float
    strategy: str
    n_samples: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError("dissimilarity must be finite and nonnegative")


def dtw_kernel(seq_a, seq_b, band: int | None = None) -> float:
    """Classic dynamic-programming DTW with absolute-difference local cost.

    Steps are {match, insert, delete}; symmetric, zero on identical
    sequences. ``band`` optionally applies a Sakoe-Chiba window of that
    half-width around the diagonal.
    """
    a = np.asarray(seq_a, dtype=float).ravel()
    b = np.asarray(seq_b, dtype=float).ravel()
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("dtw_kernel requires nonempty sequences")
    cost = np.abs(a[:, None] - b[None, :])
    if band is not None:
        i_idx, j_idx = np.indices((n, m))
        cost = np.where(np.abs(i_idx - j_idx) > band, np.inf, cost)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        lo = 1 if band is None else max(1, i - band)
        hi = m if band is None else min(m, i + band)
        for j in range(lo, hi + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return float(acc[n, m])


def znormalize_rows(rows: np.ndarray) -> np.ndarray:
    """Per-row z-normalization; constant rows map to zeros."""
    rows = np.asarray(rows, dtype=float)
    mean = rows.mean(axis=1, keepdims=True)
    sd = rows.std(axis=1, keepdims=True)
    out = np.where(sd > 0, (rows - mean) / np.where(sd == 0, 1.0, sd), 0.0)
    return out


def _check_raw(memory_repr: ContextRepresentation, current: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if memory_repr.raw_rows is None:
        raise ValueError("strategy requires the raw_rows representation variant")
    cur = np.asarray(current, dtype=float)
    if cur.ndim != 2 or cur.shape[0] == 0:
        raise ValueError("current cross-section must be a nonempty 2-D matrix")
    if cur.shape[1] != memory_repr.raw_rows.shape[1]:
        raise ValueError("feature width mismatch between memory and current data")
    return memory_repr.raw_rows, cur


def _check_ae(memory_repr: ContextRepresentation, current: np.ndarray) -> tuple[AEParams, np.ndarray]:
    if memory_repr.ae is None:
        raise ValueError("strategy requires the ae representation variant")
    cur = np.asarray(current, dtype=float)
    if cur.ndim != 2 or cur.shape[0] == 0:
        raise ValueError("current cross-section must be a nonempty 2-D matrix")
    if cur.shape[1] != memory_repr.ae.input_width:
        raise ValueError("feature width mismatch between memory and current data")
    return memory_repr.ae, cur


def _sampled_mean(
    stored: np.ndarray,
    cur: np.ndarray,
    sampler: SamplerConfig,
    pair_cost: Callable[[np.ndarray, np.ndarray], float],
) -> tuple[float, int]:
    if sampler.exhaustive:
        total = 0.0
        for i in range(stored.shape[0]):
            for j in range(cur.shape[0]):
                total += pair_cost(stored[i], cur[j])
        count = stored.shape[0] * cur.shape[0]
        return total / count, count
    rng = np.random.default_rng(sampler.seed)
    total = 0.0
    for _ in range(sampler.n_samples):
        i = int(rng.integers(stored.shape[0]))
        j = int(rng.integers(cur.shape[0]))
        total += pair_cost(stored[i], cur[j])
    return total / sampler.n_samples, sampler.n_samples


def euclidean_dissimilarity(
    memory_repr: ContextRepresentation,
    current: np.ndarray,
    sampler: SamplerConfig,
) -> DissimilarityScore:
    """Mean Euclidean distance over sampled (stored row, current row) pairs."""
    stored, cur = _check_raw(memory_repr, current)
    value, n = _sampled_mean(stored, cur, sampler, lambda p, q: float(np.linalg.norm(p - q)))
    return DissimilarityScore(value, "ed", n)


def dtw_dissimilarity(
    memory_repr: ContextRepresentation,
    current: np.ndarray,
    sampler: SamplerConfig,
    band: int | None = None,
) -> DissimilarityScore:
    """Mean DTW over sampled row pairs, each row z-normalized then treated as
    a sequence along its lag axis (the only temporally ordered axis inside a
    single cross-sectional instance)."""
    stored, cur = _check_raw(memory_repr, current)
    stored_n = znormalize_rows(stored)
    cur_n = znormalize_rows(cur)
    value, n = _sampled_mean(stored_n, cur_n, sampler, lambda p, q: dtw_kernel(p, q, band=band))
    return DissimilarityScore(value, "dtw", n)


def ae_dissimilarity(memory_repr: ContextRepresentation, current: np.ndarray) -> DissimilarityScore:
    """Euclidean reconstruction error of the current data under the memory's
    autoencoder, divided by the number of securities present."""
    ae, cur = _check_ae(memory_repr, current)
    n = cur.shape[0]
    value = float(np.linalg.norm(cur - reconstruct(ae, cur))) / n
    return DissimilarityScore(value, "ae", n)


def warp_ae_dissimilarity(
    memory_repr: ContextRepresentation,
    current: np.ndarray,
    band: int | None = None,
) -> DissimilarityScore:
    """Mean per-row DTW between each current row and its own reconstruction.

    Rows are compared un-normalized against their reconstructions, so a
    reconstruction that is merely lag-shifted stays cheap.
    """
    ae, cur = _check_ae(memory_repr, current)
    rec = reconstruct(ae, cur)
    n = cur.shape[0]
    value = sum(dtw_kernel(cur[i], rec[i], band=band) for i in range(n)) / n
    return DissimilarityScore(value, "warp-ae", n)


@dataclass(frozen=True)
class AEOptions:
    """Training settings for representation autoencoders."""

    hidden_width: int | None = None  # None -> input width
    sparsity_weight: float = 0.01
    epochs: int = 150
    learning_rate: float = 0.05
    seed: int = 0


def _tag(value: object) -> int:
    return zlib.crc32(str(value).encode("utf-8"))


@dataclass(frozen=True)
class SimilarityStrategy:
    """Engine-facing adapter: builds representations and scores them.

    ``build`` is called once per training window; ``score`` compares a
    representation with a current cross-section. The (memory id, step id)
    pair keys a derived sampler seed so that repeated scorings of the same
    pair are identical while distinct pairs draw distinct samples.
    """

    name: str
    sampler: SamplerConfig = SamplerConfig()
    ae_options: AEOptions = AEOptions()
    dtw_band: int | None = None

    def __post_init__(self) -> None:
        if self.name not in STRATEGY_NAMES:
            raise ValueError(f"unknown similarity strategy {self.name!r}; pick one of {STRATEGY_NAMES}")

    @property
    def stores_raw_rows(self) -> bool:
        return self.name in ("ed", "dtw")

    def build(self, rows: np.ndarray, time_id: object | None = None) -> ContextRepresentation:
        rows = np.asarray(rows, dtype=float)
        if self.stores_raw_rows:
            return ContextRepresentation(raw_rows=rows.copy())
        opts = self.ae_options
        hidden = opts.hidden_width if opts.hidden_width is not None else rows.shape[1]
        ae = train_autoencoder(
            rows,
            hidden_width=hidden,
            sparsity_weight=opts.sparsity_weight,
            epochs=opts.epochs,
            seed=opts.seed,
            learning_rate=opts.learning_rate,
            training_time_id=time_id,
        )
        return ContextRepresentation(ae=ae)

    def score(
        self,
        memory_repr: ContextRepresentation,
        current: np.ndarray,
        pair_key: tuple[object, object] | None = None,
    ) -> DissimilarityScore:
        if self.name == "ed" or self.name == "dtw":
            sampler = self.sampler
            if pair_key is not None and not sampler.exhaustive:
                derived = np.random.SeedSequence(
                    [sampler.seed, _tag(pair_key[0]), _tag(pair_key[1])]
                ).generate_state(1)[0]
                sampler = replace(sampler, seed=int(derived))
            if self.name == "ed":
                return euclidean_dissimilarity(memory_repr, current, sampler)
            return dtw_dissimilarity(memory_repr, current, sampler, band=self.dtw_band)
        if self.name == "ae":
            return ae_dissimilarity(memory_repr, current)
        return warp_ae_dissimilarity(memory_repr, current, band=self.dtw_band)


def make_strategy(
    name: str,
    sampler: SamplerConfig | None = None,
    ae_options: AEOptions | None = None,
    dtw_band: int | None = None,
) -> SimilarityStrategy:
    return SimilarityStrategy(
        name=name,
        sampler=sampler if sampler is not None else SamplerConfig(),
        ae_options=ae_options if ae_options is not None else AEOptions(),
        dtw_band=dtw_band,
    )
