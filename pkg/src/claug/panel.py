"""Cross-sectional time-series data model.

Holds the panel container (one feature matrix per time-step, entity sets may
vary), realized forward-return targets, the synthetic regime-switching
generator used as a controllable oracle, rolling factor-loading estimation,
winsorization and training-window extraction.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "CrossSection",
    "EmptyTrainingSetError",
    "InvalidScheduleError",
    "Panel",
    "RegimeSchedule",
    "RegimeSpec",
    "TargetSeries",
    "TrainingSet",
    "generate_regime_panel",
    "parse_generator_config",
    "rolling_factor_loadings",
    "sliding_window",
    "winsorize",
]


class InvalidScheduleError(ValueError):
    """Regime intervals overlap, leave gaps, or fail to cover the span."""


class EmptyTrainingSetError(ValueError):
    """No (row, target) pair is observable in the requested window."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CrossSection:
    """Feature rows for the entities present at one time-step."""

    entities: tuple[str, ...]
    values: np.ndarray  # (n_entities, K), read-only float64

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _readonly(self.values))
        if self.values.ndim != 2:
            raise ValueError("cross-section values must be 2-D")
        if len(self.entities) != self.values.shape[0]:
            raise ValueError("one row per entity required")
        if not np.isfinite(self.values).all():
            raise ValueError("cross-section contains non-finite values")


@dataclass(frozen=True)
class Panel:
    """Ordered cross-sections sharing a fixed feature width.

    ``times`` is an opaque chronological index; calendar granularity (months,
    quarters) is metadata the caller tracks. Entity sets may differ per step
    but every row maps to a declared entity id. Panels are immutable after
    construction.
    """

    times: tuple[str, ...]
    entities: tuple[str, ...]
    feature_names: tuple[str, ...]
    sections: tuple[CrossSection, ...]

    def __post_init__(self) -> None:
        if len(self.times) != len(self.sections):
            raise ValueError("one cross-section per time-step required")
        if len(set(self.times)) != len(self.times):
            raise ValueError("duplicate time ids")
        k = len(self.feature_names)
        declared = set(self.entities)
        for t, sec in zip(self.times, self.sections):
            if sec.values.shape[1] != k:
                raise ValueError(f"feature width varies at time {t!r}")
            unknown = set(sec.entities) - declared
            if unknown:
                raise ValueError(f"undeclared entities at time {t!r}: {sorted(unknown)}")

    @property
    def k(self) -> int:
        return len(self.feature_names)

    @property
    def n_times(self) -> int:
        return len(self.times)

    def index_of(self, time_id: str) -> int:
        try:
            return self.times.index(time_id)
        except ValueError:
            raise ValueError(f"unknown time id {time_id!r}") from None

    def section(self, index: int) -> CrossSection:
        return self.sections[index]

    @classmethod
    def from_sections(
        cls,
        times: Sequence[str],
        feature_names: Sequence[str],
        sections: Mapping[str, tuple[Sequence[str], np.ndarray]],
    ) -> "Panel":
        secs = []
        entities: list[str] = []
        seen: set[str] = set()
        for t in times:
            ents, values = sections[t]
            secs.append(CrossSection(tuple(str(e) for e in ents), np.asarray(values, dtype=float)))
            for e in ents:
                if e not in seen:
                    seen.add(e)
                    entities.append(str(e))
        return cls(
            times=tuple(str(t) for t in times),
            entities=tuple(entities),
            feature_names=tuple(feature_names),
            sections=tuple(secs),
        )

    def to_csv(self, path: str) -> None:
        """Write ``time,entity,<features...>`` rows, entities sorted per step."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "entity", *self.feature_names])
            for t, sec in zip(self.times, self.sections):
                order = np.argsort(np.asarray(sec.entities, dtype=object))
                for i in order:
                    writer.writerow([t, sec.entities[i], *(repr(float(v)) for v in sec.values[i])])

    @classmethod
    def from_csv(cls, path: str) -> "Panel":
        """Read a panel CSV; times sort lexicographically in chronological order."""
        by_time: dict[str, list[tuple[str, list[float]]]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["time", "entity"]:
                raise ValueError("panel CSV must start with time,entity columns")
            feature_names = header[2:]
            if not feature_names:
                raise ValueError("panel CSV has no feature columns")
            for row in reader:
                if not row:
                    continue
                t, e, rest = row[0], row[1], [float(v) for v in row[2:]]
                if len(rest) != len(feature_names):
                    raise ValueError(f"row width mismatch at time {t!r}")
                by_time.setdefault(t, []).append((e, rest))
        times = sorted(by_time)
        sections = {
            t: ([e for e, _ in rows], np.array([v for _, v in rows], dtype=float))
            for t, rows in by_time.items()
        }
        return cls.from_sections(times, feature_names, sections)


@dataclass(frozen=True)
class TargetSeries:
    """Realized forward total returns in fractional units (0.01 = 1%).

    A target attached to feature time index ``i`` describes the return over
    the following ``horizon`` steps and only becomes observable once the
    panel has stepped to index ``i + horizon``.
    """

    horizon: int
    values: Mapping[str, Mapping[str, float]]  # time -> entity -> return

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        for t, ents in self.values.items():
            for e, v in ents.items():
                if not np.isfinite(v):
                    raise ValueError(f"non-finite target at ({t!r}, {e!r})")

    def at(self, time_id: str) -> Mapping[str, float]:
        return self.values.get(time_id, {})

    def get(self, time_id: str, entity: str) -> float | None:
        return self.values.get(time_id, {}).get(entity)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "entity", "forward_return"])
            for t in sorted(self.values):
                ents = self.values[t]
                for e in sorted(ents):
                    writer.writerow([t, e, repr(float(ents[e]))])

    @classmethod
    def from_csv(cls, path: str, horizon: int) -> "TargetSeries":
        values: dict[str, dict[str, float]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["time", "entity", "forward_return"]:
                raise ValueError("target CSV must have time,entity,forward_return header")
            for row in reader:
                if not row:
                    continue
                values.setdefault(row[0], {})[row[1]] = float(row[2])
        return cls(horizon=horizon, values=values)


@dataclass(frozen=True)
class RegimeSpec:
    """One regime interval: linear map from features to forward returns.

    ``feature_mean`` shifts the feature distribution so that regimes are
    distinguishable from the inputs alone (recall cues need this); omitted it
    defaults to zeros.
    """

    start: int
    label: str
    weights: tuple[float, ...]
    noise: float
    feature_mean: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.start < 0:
            raise InvalidScheduleError("regime start must be >= 0")
        if self.noise < 0:
            raise InvalidScheduleError("noise scale must be >= 0")


@dataclass(frozen=True)
class RegimeSchedule:
    """Contiguous, non-overlapping regime intervals covering ``n_steps``."""

    regimes: tuple[RegimeSpec, ...]
    n_steps: int

    def __post_init__(self) -> None:
        if not self.regimes:
            raise InvalidScheduleError("schedule needs at least one regime")
        if self.regimes[0].start != 0:
            raise InvalidScheduleError("first regime must start at 0")
        starts = [r.start for r in self.regimes]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InvalidScheduleError("regime starts must be strictly increasing")
        if self.n_steps <= starts[-1]:
            raise InvalidScheduleError("n_steps must exceed the last regime start")

    def regime_at(self, t: int) -> RegimeSpec:
        if not 0 <= t < self.n_steps:
            raise IndexError(f"step {t} outside schedule span")
        current = self.regimes[0]
        for spec in self.regimes:
            if spec.start <= t:
                current = spec
            else:
                break
        return current

    def labels(self) -> list[str]:
        return [self.regime_at(t).label for t in range(self.n_steps)]


def parse_generator_config(cfg: Mapping) -> tuple[RegimeSchedule, int, int, int]:
    """Parse the JSON generator config into (schedule, entities, features, seed)."""
    try:
        n_entities = int(cfg["entities"])
        n_features = int(cfg["features"])
        seed = int(cfg["seed"])
        steps = int(cfg["steps"])
        regimes = cfg["regimes"]
    except KeyError as exc:
        raise InvalidScheduleError(f"generator config missing key {exc}") from None
    specs = []
    for r in regimes:
        specs.append(
            RegimeSpec(
                start=int(r["start"]),
                label=str(r["label"]),
                weights=tuple(float(w) for w in r["weights"]),
                noise=float(r["noise"]),
                feature_mean=(
                    tuple(float(m) for m in r["feature_mean"])
                    if r.get("feature_mean") is not None
                    else None
                ),
            )
        )
    return RegimeSchedule(tuple(specs), steps), n_entities, n_features, seed


def generate_regime_panel(
    schedule: RegimeSchedule,
    n_entities: int,
    n_features: int,
    seed: int,
) -> tuple[Panel, TargetSeries, list[str]]:
    """Generate a balanced panel whose targets follow per-regime linear maps.

    Per step t in regime r: features are ``feature_mean_r + z`` with z iid
    standard normal, and the one-step forward return is ``x @ w_r + noise_r *
    eps``. Identical (schedule, seed) inputs give bit-identical outputs.
    """
    if n_entities < 20:
        raise ValueError("n_entities must be >= 20")
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    for spec in schedule.regimes:
        if len(spec.weights) != n_features:
            raise InvalidScheduleError(
                f"regime {spec.label!r} weights length {len(spec.weights)} != features {n_features}"
            )
        if spec.feature_mean is not None and len(spec.feature_mean) != n_features:
            raise InvalidScheduleError(f"regime {spec.label!r} feature_mean length mismatch")

    rng = np.random.default_rng(seed)
    times = [f"{t:04d}" for t in range(schedule.n_steps)]
    entities = [f"e{i:04d}" for i in range(n_entities)]
    feature_names = [f"f{j}" for j in range(n_features)]
    sections: dict[str, tuple[list[str], np.ndarray]] = {}
    targets: dict[str, dict[str, float]] = {}
    labels: list[str] = []
    for t in range(schedule.n_steps):
        spec = schedule.regime_at(t)
        labels.append(spec.label)
        mean = np.zeros(n_features) if spec.feature_mean is None else np.asarray(spec.feature_mean)
        x = mean + rng.standard_normal((n_entities, n_features))
        y = x @ np.asarray(spec.weights) + spec.noise * rng.standard_normal(n_entities)
        sections[times[t]] = (entities, x)
        targets[times[t]] = {e: float(v) for e, v in zip(entities, y)}
    panel = Panel.from_sections(times, feature_names, sections)
    return panel, TargetSeries(horizon=1, values=targets), labels


def rolling_factor_loadings(
    stock_excess_returns: Mapping[str, Sequence[float]],
    market_excess: Sequence[float],
    value_relative: Sequence[float],
    window: int = 36,
    times: Sequence[str] | None = None,
) -> Panel:
    """Estimate per-stock (alpha, beta_mkt, beta_val) over a trailing window.

    Each stock's excess-return series is regressed on an intercept, the
    market excess series and the value relative series over the trailing
    ``window`` observations ending at each time. Stocks with missing (NaN)
    observations inside the window are excluded from that cross-section, as
    is the whole cross-section when the shared design matrix is singular
    (e.g. a factor constant over the window).
    """
    mkt = np.asarray(market_excess, dtype=float)
    val = np.asarray(value_relative, dtype=float)
    n = mkt.shape[0]
    if val.shape[0] != n:
        raise ValueError("factor series lengths differ")
    if window < 3:
        raise ValueError("window must allow a 3-parameter fit")
    if n < window:
        raise ValueError("factor series shorter than the estimation window")
    if times is None:
        times = [f"{t:04d}" for t in range(n)]
    elif len(times) != n:
        raise ValueError("times length must match the factor series")

    returns = {e: np.asarray(s, dtype=float) for e, s in stock_excess_returns.items()}
    for e, s in returns.items():
        if s.shape[0] != n:
            raise ValueError(f"return series for {e!r} has wrong length")

    out_times: list[str] = []
    sections: dict[str, tuple[list[str], np.ndarray]] = {}
    for t in range(window - 1, n):
        sl = slice(t - window + 1, t + 1)
        design = np.column_stack([np.ones(window), mkt[sl], val[sl]])
        if np.linalg.matrix_rank(design) < 3:
            log.warning("singular factor design at time %s; cross-section skipped", times[t])
            continue
        ents: list[str] = []
        ys: list[np.ndarray] = []
        for e in sorted(returns):
            y = returns[e][sl]
            if np.isfinite(y).all():
                ents.append(e)
                ys.append(y)
        if not ents:
            continue
        coef, *_ = np.linalg.lstsq(design, np.column_stack(ys), rcond=None)
        out_times.append(times[t])
        sections[times[t]] = (ents, coef.T.copy())
    return Panel.from_sections(out_times, ["alpha", "beta_mkt", "beta_val"], sections)


def winsorize(panel: Panel, lower: float = 0.05, upper: float = 0.95) -> Panel:
    """Clip each feature column per time-step to empirical quantile bounds.

    Quantiles are taken as exact order statistics (nearest-rank convention),
    which makes the operation exactly idempotent element-wise; constant
    columns pass through unchanged.
    """
    if not 0 <= lower < upper <= 1:
        raise ValueError("require 0 <= lower < upper <= 1")
    sections: dict[str, tuple[tuple[str, ...], np.ndarray]] = {}
    for t, sec in zip(panel.times, panel.sections):
        vals = sec.values.copy()
        if vals.shape[0] > 0:
            lo = np.quantile(vals, lower, axis=0, method="nearest")
            hi = np.quantile(vals, upper, axis=0, method="nearest")
            vals = np.clip(vals, lo, hi)
        sections[t] = (sec.entities, vals)
    return Panel.from_sections(panel.times, panel.feature_names, sections)


@dataclass(frozen=True)
class TrainingSet:
    """Feature rows paired with realized targets, plus their origins."""

    x: np.ndarray  # (n, K)
    y: np.ndarray  # (n,)
    pairs: tuple[tuple[str, str], ...]  # (time, entity) per row

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _readonly(self.x))
        object.__setattr__(self, "y", _readonly(self.y))

    def __len__(self) -> int:
        return self.x.shape[0]


def sliding_window(
    panel: Panel,
    targets: TargetSeries,
    end_time: str,
    width: int = 4,
) -> TrainingSet:
    """Collect (row, target) pairs from the trailing observable cross-sections.

    A target attached to feature time index ``s`` is usable at ``end_time``
    index ``i`` only when ``s + horizon <= i``; the window covers the most
    recent ``width`` such cross-sections, so no pair ever leaks information
    that postdates ``end_time``.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    i = panel.index_of(end_time)
    if i < width:
        raise ValueError(f"end_time {end_time!r} has fewer than {width} predecessors")
    last = i - targets.horizon
    if last < 0:
        raise EmptyTrainingSetError(f"no targets observable at {end_time!r}")
    rows: list[np.ndarray] = []
    ys: list[float] = []
    pairs: list[tuple[str, str]] = []
    for s in range(max(0, last - width + 1), last + 1):
        sec = panel.section(s)
        avail = targets.at(panel.times[s])
        for j, e in enumerate(sec.entities):
            if e in avail:
                rows.append(sec.values[j])
                ys.append(avail[e])
                pairs.append((panel.times[s], e))
    if not rows:
        raise EmptyTrainingSetError(f"no targets observable at {end_time!r}")
    return TrainingSet(np.array(rows), np.array(ys), tuple(pairs))
