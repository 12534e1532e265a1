"""Continual-learning core: step-forward protocol, remember/recall gates.

The engine wraps a base learner stepping forward through a panel. When the
base learner's absolute out-of-sample error spikes above a grid-learned
threshold, the previous parameterization is frozen into an explicit memory
store together with a representation of its training context. Every step,
all stored memories plus the current base learner are scored against the
live cross-section and their predictions mixed with similarity weights.

The threshold is re-learned each step by replaying the whole run under each
grid candidate. Replays reuse memoized per-step snapshots, context
representations, predictions and dissimilarities, all of which are
independent of the threshold because base learners are retrained from
scratch (seeded per step) rather than updated incrementally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import learners
from .learners import LearnerSpec, ParamSnapshot, snapshot_from_json, snapshot_to_json
from .autoencoder import ae_from_json, ae_to_json
from .panel import Panel, TargetSeries, sliding_window
from .similarity import ContextRepresentation, SimilarityStrategy, make_strategy

__all__ = [
    "BaselineResult",
    "CLAEngine",
    "GateState",
    "MemoryColumn",
    "MemoryStore",
    "RunResult",
    "StepTrace",
    "abs_forecast_error",
    "balance_weights",
    "default_warmup",
    "learn_jcrit",
    "mean_abs_errors",
    "memory_store_from_json",
    "memory_store_to_json",
    "run_baseline",
    "trace_to_obj",
    "write_trace_jsonl",
]


def balance_weights(dissimilarities: Sequence[float]) -> np.ndarray:
    """Similarity-based mixture weights: w_m = 1 - D_m / sum(D), renormalized.

    The raw map sums to M-1 across M participants (and to 0 for a single
    one), so weights are rescaled to sum to 1; a single participant gets
    weight 1 and all-equal distances give 1/M each. The minimum-distance
    participant always carries the maximum weight.
    """
    d = np.asarray(dissimilarities, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need at least one dissimilarity")
    if (d < 0).any() or not np.isfinite(d).all():
        raise ValueError("dissimilarities must be finite and nonnegative")
    m = d.size
    if m == 1:
        return np.array([1.0])
    total = d.sum()
    if total == 0.0:
        return np.full(m, 1.0 / m)
    raw = 1.0 - d / total
    return raw / raw.sum()


def learn_jcrit(
    error_history: Sequence[float],
    grid_size: int = 20,
    replay: Callable[[float], float] | None = None,
) -> float:
    """Grid-search the remember threshold against replayed forecast error.

    Candidates are ``grid_size`` equidistant points spanning the empirical
    error range; ``replay(candidate)`` must rerun the whole procedure with
    that fixed threshold and return its mean absolute forecast error. Ties
    break toward the largest candidate (fewest memories).
    """
    errs = np.asarray(error_history, dtype=float)
    if errs.size < 2:
        raise ValueError("need at least two error observations")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if replay is None:
        raise ValueError("a replay function is required")
    grid = np.linspace(errs.min(), errs.max(), grid_size)
    best_cand = None
    best_score = None
    for cand in grid:
        score = float(replay(float(cand)))
        if best_score is None or score < best_score or (score == best_score and cand > best_cand):
            best_cand, best_score = float(cand), score
    return best_cand


def abs_forecast_error(forecast: Mapping[str, float], outcome: Mapping[str, float]) -> float:
    """Mean absolute error over the entities present in both mappings."""
    shared = [e for e in forecast if e in outcome]
    if not shared:
        raise ValueError("forecast and outcome share no entities")
    return float(np.mean([abs(forecast[e] - outcome[e]) for e in shared]))


def mean_abs_errors(
    forecasts: Mapping[str, Mapping[str, float]],
    targets: TargetSeries,
) -> dict[str, float]:
    """Per-step mean absolute forecast error keyed by forecast time."""
    out: dict[str, float] = {}
    for t, fc in forecasts.items():
        realized = targets.at(t)
        shared = [e for e in fc if e in realized]
        if shared:
            out[t] = float(np.mean([abs(fc[e] - realized[e]) for e in shared]))
    return out


@dataclass(frozen=True)
class MemoryColumn:
    """One remembered (context representation, parameter snapshot) pairing."""

    column_id: str
    created_at: str
    created_index: int
    train_index: int
    repr: ContextRepresentation
    params: ParamSnapshot


class MemoryStore:
    """Append-only ordered store of memory columns with optional capacity.

    Columns are never mutated; when capacity is exceeded the column that
    least recently carried the maximum recall weight is evicted.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1 when set")
        self.capacity = capacity
        self.columns: list[MemoryColumn] = []
        self.last_max_step: dict[str, int] = {}
        self.n_created = 0

    def __len__(self) -> int:
        return len(self.columns)

    def next_id(self) -> str:
        return f"m{self.n_created:03d}"

    def append(self, column: MemoryColumn) -> None:
        if self.columns and column.created_index <= self.columns[-1].created_index:
            raise ValueError("created_at must strictly increase")
        self.columns.append(column)
        self.n_created += 1
        if self.capacity is not None and len(self.columns) > self.capacity:
            scores = [
                (self.last_max_step.get(c.column_id, c.created_index), c.created_index)
                for c in self.columns
            ]
            evict = min(range(len(self.columns)), key=lambda i: scores[i])
            dropped = self.columns.pop(evict)
            self.last_max_step.pop(dropped.column_id, None)

    def mark_max(self, column_id: str, step_index: int) -> None:
        self.last_max_step[column_id] = step_index


@dataclass
class GateState:
    """Remember-gate state: observed base-error series and the threshold."""

    error_history: list[float] = field(default_factory=list)
    j_crit: float = math.inf
    grid_size: int = 20


@dataclass(frozen=True)
class ParticipantTrace:
    id: str
    dissimilarity: float | None
    weight: float
    forecast_mean: float
    created_at: str | None = None


@dataclass(frozen=True)
class StepTrace:
    """Per-step record of gate decisions, recall weights and forecasts."""

    time_id: str
    index: int
    base_source: str
    j_crit: float
    remember_fired: bool
    participants: tuple[ParticipantTrace, ...]
    entities: tuple[str, ...]
    forecast: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.forecast, dtype=float))
        arr.flags.writeable = False
        object.__setattr__(self, "forecast", arr)
        total = sum(p.weight for p in self.participants)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"participant weights sum to {total}, not 1")


def trace_to_obj(trace: StepTrace) -> dict:
    fc = trace.forecast
    return {
        "t": trace.time_id,
        "base_source": trace.base_source,
        "j_crit": trace.j_crit if math.isfinite(trace.j_crit) else None,
        "remember_fired": trace.remember_fired,
        "participants": [
            {
                "id": p.id,
                "dissimilarity": p.dissimilarity,
                "weight": p.weight,
                "forecast_mean": p.forecast_mean,
                "created_at": p.created_at,
            }
            for p in trace.participants
        ],
        "forecast_summary": {
            "mean": float(fc.mean()),
            "min": float(fc.min()),
            "max": float(fc.max()),
            "n": int(fc.size),
        },
    }


def write_trace_jsonl(traces: Sequence[StepTrace], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace_to_obj(trace), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def memory_store_to_json(store: MemoryStore) -> str:
    cols = []
    for c in store.columns:
        if c.repr.raw_rows is not None:
            repr_obj = {"variant": "raw_rows", "rows": [[float(v) for v in row] for row in c.repr.raw_rows]}
        else:
            repr_obj = {"variant": "ae", "ae": json.loads(ae_to_json(c.repr.ae))}
        cols.append(
            {
                "id": c.column_id,
                "created_at": c.created_at,
                "created_index": c.created_index,
                "train_index": c.train_index,
                "repr": repr_obj,
                "params": json.loads(snapshot_to_json(c.params)),
            }
        )
    return json.dumps(cols, sort_keys=True, separators=(",", ":"))


def memory_store_from_json(text: str, capacity: int | None = None) -> MemoryStore:
    store = MemoryStore(capacity=capacity)
    for obj in json.loads(text):
        repr_obj = obj["repr"]
        if repr_obj["variant"] == "raw_rows":
            rep = ContextRepresentation(raw_rows=np.asarray(repr_obj["rows"], dtype=float))
        else:
            rep = ContextRepresentation(ae=ae_from_json(json.dumps(repr_obj["ae"])))
        store.append(
            MemoryColumn(
                column_id=obj["id"],
                created_at=obj["created_at"],
                created_index=int(obj["created_index"]),
                train_index=int(obj["train_index"]),
                repr=rep,
                params=snapshot_from_json(json.dumps(obj["params"])),
            )
        )
        store.n_created = max(store.n_created, int(obj["id"][1:]) + 1)
    return store


def default_warmup(targets: TargetSeries, window: int) -> int:
    """First step with a full training window: horizon + window - 1."""
    return targets.horizon + window - 1


def build_training_sequences(
    panel: Panel,
    targets: TargetSeries,
    t: int,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Per-entity feature sequences over all history up to step t.

    Target positions are masked to those already observable at t; entities
    with fewer than two observations are skipped.
    """
    h = targets.horizon
    history: dict[str, list[tuple[int, np.ndarray]]] = {}
    for s in range(t + 1):
        sec = panel.section(s)
        for j, e in enumerate(sec.entities):
            history.setdefault(e, []).append((s, sec.values[j]))
    seqs: list[np.ndarray] = []
    tgts: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for e in sorted(history):
        obs = history[e]
        if len(obs) < 2:
            continue
        seq = np.array([row for _, row in obs])
        tgt = np.zeros(len(obs))
        mask = np.zeros(len(obs))
        for pos, (s, _) in enumerate(obs):
            if s + h <= t:
                y = targets.get(panel.times[s], e)
                if y is not None:
                    tgt[pos] = y
                    mask[pos] = 1.0
        seqs.append(seq)
        tgts.append(tgt)
        masks.append(mask)
    return seqs, tgts, masks


def build_prediction_sequences(panel: Panel, t: int) -> list[np.ndarray]:
    """History sequences ending at step t, aligned with the entities at t."""
    sec = panel.section(t)
    rows: dict[str, list[np.ndarray]] = {e: [] for e in sec.entities}
    for s in range(t + 1):
        past = panel.section(s)
        for j, e in enumerate(past.entities):
            if e in rows:
                rows[e].append(past.values[j])
    return [np.array(rows[e]) for e in sec.entities]


def _train_base(
    spec: LearnerSpec,
    panel: Panel,
    targets: TargetSeries,
    t: int,
    window: int,
) -> ParamSnapshot:
    time_id = panel.times[t]
    if spec.kind == "recurrent":
        seqs, tgts, masks = build_training_sequences(panel, targets, t)
        if not seqs:
            raise ValueError(f"no trainable sequences at {time_id!r}")
        return learners.train_sequences(spec, seqs, tgts, masks, time_id)
    ts = sliding_window(panel, targets, time_id, width=window)
    return learners.train(spec, ts.x, ts.y, time_id)


@dataclass(frozen=True)
class RunResult:
    """Everything one engine run produced."""

    times: tuple[str, ...]
    cla_forecasts: Mapping[str, Mapping[str, float]]
    base_forecasts: Mapping[str, Mapping[str, float]]
    traces: tuple[StepTrace, ...]
    store: MemoryStore
    gate: GateState
    j_crit_history: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class BaselineResult:
    times: tuple[str, ...]
    forecasts: Mapping[str, Mapping[str, float]]


class CLAEngine:
    """Single-writer state machine stepping a memory-augmented learner.

    ``step`` must be called with strictly advancing step indices (or use
    :meth:`run`); memory scoring and per-memory prediction inside a step are
    pure reads over memoized state.
    """

    def __init__(
        self,
        panel: Panel,
        targets: TargetSeries,
        spec: LearnerSpec,
        strategy: SimilarityStrategy | str = "warp-ae",
        *,
        window: int = 4,
        grid_size: int = 20,
        relearn_every: int = 1,
        capacity: int | None = None,
        top_k: int | None = None,
        disable_gate: bool = False,
        fixed_j_crit: float | None = None,
        warmup: int | None = None,
    ):
        self.panel = panel
        self.targets = targets
        self.spec = spec
        self.strategy = make_strategy(strategy) if isinstance(strategy, str) else strategy
        self.window = window
        self.relearn_every = relearn_every
        self.top_k = top_k
        self.disable_gate = disable_gate
        self.fixed_j_crit = fixed_j_crit
        self.gate = GateState(grid_size=grid_size)
        self.store = MemoryStore(capacity=capacity)
        self.traces: list[StepTrace] = []
        self.abs_errors: dict[str, dict[str, float]] = {}
        self._start = default_warmup(targets, window) if warmup is None else warmup
        if self._start < targets.horizon:
            raise ValueError("warmup must be at least the target horizon")
        if self._start >= panel.n_times:
            raise ValueError("panel too short for the warmup period")
        self._next = self._start
        self._issued: dict[int, dict[str, float]] = {}
        self._jcrit_history: list[tuple[str, float]] = []
        self._steps_since_learn = 0
        self._snap_cache: dict[int, ParamSnapshot] = {}
        self._repr_cache: dict[int, ContextRepresentation] = {}
        self._window_cache: dict[int, np.ndarray] = {}
        self._pred_cache: dict[tuple[int, int], np.ndarray] = {}
        self._diss_cache: dict[tuple[int, int], float] = {}
        self._seq_cache: dict[int, list[np.ndarray]] = {}
        self._base_err_cache: dict[int, float] = {}

    # -- memoized primitives -------------------------------------------------

    def _snapshot(self, m: int) -> ParamSnapshot:
        if m not in self._snap_cache:
            self._snap_cache[m] = _train_base(self.spec, self.panel, self.targets, m, self.window)
        return self._snap_cache[m]

    def _window_rows(self, m: int) -> np.ndarray:
        if m not in self._window_cache:
            ts = sliding_window(self.panel, self.targets, self.panel.times[m], width=self.window)
            self._window_cache[m] = ts.x
        return self._window_cache[m]

    def _repr(self, m: int) -> ContextRepresentation:
        if m not in self._repr_cache:
            self._repr_cache[m] = self.strategy.build(self._window_rows(m), self.panel.times[m])
        return self._repr_cache[m]

    def _sequences(self, u: int) -> list[np.ndarray]:
        if u not in self._seq_cache:
            self._seq_cache[u] = build_prediction_sequences(self.panel, u)
        return self._seq_cache[u]

    def _predict(self, m: int, u: int) -> np.ndarray:
        key = (m, u)
        if key not in self._pred_cache:
            snap = self._snapshot(m)
            if snap.kind == "recurrent":
                out = learners.predict_sequences(snap, self._sequences(u))
            else:
                out = learners.predict(snap, self.panel.section(u).values)
            out = np.ascontiguousarray(out)
            out.flags.writeable = False
            self._pred_cache[key] = out
        return self._pred_cache[key]

    def _diss(self, m: int, u: int) -> float:
        key = (m, u)
        if key not in self._diss_cache:
            score = self.strategy.score(
                self._repr(m),
                self.panel.section(u).values,
                pair_key=(self.panel.times[m], self.panel.times[u]),
            )
            self._diss_cache[key] = score.value
        return self._diss_cache[key]

    def _base_error(self, observed_at: int) -> float:
        """Base learner's mean absolute error observed at this step."""
        if observed_at not in self._base_err_cache:
            s = observed_at - self.targets.horizon
            sec = self.panel.section(s)
            fc = dict(zip(sec.entities, self._predict(s, s)))
            outcome = self.targets.at(self.panel.times[s])
            self._base_err_cache[observed_at] = abs_forecast_error(fc, outcome)
        return self._base_err_cache[observed_at]

    # -- mixing --------------------------------------------------------------

    def _select(self, mems: Sequence[int], u: int) -> list[int]:
        if self.top_k is None or len(mems) <= self.top_k:
            return list(mems)
        ranked = sorted(mems, key=lambda m: (self._diss(m, u), m))
        return sorted(ranked[: self.top_k])

    def _mix(self, mems: Sequence[int], u: int) -> tuple[list[int], np.ndarray, list[float | None], np.ndarray]:
        selected = self._select(mems, u)
        if not selected:
            return [], np.array([1.0]), [None], self._predict(u, u).copy()
        d: list[float] = [self._diss(m, u) for m in selected] + [self._diss(u, u)]
        weights = balance_weights(d)
        fc = np.zeros(self.panel.section(u).values.shape[0])
        for w, m in zip(weights, [*selected, u]):
            fc = fc + w * self._predict(m, u)
        return selected, weights, list(d), fc

    # -- the spec'd operations -----------------------------------------------

    def threshold(self) -> float:
        if self.disable_gate:
            return math.inf
        if self.fixed_j_crit is not None:
            return self.fixed_j_crit
        return self.gate.j_crit

    def observe_outcome(self, t: int) -> float:
        """Record the newly observable base-learner error at step t."""
        s = t - self.targets.horizon
        if s not in self._issued:
            raise ValueError(f"no forecast was issued for step {s}")
        err = self._base_error(t)
        self.gate.error_history.append(err)
        cla_fc = self._issued[s]
        time_s = self.panel.times[s]
        self.abs_errors[time_s] = {
            "base": err,
            "cla": abs_forecast_error(cla_fc, self.targets.at(time_s)),
        }
        return err

    def _replay_fn(self, t: int) -> Callable[[float], float]:
        h = self.targets.horizon
        start = self._start

        def replay(candidate: float) -> float:
            mems: list[int] = []
            created: dict[int, int] = {}
            last_max: dict[int, int] = {}
            forecasts: dict[int, np.ndarray] = {}
            errors: list[float] = []
            for u in range(start, t + 1):
                s = u - h
                if s >= start:
                    if self._base_error(u) > candidate and u - 1 >= start:
                        mems.append(u - 1)
                        created[u - 1] = u
                        if self.store.capacity is not None and len(mems) > self.store.capacity:
                            evict = min(
                                range(len(mems)),
                                key=lambda i: (last_max.get(mems[i], created[mems[i]]), created[mems[i]]),
                            )
                            dropped = mems.pop(evict)
                            last_max.pop(dropped, None)
                    sec = self.panel.section(s)
                    fc = dict(zip(sec.entities, forecasts[s]))
                    errors.append(abs_forecast_error(fc, self.targets.at(self.panel.times[s])))
                selected, weights, _, fc_vec = self._mix(mems, u)
                if selected:
                    best = selected[int(np.argmax(weights[: len(selected)]))]
                    last_max[best] = u
                forecasts[u] = fc_vec
            return float(np.mean(errors))

        return replay

    def remember(self, t: int) -> MemoryColumn:
        """Freeze the pre-spike learner and its context into a new column.

        The base learner itself is retrained on the current window as part
        of the same step (training is from-scratch every step, so the
        overwrite is the step's own training pass).
        """
        m = t - 1
        column = MemoryColumn(
            column_id=self.store.next_id(),
            created_at=self.panel.times[t],
            created_index=t,
            train_index=m,
            repr=self._repr(m),
            params=self._snapshot(m),
        )
        self.store.append(column)
        return column

    def recall_and_balance(self, t: int, remember_fired: bool = False) -> tuple[np.ndarray, StepTrace]:
        """Score every memory against the current cross-section and mix.

        With an empty store the base learner carries weight 1 and the
        forecast is exactly its own (its dissimilarity is not evaluated in
        that degenerate case and is traced as null).
        """
        mems = [c.train_index for c in self.store.columns]
        selected, weights, diss, fc = self._mix(mems, t)
        sec = self.panel.section(t)
        by_train = {c.train_index: c for c in self.store.columns}
        participants: list[ParticipantTrace] = []
        for pos, m in enumerate(selected):
            col = by_train[m]
            participants.append(
                ParticipantTrace(
                    id=col.column_id,
                    dissimilarity=diss[pos],
                    weight=float(weights[pos]),
                    forecast_mean=float(self._predict(m, t).mean()),
                    created_at=col.created_at,
                )
            )
        participants.append(
            ParticipantTrace(
                id="base",
                dissimilarity=diss[-1],
                weight=float(weights[-1]),
                forecast_mean=float(self._predict(t, t).mean()),
                created_at=None,
            )
        )
        if selected:
            best = selected[int(np.argmax(weights[: len(selected)]))]
            self.store.mark_max(by_train[best].column_id, t)
        trace = StepTrace(
            time_id=self.panel.times[t],
            index=t,
            base_source=self.panel.times[t],
            j_crit=self.threshold(),
            remember_fired=remember_fired,
            participants=tuple(participants),
            entities=sec.entities,
            forecast=fc,
        )
        self.traces.append(trace)
        return fc, trace

    def step(self, t: int) -> tuple[np.ndarray, StepTrace]:
        """One protocol step: backward pass, base retrain, forward pass."""
        if t != self._next:
            raise ValueError(f"steps must advance in order; expected {self._next}, got {t}")
        fired = False
        s = t - self.targets.horizon
        if s >= self._start:
            err = self.observe_outcome(t)
            learnable = (
                not self.disable_gate
                and self.fixed_j_crit is None
                and len(self.gate.error_history) >= 2
            )
            if learnable:
                self._steps_since_learn += 1
                if math.isinf(self.gate.j_crit) or self._steps_since_learn >= self.relearn_every:
                    self.gate.j_crit = learn_jcrit(
                        self.gate.error_history, self.gate.grid_size, self._replay_fn(t)
                    )
                    self._jcrit_history.append((self.panel.times[t], self.gate.j_crit))
                    self._steps_since_learn = 0
            if err > self.threshold() and t - 1 >= self._start:
                self.remember(t)
                fired = True
        self._snapshot(t)
        fc, trace = self.recall_and_balance(t, remember_fired=fired)
        sec = self.panel.section(t)
        self._issued[t] = {e: float(v) for e, v in zip(sec.entities, fc)}
        self._next = t + 1
        return fc, trace

    def run(self) -> RunResult:
        cla: dict[str, dict[str, float]] = {}
        base: dict[str, dict[str, float]] = {}
        for t in range(self._start, self.panel.n_times):
            self.step(t)
            time_id = self.panel.times[t]
            sec = self.panel.section(t)
            cla[time_id] = dict(self._issued[t])
            base[time_id] = {e: float(v) for e, v in zip(sec.entities, self._predict(t, t))}
        return RunResult(
            times=tuple(self.panel.times[self._start :]),
            cla_forecasts=cla,
            base_forecasts=base,
            traces=tuple(self.traces),
            store=self.store,
            gate=self.gate,
            j_crit_history=tuple(self._jcrit_history),
        )


def run_baseline(
    panel: Panel,
    targets: TargetSeries,
    spec: LearnerSpec,
    window: int = 4,
    warmup: int | None = None,
) -> BaselineResult:
    """Step the unaugmented base learner forward: train, predict, repeat."""
    start = default_warmup(targets, window) if warmup is None else warmup
    forecasts: dict[str, dict[str, float]] = {}
    for t in range(start, panel.n_times):
        snap = _train_base(spec, panel, targets, t, window)
        sec = panel.section(t)
        if spec.kind == "recurrent":
            vec = learners.predict_sequences(snap, build_prediction_sequences(panel, t))
        else:
            vec = learners.predict(snap, sec.values)
        forecasts[panel.times[t]] = {e: float(v) for e, v in zip(sec.entities, vec)}
    return BaselineResult(times=tuple(panel.times[start:]), forecasts=forecasts)
