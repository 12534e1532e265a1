"""Pluggable base learners trained from scratch at toy scale.

Three kinds share one snapshot format: a closed-form linear baseline, a
feed-forward net with tanh hidden layers (sliding-window learner) and a
single-layer LSTM-style gated cell with a linear readout (sequential
learner). Training is plain full-batch gradient descent with a fixed
learning rate; analytic gradients are exposed for finite-difference checks.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "LearnerSpec",
    "ParamSnapshot",
    "ffnn_loss_and_grad",
    "lstm_loss_and_grad",
    "predict",
    "predict_sequences",
    "snapshot_from_json",
    "snapshot_to_json",
    "train",
    "train_sequences",
]

KINDS = ("feedforward", "recurrent", "linear")


def seed_for(seed: int, time_id: object | None) -> np.random.Generator:
    """Generator seeded by (seed, time id); stable across runs and platforms."""
    tag = 0 if time_id is None else zlib.crc32(str(time_id).encode("utf-8"))
    return np.random.default_rng([seed, tag])


@dataclass(frozen=True)
class LearnerSpec:
    """Architecture and training settings for one base learner.

    ``layer_sizes`` is the full width chain for the feed-forward kind
    (defaults to [K, 2K, 1]) and the single hidden width for the recurrent
    kind (defaults to [2K]); the linear kind ignores it.
    """

    kind: str
    input_width: int
    layer_sizes: tuple[int, ...] = ()
    learning_rate: float = 0.1
    epochs: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.kind == "feedforward" and not self.layer_sizes:
            k = self.input_width
            object.__setattr__(self, "layer_sizes", (k, 2 * k, 1))
        if self.kind == "recurrent" and not self.layer_sizes:
            object.__setattr__(self, "layer_sizes", (2 * self.input_width,))
        if self.kind in ("feedforward", "recurrent") and not self.layer_sizes:
            raise ValueError("layer_sizes must be nonempty for neural kinds")
        if self.kind == "feedforward":
            if len(self.layer_sizes) < 2 or self.layer_sizes[0] != self.input_width:
                raise ValueError("feedforward layer_sizes must run from input_width to the output")
            if self.layer_sizes[-1] != 1:
                raise ValueError("feedforward output width must be 1")
        if self.kind == "recurrent" and len(self.layer_sizes) != 1:
            raise ValueError("recurrent layer_sizes must be a single hidden width")


@dataclass(frozen=True)
class ParamSnapshot:
    """Immutable copy of a trained parameterization.

    Predictions from a snapshot are pure and deterministic; snapshots
    round-trip losslessly through JSON (values kept at full float precision).
    """

    kind: str
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    values: np.ndarray  # flat float64, read-only
    training_time_id: str | None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        flat = np.ascontiguousarray(np.asarray(self.values, dtype=float).ravel())
        flat.flags.writeable = False
        object.__setattr__(self, "values", flat)
        expected = sum(int(np.prod(shape)) for _, shape in self.shapes)
        if expected != flat.shape[0]:
            raise ValueError("flat parameter vector does not match declared shapes")

    def unpack(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    @property
    def input_width(self) -> int:
        return int(self.meta["input_width"])


def snapshot_to_json(snapshot: ParamSnapshot) -> str:
    obj = {
        "kind": snapshot.kind,
        "shapes": [[name, list(shape)] for name, shape in snapshot.shapes],
        "values": [float(v) for v in snapshot.values],
        "training_time_id": snapshot.training_time_id,
        "meta": dict(snapshot.meta),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def snapshot_from_json(text: str) -> ParamSnapshot:
    obj = json.loads(text)
    return ParamSnapshot(
        kind=obj["kind"],
        shapes=tuple((name, tuple(shape)) for name, shape in obj["shapes"]),
        values=np.asarray(obj["values"], dtype=float),
        training_time_id=obj["training_time_id"],
        meta=obj.get("meta", {}),
    )


def _pack(params: Sequence[tuple[str, np.ndarray]]) -> tuple[tuple, np.ndarray]:
    shapes = tuple((name, tuple(a.shape)) for name, a in params)
    flat = np.concatenate([a.ravel() for _, a in params])
    return shapes, flat


def _check_rows(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("feature rows must be a 2-D matrix")
    if x.shape[1] != width:
        raise ValueError(f"feature width {x.shape[1]} != expected {width}")
    return x


# ---------------------------------------------------------------------------
# linear kind

def _train_linear(spec: LearnerSpec, x: np.ndarray, y: np.ndarray, time_id) -> ParamSnapshot:
    design = np.column_stack([np.ones(x.shape[0]), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    shapes, flat = _pack([("bias", coef[:1]), ("weights", coef[1:])])
    resid = design @ coef - y
    mse = float(np.mean(resid**2))
    meta = {"input_width": spec.input_width, "initial_loss": mse, "final_loss": mse}
    return ParamSnapshot("linear", shapes, flat, time_id, meta)


# ---------------------------------------------------------------------------
# feed-forward kind

def _ffnn_init(spec: LearnerSpec, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    params = []
    sizes = spec.layer_sizes
    for layer, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        params.append((f"W{layer}", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in))))
        params.append((f"b{layer}", np.zeros(fan_out)))
    return params


def ffnn_loss_and_grad(
    flat: np.ndarray,
    layer_sizes: Sequence[int],
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean-squared-error loss and its analytic gradient for the tanh net."""
    sizes = tuple(layer_sizes)
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    offset = 0
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(flat[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in))
        offset += fan_out * fan_in
        biases.append(flat[offset : offset + fan_out])
        offset += fan_out
    n_layers = len(weights)

    acts = [np.asarray(x, dtype=float)]
    for layer in range(n_layers):
        z = acts[-1] @ weights[layer].T + biases[layer]
        acts.append(np.tanh(z) if layer < n_layers - 1 else z)
    pred = acts[-1][:, 0]
    err = pred - y
    n = x.shape[0]
    loss = float(np.mean(err**2))

    grads: list[np.ndarray] = []
    delta = (2.0 * err / n)[:, None]
    for layer in reversed(range(n_layers)):
        g_w = delta.T @ acts[layer]
        g_b = delta.sum(axis=0)
        grads.append(g_b)
        grads.append(g_w.ravel())
        if layer > 0:
            delta = (delta @ weights[layer]) * (1.0 - acts[layer] ** 2)
    grad = np.concatenate(list(reversed(grads)))
    return loss, grad


def _train_feedforward(spec: LearnerSpec, x: np.ndarray, y: np.ndarray, time_id) -> ParamSnapshot:
    rng = seed_for(spec.seed, time_id)
    shapes, flat = _pack(_ffnn_init(spec, rng))
    initial, _ = ffnn_loss_and_grad(flat, spec.layer_sizes, x, y)
    loss = initial
    for _ in range(spec.epochs):
        loss, grad = ffnn_loss_and_grad(flat, spec.layer_sizes, x, y)
        flat = flat - spec.learning_rate * grad
    final, _ = ffnn_loss_and_grad(flat, spec.layer_sizes, x, y)
    meta = {
        "input_width": spec.input_width,
        "layer_sizes": list(spec.layer_sizes),
        "initial_loss": initial,
        "final_loss": final,
    }
    return ParamSnapshot("feedforward", shapes, flat, time_id, meta)


def _ffnn_forward(snapshot: ParamSnapshot, x: np.ndarray) -> np.ndarray:
    params = snapshot.unpack()
    sizes = snapshot.meta["layer_sizes"]
    n_layers = len(sizes) - 1
    a = x
    for layer in range(n_layers):
        z = a @ params[f"W{layer}"].T + params[f"b{layer}"]
        a = np.tanh(z) if layer < n_layers - 1 else z
    return a[:, 0]


# ---------------------------------------------------------------------------
# recurrent kind (LSTM-style gated cell, batched over padded sequences)

_GATES = ("f", "i", "g", "o")


def _lstm_init(spec: LearnerSpec, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    k, h = spec.input_width, spec.layer_sizes[0]
    params = []
    for gate in _GATES:
        params.append((f"W{gate}", rng.normal(0.0, 1.0 / np.sqrt(h + k), (h, h + k))))
        params.append((f"b{gate}", np.zeros(h)))
    params.append(("Wy", rng.normal(0.0, 1.0 / np.sqrt(h), (1, h))))
    params.append(("by", np.zeros(1)))
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _lstm_unpack(flat: np.ndarray, k: int, h: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    offset = 0
    for gate in _GATES:
        params[f"W{gate}"] = flat[offset : offset + h * (h + k)].reshape(h, h + k)
        offset += h * (h + k)
        params[f"b{gate}"] = flat[offset : offset + h]
        offset += h
    params["Wy"] = flat[offset : offset + h].reshape(1, h)
    offset += h
    params["by"] = flat[offset : offset + 1]
    return params


def lstm_loss_and_grad(
    flat: np.ndarray,
    input_width: int,
    hidden_width: int,
    xs: np.ndarray,
    ys: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Masked MSE over (batch, time) positions and its analytic BPTT gradient.

    ``xs`` is (B, T, K); ``ys`` and ``mask`` are (B, T), with mask 1 where a
    target is observed. Padded positions carry mask 0 and contribute nothing.
    """
    k, h = input_width, hidden_width
    p = _lstm_unpack(flat, k, h)
    b, t_max = mask.shape
    n_obs = mask.sum()
    if n_obs == 0:
        raise ValueError("no observed targets in the training sequences")

    hs = np.zeros((t_max + 1, b, h))
    cs = np.zeros((t_max + 1, b, h))
    gates: list[dict[str, np.ndarray]] = []
    preds = np.zeros((b, t_max))
    for t in range(t_max):
        z = np.concatenate([hs[t], xs[:, t, :]], axis=1)
        f = _sigmoid(z @ p["Wf"].T + p["bf"])
        i = _sigmoid(z @ p["Wi"].T + p["bi"])
        g = np.tanh(z @ p["Wg"].T + p["bg"])
        o = _sigmoid(z @ p["Wo"].T + p["bo"])
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates.append({"z": z, "f": f, "i": i, "g": g, "o": o})
        preds[:, t] = hs[t + 1] @ p["Wy"].T[:, 0] + p["by"][0]

    err = (preds - ys) * mask
    loss = float((err**2).sum() / n_obs)

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    dh_next = np.zeros((b, h))
    dc_next = np.zeros((b, h))
    for t in reversed(range(t_max)):
        dpred = (2.0 * err[:, t] / n_obs)[:, None]
        grads["Wy"] += dpred.T @ hs[t + 1]
        grads["by"] += dpred.sum(axis=0)
        dh = dpred @ p["Wy"] + dh_next
        gt = gates[t]
        tanh_c = np.tanh(cs[t + 1])
        do = dh * tanh_c
        dc = dh * gt["o"] * (1.0 - tanh_c**2) + dc_next
        df = dc * cs[t]
        di = dc * gt["g"]
        dg = dc * gt["i"]
        dc_next = dc * gt["f"]
        da = {
            "f": df * gt["f"] * (1.0 - gt["f"]),
            "i": di * gt["i"] * (1.0 - gt["i"]),
            "g": dg * (1.0 - gt["g"] ** 2),
            "o": do * gt["o"] * (1.0 - gt["o"]),
        }
        dz = np.zeros_like(gt["z"])
        for gate in _GATES:
            grads[f"W{gate}"] += da[gate].T @ gt["z"]
            grads[f"b{gate}"] += da[gate].sum(axis=0)
            dz += da[gate] @ p[f"W{gate}"]
        dh_next = dz[:, :h]

    flat_grads = []
    for gate in _GATES:
        flat_grads.append(grads[f"W{gate}"].ravel())
        flat_grads.append(grads[f"b{gate}"])
    flat_grads.append(grads["Wy"].ravel())
    flat_grads.append(grads["by"])
    return loss, np.concatenate(flat_grads)


def _pad_sequences(
    seqs: Sequence[np.ndarray],
    targets: Sequence[np.ndarray] | None,
    masks: Sequence[np.ndarray] | None,
    width: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in seqs], dtype=int)
    b, t_max = len(seqs), int(lengths.max())
    xs = np.zeros((b, t_max, width))
    ys = np.zeros((b, t_max))
    mk = np.zeros((b, t_max))
    for idx, s in enumerate(seqs):
        s = _check_rows(s, width)
        xs[idx, : s.shape[0], :] = s
        if targets is not None:
            ys[idx, : s.shape[0]] = targets[idx]
        if masks is not None:
            mk[idx, : s.shape[0]] = masks[idx]
    return xs, ys, mk, lengths


def train_sequences(
    spec: LearnerSpec,
    seqs: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    training_time_id: object | None = None,
) -> ParamSnapshot:
    """Train the recurrent kind on per-entity sequences via full-batch BPTT.

    ``seqs[i]`` is an (L_i, K) feature sequence; ``targets[i]`` and
    ``masks[i]`` align with it, mask 1 marking positions whose forward target
    is already observable.
    """
    if spec.kind != "recurrent":
        raise ValueError("train_sequences only applies to the recurrent kind")
    if not seqs:
        raise ValueError("training set is empty")
    xs, ys, mk, _ = _pad_sequences(seqs, targets, masks, spec.input_width)
    if mk.sum() == 0:
        raise ValueError("training set is empty")
    rng = seed_for(spec.seed, training_time_id)
    shapes, flat = _pack(_lstm_init(spec, rng))
    h = spec.layer_sizes[0]
    initial, _ = lstm_loss_and_grad(flat, spec.input_width, h, xs, ys, mk)
    for _ in range(spec.epochs):
        _, grad = lstm_loss_and_grad(flat, spec.input_width, h, xs, ys, mk)
        flat = flat - spec.learning_rate * grad
    final, _ = lstm_loss_and_grad(flat, spec.input_width, h, xs, ys, mk)
    meta = {
        "input_width": spec.input_width,
        "hidden_width": h,
        "initial_loss": initial,
        "final_loss": final,
    }
    return ParamSnapshot("recurrent", shapes, flat, training_time_id, meta)


def _lstm_last_outputs(snapshot: ParamSnapshot, seqs: Sequence[np.ndarray]) -> np.ndarray:
    k = snapshot.input_width
    h = int(snapshot.meta["hidden_width"])
    p = _lstm_unpack(snapshot.values, k, h)
    xs, _, _, lengths = _pad_sequences(seqs, None, None, k)
    b, t_max = xs.shape[0], xs.shape[1]
    hs = np.zeros((b, h))
    cs = np.zeros((b, h))
    out = np.zeros(b)
    for t in range(t_max):
        z = np.concatenate([hs, xs[:, t, :]], axis=1)
        f = _sigmoid(z @ p["Wf"].T + p["bf"])
        i = _sigmoid(z @ p["Wi"].T + p["bi"])
        g = np.tanh(z @ p["Wg"].T + p["bg"])
        o = _sigmoid(z @ p["Wo"].T + p["bo"])
        cs = f * cs + i * g
        hs = o * np.tanh(cs)
        done = lengths == t + 1
        if done.any():
            out[done] = hs[done] @ p["Wy"].T[:, 0] + p["by"][0]
    return out


# ---------------------------------------------------------------------------
# dispatch

def train(
    spec: LearnerSpec,
    x: np.ndarray,
    y: np.ndarray,
    training_time_id: object | None = None,
) -> ParamSnapshot:
    """Fit one learner on (rows, targets) and return an immutable snapshot.

    The linear kind solves ordinary least squares in closed form; neural
    kinds run seeded full-batch gradient descent, recording initial and
    final loss in the snapshot metadata. Identical (spec, data, time id)
    inputs yield identical snapshots. For the recurrent kind each row is
    treated as a one-step sequence; use :func:`train_sequences` for genuine
    temporal training.
    """
    x = _check_rows(x, spec.input_width)
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    if y.shape != (x.shape[0],):
        raise ValueError("targets must align one-per-row")
    if spec.kind == "linear":
        return _train_linear(spec, x, y, training_time_id)
    if spec.kind == "feedforward":
        return _train_feedforward(spec, x, y, training_time_id)
    seqs = [row[None, :] for row in x]
    targets = [np.array([v]) for v in y]
    masks = [np.ones(1) for _ in y]
    return train_sequences(spec, seqs, targets, masks, training_time_id)


def predict(snapshot: ParamSnapshot, rows: np.ndarray) -> np.ndarray:
    """One finite forecast per feature row; pure and repeatable."""
    x = _check_rows(rows, snapshot.input_width)
    if snapshot.kind == "linear":
        params = snapshot.unpack()
        return x @ params["weights"] + params["bias"][0]
    if snapshot.kind == "feedforward":
        return _ffnn_forward(snapshot, x)
    if snapshot.kind == "recurrent":
        return _lstm_last_outputs(snapshot, [row[None, :] for row in x])
    raise ValueError(f"unknown snapshot kind {snapshot.kind!r}")


def predict_sequences(snapshot: ParamSnapshot, seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Forecast at the final position of each sequence (recurrent kind only)."""
    if snapshot.kind != "recurrent":
        raise ValueError("predict_sequences only applies to the recurrent kind")
    if not seqs:
        return np.zeros(0)
    return _lstm_last_outputs(snapshot, [_check_rows(s, snapshot.input_width) for s in seqs])
