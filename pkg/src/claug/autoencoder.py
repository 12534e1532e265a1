"""Sparse autoencoder used for learned context representations.

ReLU encoder, pure-linear decoder, trained by full-batch gradient descent on
mean squared reconstruction error plus an L1 penalty on hidden activations.
Kept deliberately small: it is a distribution summary, not a forecaster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .learners import seed_for

__all__ = [
    "AEParams",
    "ae_from_json",
    "ae_loss_and_grad",
    "ae_to_json",
    "encode",
    "reconstruct",
    "train_autoencoder",
]


@dataclass(frozen=True)
class AEParams:
    """Immutable autoencoder parameterization."""

    encoder_w: np.ndarray  # (H, K)
    encoder_b: np.ndarray  # (H,)
    decoder_w: np.ndarray  # (K, H)
    decoder_b: np.ndarray  # (K,)
    hidden_width: int
    sparsity_weight: float
    training_time_id: str | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("encoder_w", "encoder_b", "decoder_w", "decoder_b"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be >= 0")
        h, k = self.encoder_w.shape
        if h != self.hidden_width or self.decoder_w.shape != (k, h):
            raise ValueError("encoder/decoder shapes are inconsistent")

    @property
    def input_width(self) -> int:
        return self.encoder_w.shape[1]


def _split(flat: np.ndarray, k: int, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    o = 0
    ew = flat[o : o + h * k].reshape(h, k); o += h * k
    eb = flat[o : o + h]; o += h
    dw = flat[o : o + k * h].reshape(k, h); o += k * h
    db = flat[o : o + k]
    return ew, eb, dw, db


def ae_loss_and_grad(
    flat: np.ndarray,
    input_width: int,
    hidden_width: int,
    x: np.ndarray,
    sparsity_weight: float,
) -> tuple[float, np.ndarray]:
    """Total loss (reconstruction MSE + L1 sparsity) with analytic gradient."""
    k, h = input_width, hidden_width
    ew, eb, dw, db = _split(flat, k, h)
    n = x.shape[0]
    pre = x @ ew.T + eb
    hid = np.maximum(pre, 0.0)
    rec = hid @ dw.T + db
    diff = rec - x
    recon = float(np.mean(diff**2))
    sparsity = float(np.mean(np.abs(hid)))
    loss = recon + sparsity_weight * sparsity

    drec = 2.0 * diff / diff.size
    g_dw = drec.T @ hid
    g_db = drec.sum(axis=0)
    dhid = drec @ dw + sparsity_weight * np.sign(hid) / hid.size
    dpre = dhid * (pre > 0)
    g_ew = dpre.T @ x
    g_eb = dpre.sum(axis=0)
    grad = np.concatenate([g_ew.ravel(), g_eb, g_dw.ravel(), g_db])
    return loss, grad


def train_autoencoder(
    rows: np.ndarray,
    hidden_width: int,
    sparsity_weight: float = 0.0,
    epochs: int = 200,
    seed: int = 0,
    learning_rate: float = 0.05,
    training_time_id: object | None = None,
) -> AEParams:
    """Fit the sparse autoencoder on feature rows; deterministic under seed."""
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training rows must be a nonempty 2-D matrix")
    if hidden_width < 1:
        raise ValueError("hidden_width must be >= 1")
    k = x.shape[1]
    rng = seed_for(seed, training_time_id)
    flat = np.concatenate(
        [
            rng.normal(0.0, 1.0 / np.sqrt(k), h_k := hidden_width * k),
            np.zeros(hidden_width),
            rng.normal(0.0, 1.0 / np.sqrt(hidden_width), h_k),
            np.zeros(k),
        ]
    )
    initial, _ = ae_loss_and_grad(flat, k, hidden_width, x, sparsity_weight)
    for _ in range(epochs):
        _, grad = ae_loss_and_grad(flat, k, hidden_width, x, sparsity_weight)
        flat = flat - learning_rate * grad
    final, _ = ae_loss_and_grad(flat, k, hidden_width, x, sparsity_weight)
    ew, eb, dw, db = _split(flat, k, hidden_width)
    return AEParams(
        encoder_w=ew.copy(),
        encoder_b=eb.copy(),
        decoder_w=dw.copy(),
        decoder_b=db.copy(),
        hidden_width=hidden_width,
        sparsity_weight=sparsity_weight,
        training_time_id=None if training_time_id is None else str(training_time_id),
        meta={"initial_loss": initial, "final_loss": final},
    )


def encode(ae: AEParams, rows: np.ndarray) -> np.ndarray:
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2 or x.shape[1] != ae.input_width:
        raise ValueError(f"rows must be 2-D with width {ae.input_width}")
    return np.maximum(x @ ae.encoder_w.T + ae.encoder_b, 0.0)


def reconstruct(ae: AEParams, rows: np.ndarray) -> np.ndarray:
    """decode(encode(rows)); pure, deterministic, shape-preserving."""
    return encode(ae, rows) @ ae.decoder_w.T + ae.decoder_b


def ae_to_json(ae: AEParams) -> str:
    obj = {
        "kind": "autoencoder",
        "shapes": {
            "encoder_w": list(ae.encoder_w.shape),
            "encoder_b": list(ae.encoder_b.shape),
            "decoder_w": list(ae.decoder_w.shape),
            "decoder_b": list(ae.decoder_b.shape),
        },
        "values": {
            "encoder_w": [float(v) for v in ae.encoder_w.ravel()],
            "encoder_b": [float(v) for v in ae.encoder_b],
            "decoder_w": [float(v) for v in ae.decoder_w.ravel()],
            "decoder_b": [float(v) for v in ae.decoder_b],
        },
        "hidden_width": ae.hidden_width,
        "sparsity_weight": ae.sparsity_weight,
        "training_time_id": ae.training_time_id,
        "meta": dict(ae.meta),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def ae_from_json(text: str) -> AEParams:
    obj = json.loads(text)
    shapes = obj["shapes"]
    values = obj["values"]
    return AEParams(
        encoder_w=np.asarray(values["encoder_w"]).reshape(shapes["encoder_w"]),
        encoder_b=np.asarray(values["encoder_b"]).reshape(shapes["encoder_b"]),
        decoder_w=np.asarray(values["decoder_w"]).reshape(shapes["decoder_w"]),
        decoder_b=np.asarray(values["decoder_b"]).reshape(shapes["decoder_b"]),
        hidden_width=int(obj["hidden_width"]),
        sparsity_weight=float(obj["sparsity_weight"]),
        training_time_id=obj.get("training_time_id"),
        meta=obj.get("meta", {}),
    )
