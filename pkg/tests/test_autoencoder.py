import numpy as np
import pytest

from claug.autoencoder import (
    ae_from_json,
    ae_loss_and_grad,
    ae_to_json,
    encode,
    reconstruct,
    train_autoencoder,
)


def central_difference(f, params, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        up[i] += eps
        down = params.copy()
        down[i] -= eps
        grad[i] = (f(up) - f(down)) / (2 * eps)
    return grad


def low_rank_data(seed=3, n=120, k=4, rank=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, rank)) @ rng.normal(size=(rank, k))


def test_gradient_check():
    rng = np.random.default_rng(0)
    k, h = 3, 2
    params = 0.5 * rng.normal(size=h * k + h + k * h + k)
    x = rng.normal(size=(9, k))
    _, analytic = ae_loss_and_grad(params, k, h, x, sparsity_weight=0.3)
    numeric = central_difference(lambda p: ae_loss_and_grad(p, k, h, x, 0.3)[0], params)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    assert rel < 1e-4


def test_low_rank_reconstruction():
    x = low_rank_data()
    ae = train_autoencoder(x, hidden_width=x.shape[1], sparsity_weight=0.0, epochs=400, seed=1)
    mse = float(np.mean((reconstruct(ae, x) - x) ** 2))
    variance = float(np.mean((x - x.mean(axis=0)) ** 2))
    assert mse < 0.1 * variance


def test_zero_sparsity_total_equals_reconstruction():
    x = low_rank_data(seed=5)
    ae = train_autoencoder(x, hidden_width=3, sparsity_weight=0.0, epochs=50, seed=2)
    flat = np.concatenate(
        [ae.encoder_w.ravel(), ae.encoder_b, ae.decoder_w.ravel(), ae.decoder_b]
    )
    total, _ = ae_loss_and_grad(flat, ae.input_width, ae.hidden_width, x, 0.0)
    recon = float(np.mean((reconstruct(ae, x) - x) ** 2))
    assert total == pytest.approx(recon, abs=1e-15)


def test_sparsity_weight_shrinks_activations():
    # trained with the same seed, a heavier L1 term cannot grow mean |hidden|
    x = low_rank_data(seed=7)
    lean = train_autoencoder(x, hidden_width=4, sparsity_weight=0.0, epochs=300, seed=4)
    heavy = train_autoencoder(x, hidden_width=4, sparsity_weight=2.0, epochs=300, seed=4)
    act_lean = float(np.mean(np.abs(encode(lean, x))))
    act_heavy = float(np.mean(np.abs(encode(heavy, x))))
    assert act_heavy <= act_lean


def test_reconstruction_within_achieved_loss():
    x = low_rank_data(seed=9)
    ae = train_autoencoder(x, hidden_width=4, sparsity_weight=0.0, epochs=500, seed=6)
    mse = float(np.mean((reconstruct(ae, x) - x) ** 2))
    assert mse <= ae.meta["final_loss"] + 1e-12


def test_shape_and_purity():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(25, 3))
    ae = train_autoencoder(x, hidden_width=2, epochs=30, seed=0)
    rows = rng.normal(size=(7, 3))
    first = reconstruct(ae, rows)
    assert first.shape == (7, 3)
    assert np.array_equal(first, reconstruct(ae, rows))
    with pytest.raises(ValueError):
        reconstruct(ae, rows[:, :2])


def test_out_of_distribution_error_larger():
    rng = np.random.default_rng(11)
    regime_a = 1.5 + rng.normal(size=(100, 4))
    regime_b = -1.5 + rng.normal(size=(100, 4))
    ae = train_autoencoder(regime_a, hidden_width=4, sparsity_weight=0.01, epochs=300, seed=2)
    fresh_a = 1.5 + rng.normal(size=(100, 4))
    err_in = float(np.mean((reconstruct(ae, fresh_a) - fresh_a) ** 2))
    err_out = float(np.mean((reconstruct(ae, regime_b) - regime_b) ** 2))
    assert err_out > err_in


def test_determinism_and_round_trip():
    x = low_rank_data(seed=12)
    a = train_autoencoder(x, hidden_width=3, sparsity_weight=0.05, epochs=40, seed=9,
                          training_time_id="0003")
    b = train_autoencoder(x, hidden_width=3, sparsity_weight=0.05, epochs=40, seed=9,
                          training_time_id="0003")
    assert ae_to_json(a) == ae_to_json(b)
    restored = ae_from_json(ae_to_json(a))
    assert np.array_equal(reconstruct(restored, x), reconstruct(a, x))


def test_input_validation():
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((0, 3)), hidden_width=2)
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((5, 3)), hidden_width=0)
