"""Acceptance suite: one test per exit criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass lines and timings.
"""

import json
import math
import os
import statistics
import time

import numpy as np
import pytest

from claug.autoencoder import ae_loss_and_grad, train_autoencoder
from claug.backtest import compute_metrics, decile_signals, simulate
from claug.cli import build_triangle_rows, cmd_report, cmd_run, resolve_config
from claug.engine import CLAEngine, balance_weights, mean_abs_errors, run_baseline
from claug.learners import LearnerSpec, ffnn_loss_and_grad, lstm_loss_and_grad
from claug.panel import RegimeSchedule, RegimeSpec, generate_regime_panel
from claug.similarity import (
    ContextRepresentation,
    SamplerConfig,
    ae_dissimilarity,
    dtw_dissimilarity,
    dtw_kernel,
    euclidean_dissimilarity,
    make_strategy,
    warp_ae_dissimilarity,
)


def report(criterion, message):
    print(f"ACCEPTANCE {criterion} PASS: {message}")


# ---------------------------------------------------------------------------
# criterion 1: DTW oracle equivalence


def brute_force_dtw(a, b):
    best = [math.inf]
    n, m = len(a), len(b)

    def walk(i, j, cost):
        cost += abs(a[i] - b[j])
        if i == n - 1 and j == m - 1:
            best[0] = min(best[0], cost)
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost)
        if i + 1 < n:
            walk(i + 1, j, cost)
        if j + 1 < m:
            walk(i, j + 1, cost)

    walk(0, 0, 0.0)
    return best[0]


def test_criterion_1_dtw_oracle():
    rng = np.random.default_rng(1)
    started = time.perf_counter()
    for _ in range(1000):
        a = list(rng.normal(size=int(rng.integers(1, 7))))
        b = list(rng.normal(size=int(rng.integers(1, 7))))
        assert dtw_kernel(a, b) == pytest.approx(brute_force_dtw(a, b), rel=1e-12, abs=1e-12)
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    report(1, f"dtw_kernel matches brute-force path enumeration on 1000 pairs ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 2: gradient checks


def central_difference(f, params, eps=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        up[i] += eps
        down = params.copy()
        down[i] -= eps
        grad[i] = (f(up) - f(down)) / (2 * eps)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def test_criterion_2_gradient_checks():
    rng = np.random.default_rng(2)
    worst = 0.0

    sizes = (2, 1, 1)  # 5-parameter feed-forward toy
    x = rng.normal(size=(9, 2))
    y = rng.normal(size=9)
    params = 0.7 * rng.normal(size=5)
    _, analytic = ffnn_loss_and_grad(params, sizes, x, y)
    numeric = central_difference(lambda p: ffnn_loss_and_grad(p, sizes, x, y)[0], params)
    worst = max(worst, relative_error(analytic, numeric))

    k, h = 2, 2
    n_params = 4 * (h * (h + k) + h) + h + 1
    params = 0.5 * rng.normal(size=n_params)
    xs = rng.normal(size=(3, 4, k))
    ys = rng.normal(size=(3, 4))
    mask = (rng.random((3, 4)) > 0.3).astype(float)
    mask[0, 0] = 1.0
    _, analytic = lstm_loss_and_grad(params, k, h, xs, ys, mask)
    numeric = central_difference(lambda p: lstm_loss_and_grad(p, k, h, xs, ys, mask)[0], params)
    worst = max(worst, relative_error(analytic, numeric))

    k, h = 3, 2
    params = 0.5 * rng.normal(size=h * k + h + k * h + k)
    x = rng.normal(size=(9, k))
    _, analytic = ae_loss_and_grad(params, k, h, x, 0.3)
    numeric = central_difference(lambda p: ae_loss_and_grad(p, k, h, x, 0.3)[0], params)
    worst = max(worst, relative_error(analytic, numeric))

    assert worst < 1e-4
    report(2, f"ffnn/lstm/autoencoder analytic gradients match central differences (worst rel err {worst:.2e})")


# ---------------------------------------------------------------------------
# criterion 3: gate soundness suite


def drift_panel(seed=11):
    entries = []
    for i in range(12):
        w = (0.06 * (1 + 0.03 * i), 0.02 * (1 + 0.03 * i), 0.0)
        entries.append(RegimeSpec(i, "A", w, 0.003, (0.0, 0.0, 2.0)))
    entries.append(RegimeSpec(12, "B", (-0.02, 0.06, 0.0), 0.003, (0.0, 0.0, -2.0)))
    late = (0.06 * 1.33, 0.02 * 1.33, 0.0)
    entries.append(RegimeSpec(18, "A", late, 0.003, (0.0, 0.0, 2.0)))
    return generate_regime_panel(RegimeSchedule(tuple(entries), 30), 30, 3, seed=seed)


def test_criterion_3_gate_soundness():
    # part 1: append iff error exceeds the threshold, on a crafted series
    panel, targets, _ = drift_panel(seed=7)
    spec = LearnerSpec("linear", 3, seed=7)
    strat = make_strategy("ed", SamplerConfig(64, 7))
    threshold = 0.05
    run = CLAEngine(panel, targets, spec, strat, window=4, fixed_j_crit=threshold).run()
    base_err = mean_abs_errors(run_baseline(panel, targets, spec, window=4).forecasts, targets)
    fired_steps = [t.index for t in run.traces if t.remember_fired]
    for trace in run.traces:
        s = trace.index - targets.horizon
        if s >= 4:
            assert trace.remember_fired == (base_err[panel.times[s]] > threshold)
    assert fired_steps and [c.created_index for c in run.store.columns] == fired_steps

    # part 2: the learned threshold sits strictly inside (noise max, spike)
    panel, targets, _ = drift_panel(seed=11)
    spec = LearnerSpec("linear", 3, seed=11)
    strat = make_strategy("ed", SamplerConfig(64, 11))
    learned = CLAEngine(panel, targets, spec, strat, window=4, top_k=1).run()
    errs = learned.gate.error_history
    spike = max(errs)
    flush = set(range(12, 16)) | set(range(18, 22))
    noise_max = max(e for i, e in enumerate(errs) if (4 + i) not in flush)
    assert noise_max < learned.gate.j_crit < spike

    # part 3: exhaustive fixed-threshold replay over the grid reproduces it
    grid = np.linspace(min(errs), max(errs), 20)
    last_obs = panel.n_times - 1 - targets.horizon

    def fixed_score(j):
        rerun = CLAEngine(panel, targets, spec, strat, window=4, top_k=1, fixed_j_crit=float(j)).run()
        cla_err = mean_abs_errors(rerun.cla_forecasts, targets)
        return float(np.mean([cla_err[panel.times[s]] for s in range(4, last_obs + 1)]))

    best = best_score = None
    for cand in grid:
        score = fixed_score(cand)
        if best_score is None or score < best_score or (score == best_score and cand > best):
            best, best_score = float(cand), score
    assert best == pytest.approx(learned.gate.j_crit, abs=1e-12)
    report(3, f"memories appended iff err > j_crit; learned j_crit {learned.gate.j_crit:.4f} "
              f"strictly inside ({noise_max:.4f}, {spike:.4f}) and matches exhaustive grid replay")


# ---------------------------------------------------------------------------
# criterion 4: empty-memory equivalence over a full 100-step run


def test_criterion_4_empty_memory_equivalence():
    wa = (0.04, -0.03, 0.02)
    sched = RegimeSchedule(
        (
            RegimeSpec(0, "A", wa, 0.01, (0.5, 0.5, 0.5)),
            RegimeSpec(40, "B", (-0.04, 0.03, 0.0), 0.01, (-0.5, -0.5, -0.5)),
            RegimeSpec(70, "A", wa, 0.01, (0.5, 0.5, 0.5)),
        ),
        104,
    )
    panel, targets, _ = generate_regime_panel(sched, 25, 3, seed=4)
    spec = LearnerSpec("feedforward", 3, epochs=60, learning_rate=0.1, seed=4)
    disabled = CLAEngine(panel, targets, spec, "ed", window=4, disable_gate=True).run()
    baseline = run_baseline(panel, targets, spec, window=4)
    assert len(disabled.times) == 100
    assert disabled.cla_forecasts == baseline.forecasts  # bit-identical floats
    assert len(disabled.store) == 0
    report(4, "gate-disabled forecasts bit-identical to the unaugmented learner over 100 steps")


# ---------------------------------------------------------------------------
# criterion 5: balancing arithmetic


def test_criterion_5_balancing_arithmetic():
    weights = balance_weights([1.0, 3.0])
    assert weights[0] == 0.75 and weights[1] == 0.25
    assert float(weights @ np.array([2.0, 4.0])) == 2.5

    for m in (2, 3, 5, 11):
        np.testing.assert_allclose(balance_weights([0.7] * m), np.full(m, 1.0 / m), atol=1e-12)

    rng = np.random.default_rng(5)
    for _ in range(10_000):
        d = rng.uniform(0.0, 10.0, size=int(rng.integers(2, 9)))
        w = balance_weights(d)
        assert int(np.argmin(d)) == int(np.argmax(w))
    report(5, "D=(1,3) with forecasts (2,4) mixes to exactly 2.5; equal distances give 1/M; "
              "min-distance participant carries max weight across 10,000 random draws")


# ---------------------------------------------------------------------------
# criteria 6 and 8 share the A,B,A,B synthetic-regime setup


WA = (0.05, 0.02, 0.0, 0.0)
WB = (-0.02, 0.05, 0.0, 0.0)


def abab_schedule():
    # markers (features 2-3) separate regimes without moving the target mean;
    # late-A runs hotter than early-A so the boundary context is distinctive
    return RegimeSchedule(
        (
            RegimeSpec(0, "A", WA, 0.005, (0.0, 0.0, 0.8, 0.0)),
            RegimeSpec(5, "A", WA, 0.005, (0.0, 0.0, 2.4, 0.0)),
            RegimeSpec(9, "B", WB, 0.005, (0.0, 0.0, 0.0, 1.6)),
            RegimeSpec(15, "A", WA, 0.005, (0.0, 0.0, 2.4, 0.0)),
            RegimeSpec(30, "B", WB, 0.005, (0.0, 0.0, 0.0, 1.6)),
        ),
        45,
    )


def abab_cell(seed, top_k):
    panel, targets, _ = generate_regime_panel(abab_schedule(), 50, 4, seed=seed)
    spec = LearnerSpec("feedforward", 4, epochs=500, learning_rate=0.15, seed=seed)
    strategy = make_strategy("ed", SamplerConfig(64, seed))
    engine = CLAEngine(panel, targets, spec, strategy, window=4, top_k=top_k)
    result = engine.run()
    baseline = run_baseline(panel, targets, spec, window=4)
    return panel, targets, result, baseline


def test_criterion_6_augmentation_benefit():
    started = time.perf_counter()
    repeated_start = 15  # steps >= 15 belong to regimes already seen
    mae_cla, mae_base, rr_signs = [], [], []
    for seed in range(5):
        panel, targets, result, baseline = abab_cell(seed, top_k=2)
        cla_err = mean_abs_errors(result.cla_forecasts, targets)
        base_err = mean_abs_errors(baseline.forecasts, targets)
        repeated = [t for t in cla_err if int(t) >= repeated_start]
        mae_cla.append(statistics.fmean(cla_err[t] for t in repeated))
        mae_base.append(statistics.fmean(base_err[t] for t in repeated))

        period_returns = {
            panel.times[i + 1]: dict(targets.at(panel.times[i]))
            for i in range(panel.n_times - 1)
        }
        times = list(result.times)

        def portfolio(forecasts):
            signals = {
                t: decile_signals(forecasts[t], t) for i, t in enumerate(times) if i % 6 == 0
            }
            return simulate(times, period_returns, signals, rebalance_every=6)

        metrics = compute_metrics(
            portfolio(result.cla_forecasts).returns,
            portfolio(baseline.forecasts).returns,
            12,
        )
        rr_signs.append(metrics.rr > 0)
    elapsed = time.perf_counter() - started
    assert statistics.median(mae_cla) < statistics.median(mae_base)
    assert sum(rr_signs) >= 4
    assert elapsed < 300.0
    report(6, f"median repeated-regime MAE {statistics.median(mae_cla):.4f} < "
              f"unaugmented {statistics.median(mae_base):.4f}; RR positive in {sum(rr_signs)}/5 seeds "
              f"({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 7: similarity ordering under lag-shift deformation


def test_criterion_7_similarity_ordering():
    k = 16
    lags = np.arange(k + 4)

    def pattern_a(shift):
        return np.sin(2 * np.pi * 3.0 * (lags + shift) / k)[:k]

    def pattern_b(shift):
        return np.sign(np.sin(2 * np.pi * 4.0 * (lags + shift) / k))[:k] * 0.8

    def rows(pattern, n, rng, shifts, noise=0.08):
        out = []
        for _ in range(n):
            amp = rng.uniform(0.8, 1.2)
            shift = shifts[int(rng.integers(len(shifts)))]
            out.append(amp * pattern(shift) + noise * rng.normal(size=k))
        return np.array(out)

    rng = np.random.default_rng(0)
    mem_a = rows(pattern_a, 80, rng, shifts=(0, 1))
    mem_b = rows(pattern_b, 80, rng, shifts=(0, 1))
    raw_a, raw_b = ContextRepresentation(raw_rows=mem_a), ContextRepresentation(raw_rows=mem_b)
    ae_a = ContextRepresentation(ae=train_autoencoder(mem_a, 4, 0.01, epochs=500, seed=1))
    ae_b = ContextRepresentation(ae=train_autoencoder(mem_b, 4, 0.01, epochs=500, seed=1))

    n_steps = 40
    hits = {"ed": 0, "dtw": 0, "warp-ae": 0}
    for step in range(n_steps):
        step_rng = np.random.default_rng(1000 + step)
        current = rows(pattern_a, 25, step_rng, shifts=(2, 3))  # injected deformation
        sampler = SamplerConfig(n_samples=64, seed=step)
        hits["ed"] += euclidean_dissimilarity(raw_a, current, sampler).value < \
            euclidean_dissimilarity(raw_b, current, sampler).value
        hits["dtw"] += dtw_dissimilarity(raw_a, current, sampler).value < \
            dtw_dissimilarity(raw_b, current, sampler).value
        hits["warp-ae"] += warp_ae_dissimilarity(ae_a, current).value < \
            warp_ae_dissimilarity(ae_b, current).value
    frac = {name: count / n_steps for name, count in hits.items()}
    assert frac["dtw"] > frac["ed"]
    assert frac["warp-ae"] > frac["ed"]
    report(7, f"true-memory-first fractions: dtw {frac['dtw']:.2f}, warp-ae {frac['warp-ae']:.2f} "
              f"both strictly above ed {frac['ed']:.2f}")


# ---------------------------------------------------------------------------
# criterion 8: interpretability trace through the CLI artifacts


def abab_experiment_config(out):
    return {
        "data": {
            "generator": {
                "regimes": [
                    {"start": 0, "label": "A", "weights": list(WA), "noise": 0.005,
                     "feature_mean": [0.0, 0.0, 0.8, 0.0]},
                    {"start": 5, "label": "A", "weights": list(WA), "noise": 0.005,
                     "feature_mean": [0.0, 0.0, 2.4, 0.0]},
                    {"start": 9, "label": "B", "weights": list(WB), "noise": 0.005,
                     "feature_mean": [0.0, 0.0, 0.0, 1.6]},
                    {"start": 15, "label": "A", "weights": list(WA), "noise": 0.005,
                     "feature_mean": [0.0, 0.0, 2.4, 0.0]},
                    {"start": 30, "label": "B", "weights": list(WB), "noise": 0.005,
                     "feature_mean": [0.0, 0.0, 0.0, 1.6]},
                ],
                "steps": 45,
                "entities": 50,
                "features": 4,
                "seed": 0,
            }
        },
        "learners": [{"kind": "ffnn", "epochs": 500, "learning_rate": 0.15}],
        "strategies": ["ed"],
        "backtest": {"rebalance_every": 6},
        "seeds": [0],
        "out": str(out),
    }


def test_criterion_8_interpretability_trace(tmp_path):
    config = resolve_config(abab_experiment_config(tmp_path / "run8"), {})
    cmd_run(config)
    cmd_report(config.out)
    cell = "ffnn-ed-seed0"
    trace_path = os.path.join(config.out, "cells", cell, "trace.jsonl")
    traces = [json.loads(line) for line in open(trace_path)]

    # the memory created when the first A->B boundary error lands (step 10)
    boundary_id = None
    with open(os.path.join(config.out, "cells", cell, "memory.json")) as fh:
        for column in json.load(fh):
            if column["created_index"] == 10:
                boundary_id = column["id"]
    assert boundary_id is not None, "no memory formed at the first A->B boundary"

    wins = total = 0
    for obj in traces:
        t = int(obj["t"])
        if 15 <= t < 30:  # the second A regime
            memories = [p for p in obj["participants"] if p["id"] != "base"]
            if memories:
                total += 1
                best = max(memories, key=lambda p: p["weight"])
                wins += best["id"] == boundary_id
    assert total > 0 and wins / total > 0.5

    # triangle CSV must reconstruct exactly from the trace JSONL
    tri_path = os.path.join(config.out, "report", f"triangle-{cell}.csv")
    with open(tri_path) as fh:
        tri_rows = [line.rstrip("\n").split(",") for line in fh][1:]
    expected = [
        [obj["t"], p["id"], str(p["created_at"]), repr(p["weight"])]
        for obj in traces
        for p in obj["participants"]
        if p["id"] != "base"
    ]
    assert tri_rows == expected
    assert len(tri_rows) == sum(
        1 for obj in traces for p in obj["participants"] if p["id"] != "base"
    )
    report(8, f"boundary memory {boundary_id} holds max recall weight in {wins}/{total} "
              f"second-A steps; triangle CSV ({len(tri_rows)} rows) reconstructs exactly from the trace")


# ---------------------------------------------------------------------------
# criterion 9: metrics fixtures


def independent_metrics(strategy, baseline, ppy):
    n = len(strategy)
    compounded = 1.0
    for r in strategy:
        compounded *= 1.0 + r
    tr = compounded ** (ppy / n) - 1.0
    sd = statistics.stdev(strategy) * math.sqrt(ppy)
    diff = [s - b for s, b in zip(strategy, baseline)]
    rr = (sum(diff) / n) * ppy
    rr_sd = statistics.stdev(diff) * math.sqrt(ppy)
    return {
        "tr": tr,
        "sd": sd,
        "sharpe": tr / sd if sd > 0 else None,
        "rr": rr,
        "rr_sd": rr_sd,
        "info_ratio": rr / rr_sd if rr_sd > 0 else None,
    }


def test_criterion_9_metrics_fixtures():
    rng = np.random.default_rng(24)
    strategy = list(rng.normal(0.008, 0.03, 24))
    baseline = list(rng.normal(0.004, 0.025, 24))
    metrics = compute_metrics(strategy, baseline, 12)
    reference = independent_metrics(strategy, baseline, 12)
    for name, expected in reference.items():
        assert getattr(metrics, name) == pytest.approx(expected, abs=1e-10), name

    constant = compute_metrics([0.01] * 12, [0.0] * 12, 12)
    assert constant.tr == pytest.approx(1.01**12 - 1.0, abs=1e-15)
    assert constant.sd == 0.0 and constant.sharpe is None
    report(9, "TR/SD/Sharpe/RR/IR match the independent formula script within 1e-10; "
              f"constant 1% case gives TR={constant.tr:.6f}")


# ---------------------------------------------------------------------------
# criterion 10: end-to-end determinism


def test_criterion_10_end_to_end_determinism(tmp_path):
    def run_into(out):
        cfg = {
            "data": {
                "generator": {
                    "regimes": [
                        {"start": 0, "label": "A", "weights": [0.05, -0.02, 0.01], "noise": 0.005,
                         "feature_mean": [1.0, 1.0, 1.0]},
                        {"start": 10, "label": "B", "weights": [-0.05, 0.03, 0.0], "noise": 0.005,
                         "feature_mean": [-1.0, -1.0, -1.0]},
                    ],
                    "steps": 22,
                    "entities": 20,
                    "features": 3,
                    "seed": 0,
                }
            },
            "learners": [{"kind": "linear"}],
            "strategies": ["ed", "warp-ae"],
            "engine": {"ae": {"epochs": 40}},
            "backtest": {"rebalance_every": 3},
            "seeds": [0],
            "out": str(out),
        }
        config = resolve_config(cfg, {})
        cmd_run(config)
        return config

    first = run_into(tmp_path / "runA")
    second = run_into(tmp_path / "runB")
    compared = 0
    for cell_dir in sorted(os.listdir(os.path.join(first.out, "cells"))):
        for name in ("forecasts.csv", "metrics.json"):
            with open(os.path.join(first.out, "cells", cell_dir, name), "rb") as fh:
                a = fh.read()
            with open(os.path.join(second.out, "cells", cell_dir, name), "rb") as fh:
                b = fh.read()
            assert a == b, f"{cell_dir}/{name} differs between identical runs"
            compared += 1
    assert compared == 6  # 3 cells x 2 artifacts
    report(10, f"two identical runs produced byte-identical forecasts and metrics ({compared} files)")
