import json
import os

import pytest

from claug.cli import (
    ConfigError,
    build_triangle_rows,
    cmd_generate,
    cmd_report,
    cmd_run,
    load_config,
    main,
    resolve_config,
)


def base_config(out, seeds=(0,), learners=None, strategies=("ed",), steps=22):
    return {
        "data": {
            "generator": {
                "regimes": [
                    {"start": 0, "label": "A", "weights": [0.05, -0.02, 0.01], "noise": 0.005,
                     "feature_mean": [1.2, 1.2, 1.2]},
                    {"start": 10, "label": "B", "weights": [-0.05, 0.03, 0.0], "noise": 0.005,
                     "feature_mean": [-1.2, -1.2, -1.2]},
                ],
                "steps": steps,
                "entities": 20,
                "features": 3,
                "seed": 0,
            }
        },
        "learners": learners or [{"kind": "linear"}],
        "strategies": list(strategies),
        "backtest": {"rebalance_every": 3},
        "seeds": list(seeds),
        "out": str(out),
    }


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestConfig:
    def test_seeds_required(self, tmp_path):
        cfg = base_config(tmp_path / "out")
        del cfg["seeds"]
        with pytest.raises(ConfigError):
            resolve_config(cfg, {})

    def test_unknown_keys_rejected(self, tmp_path):
        cfg = base_config(tmp_path / "out")
        cfg["gate"] = {"grid": 20}
        with pytest.raises(ConfigError):
            resolve_config(cfg, {})

    def test_unknown_strategy_rejected(self, tmp_path):
        cfg = base_config(tmp_path / "out", strategies=("cosine",))
        with pytest.raises(ConfigError):
            resolve_config(cfg, {})

    def test_missing_csv_rejected(self, tmp_path):
        cfg = base_config(tmp_path / "out")
        cfg["data"] = {"panel_csv": "nope.csv", "targets_csv": "nope2.csv"}
        path = write_config(tmp_path, cfg)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_overrides(self, tmp_path):
        cfg = base_config(tmp_path / "out", strategies=("ed", "dtw"))
        resolved = resolve_config(cfg, {"strategy": "dtw", "seed": 7, "disable_gate": True})
        assert resolved.strategies == ("dtw",)
        assert resolved.seeds == (7,)
        assert resolved.gate["disable"] is True

    def test_learner_aliases(self, tmp_path):
        cfg = base_config(tmp_path / "out", learners=[{"kind": "ffnn", "epochs": 30}])
        resolved = resolve_config(cfg, {})
        assert resolved.learners[0]["kind"] == "feedforward"


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path):
        cfg = base_config(tmp_path / "gen")
        config = resolve_config(cfg, {})
        first = cmd_generate(config)
        snapshot = {p: read_bytes(p) for p in first}
        again = cmd_generate(config)
        assert first == again
        for p in first:
            assert read_bytes(p) == snapshot[p]

    def test_row_counts_and_labels(self, tmp_path):
        cfg = base_config(tmp_path / "gen2", steps=22)
        paths = cmd_generate(resolve_config(cfg, {}))
        panel_path = next(p for p in paths if p.endswith("panel.csv"))
        labels_path = next(p for p in paths if p.endswith("regimes.csv"))
        with open(panel_path) as fh:
            n_rows = sum(1 for _ in fh) - 1
        assert n_rows == 22 * 20
        with open(labels_path) as fh:
            labels = [line.strip().split(",")[1] for line in fh][1:]
        assert labels == ["A"] * 10 + ["B"] * 12

    def test_generated_targets_follow_regime_map(self, tmp_path):
        import numpy as np
        from claug.panel import Panel, TargetSeries

        cfg = base_config(tmp_path / "gen3")
        cfg["data"]["generator"]["regimes"][0]["noise"] = 0.0
        paths = cmd_generate(resolve_config(cfg, {}))
        panel = Panel.from_csv(next(p for p in paths if p.endswith("panel.csv")))
        targets = TargetSeries.from_csv(next(p for p in paths if p.endswith("targets.csv")), 1)
        # OLS oracle on the noiseless regime-A cross-sections
        rows, ys = [], []
        for i in range(5):
            sec = panel.section(i)
            realized = targets.at(panel.times[i])
            for j, e in enumerate(sec.entities):
                rows.append(sec.values[j])
                ys.append(realized[e])
        x = np.column_stack([np.ones(len(rows)), np.array(rows)])
        coef = np.linalg.lstsq(x, np.array(ys), rcond=None)[0]
        np.testing.assert_allclose(coef[1:], [0.05, -0.02, 0.01], atol=1e-8)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = base_config(
        out,
        seeds=(0, 1),
        learners=[{"kind": "linear"}],
        strategies=("ed", "ae"),
    )
    cfg["engine"] = {"ae": {"epochs": 30}}
    config = resolve_config(cfg, {})
    cmd_run(config)
    return cfg, config


class TestRun:
    def test_artifact_layout(self, small_run):
        cfg, config = small_run
        cells = json.load(open(os.path.join(config.out, "manifest.json")))["cells"]
        # 2 strategies + 1 baseline per learner per seed
        assert len(cells) == 2 * (1 + 2)
        for cell in cells:
            cell_dir = os.path.join(config.out, "cells", cell["name"])
            assert os.path.exists(os.path.join(cell_dir, "forecasts.csv"))
            assert os.path.exists(os.path.join(cell_dir, "metrics.json"))
            assert os.path.exists(os.path.join(cell_dir, "returns.csv"))
            if cell["strategy"] != "baseline":
                assert os.path.exists(os.path.join(cell_dir, "trace.jsonl"))
                assert os.path.exists(os.path.join(cell_dir, "memory.json"))

    def test_baseline_metrics_degenerate(self, small_run):
        cfg, config = small_run
        payload = json.load(
            open(os.path.join(config.out, "cells", "linear-baseline-seed0", "metrics.json"))
        )
        assert payload["backtest"]["rr"] == 0.0
        assert payload["backtest"]["info_ratio"] is None

    def test_rerun_byte_identical(self, small_run, tmp_path):
        cfg, config = small_run
        rerun_cfg = dict(cfg)
        rerun_cfg["out"] = str(tmp_path / "rerun")
        cmd_run(resolve_config(rerun_cfg, {}))
        for cell in json.load(open(os.path.join(config.out, "manifest.json")))["cells"]:
            for name in ("forecasts.csv", "metrics.json"):
                a = read_bytes(os.path.join(config.out, "cells", cell["name"], name))
                b = read_bytes(os.path.join(rerun_cfg["out"], "cells", cell["name"], name))
                if name == "metrics.json":
                    # the payload embeds no paths, so bytes must match exactly
                    assert a == b, cell["name"]
                else:
                    assert a == b, cell["name"]

    def test_disable_gate_matches_baseline(self, tmp_path):
        cfg = base_config(tmp_path / "nogate", seeds=(3,), strategies=("ed",))
        config = resolve_config(cfg, {"disable_gate": True})
        cmd_run(config)
        base = read_bytes(os.path.join(config.out, "cells", "linear-baseline-seed3", "forecasts.csv"))
        cla = read_bytes(os.path.join(config.out, "cells", "linear-ed-seed3", "forecasts.csv"))
        assert base == cla

    def test_workers_match_sequential(self, small_run, tmp_path):
        cfg, config = small_run
        par_cfg = dict(cfg)
        par_cfg["out"] = str(tmp_path / "par")
        cmd_run(resolve_config(par_cfg, {}), workers=2)
        for cell in json.load(open(os.path.join(config.out, "manifest.json")))["cells"]:
            a = read_bytes(os.path.join(config.out, "cells", cell["name"], "forecasts.csv"))
            b = read_bytes(os.path.join(par_cfg["out"], "cells", cell["name"], "forecasts.csv"))
            assert a == b


class TestReport:
    def test_summary_and_triangle(self, small_run, capsys):
        cfg, config = small_run
        report = cmd_report(config.out)
        out = capsys.readouterr().out
        assert "learner" in out and "ed" in out
        groups = {(g["learner"], g["strategy"]): g for g in report["groups"]}
        assert ("linear", "ed") in groups and ("linear", "baseline") in groups
        assert groups[("linear", "ed")]["n_seeds"] == 2
        # single-metric median над two seeds equals the plain midpoint
        cells = json.load(open(os.path.join(config.out, "manifest.json")))["cells"]
        ed_cells = [c for c in cells if c["strategy"] == "ed"]
        trs = []
        for cell in ed_cells:
            payload = json.load(open(os.path.join(config.out, "cells", cell["name"], "metrics.json")))
            trs.append(payload["backtest"]["tr"])
        assert groups[("linear", "ed")]["tr"] == pytest.approx(sorted(trs)[0] / 2 + sorted(trs)[1] / 2)

    def test_triangle_matches_trace(self, small_run):
        cfg, config = small_run
        cmd_report(config.out)
        cell = "linear-ed-seed0"
        tri_path = os.path.join(config.out, "report", f"triangle-{cell}.csv")
        trace_path = os.path.join(config.out, "cells", cell, "trace.jsonl")
        with open(tri_path) as fh:
            rows = [line.strip().split(",") for line in fh][1:]
        # independent recount from the trace JSONL
        expected = []
        with open(trace_path) as fh:
            for line in fh:
                obj = json.loads(line)
                for p in obj["participants"]:
                    if p["id"] != "base":
                        expected.append([obj["t"], p["id"], p["created_at"], repr(p["weight"])])
        assert rows == expected
        alive_total = sum(
            sum(1 for p in json.loads(line)["participants"] if p["id"] != "base")
            for line in open(trace_path)
        )
        assert len(rows) == alive_total

    def test_missing_artifacts_listed(self, small_run, tmp_path):
        cfg, config = small_run
        broken = tmp_path / "broken"
        os.makedirs(broken / "cells" / "linear-ed-seed0", exist_ok=True)
        manifest = {"cells": [{"name": "linear-ed-seed0", "learner": "linear", "strategy": "ed", "seed": 0}]}
        (broken / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FileNotFoundError) as err:
            cmd_report(str(broken))
        assert "metrics.json" in str(err.value)


class TestMainEntry:
    def test_exit_codes_and_error_json(self, tmp_path, capsys):
        cfg = base_config(tmp_path / "cli")
        path = write_config(tmp_path, cfg)
        assert main(["generate", "--config", path]) == 0
        capsys.readouterr()
        assert main(["report", str(tmp_path / "missing")]) == 2
        err = capsys.readouterr().err
        payload = json.loads(err)
        assert payload["error"] == "FileNotFoundError"

    def test_run_and_inspect(self, tmp_path, capsys):
        cfg = base_config(tmp_path / "cli2", seeds=(5,), strategies=("ed",))
        path = write_config(tmp_path, cfg)
        assert main(["run", "--config", path]) == 0
        capsys.readouterr()
        snapshot = str(tmp_path / "cli2" / "cells" / "linear-ed-seed5" / "memory.json")
        assert main(["inspect-memory", snapshot]) == 0
        out = capsys.readouterr().out
        assert "memory column" in out
