"""Batch front door: config-driven experiment runs, reports, inspection.

Subcommands: ``generate`` writes synthetic panel/target CSVs, ``run``
executes the step-forward loop for every (learner x strategy) cell plus an
unaugmented baseline per learner, ``report`` aggregates metrics across seeds
(median, as well as mean) and exports memory-triangle CSVs, and
``inspect-memory`` pretty-prints a memory snapshot. Every run is
reproducible from its persisted config and seeds alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

from .backtest import compute_metrics, decile_signals, simulate
from .engine import CLAEngine, mean_abs_errors, memory_store_to_json, run_baseline, write_trace_jsonl
from .learners import KINDS, LearnerSpec
from .panel import Panel, TargetSeries, generate_regime_panel, parse_generator_config
from .similarity import AEOptions, STRATEGY_NAMES, SamplerConfig, make_strategy

log = logging.getLogger(__name__)

LEARNER_ALIASES = {"ffnn": "feedforward", "lstm": "recurrent", "linear": "linear"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; seeds are always explicit."""

    data: Mapping
    learners: tuple[Mapping, ...]
    strategies: tuple[str, ...]
    gate: Mapping
    engine: Mapping
    backtest: Mapping
    seeds: tuple[int, ...]
    out: str

    def to_obj(self) -> dict:
        return {
            "data": dict(self.data),
            "learners": [dict(l) for l in self.learners],
            "strategies": list(self.strategies),
            "gate": dict(self.gate),
            "engine": dict(self.engine),
            "backtest": dict(self.backtest),
            "seeds": list(self.seeds),
            "out": self.out,
        }


GATE_DEFAULTS = {"grid_size": 20, "relearn_every": 1, "capacity": None, "top_k": None, "disable": False}
ENGINE_DEFAULTS = {
    "window": 4,
    "warmup": None,
    "sampler": {"n_samples": 64},
    "ae": {"hidden_width": None, "sparsity_weight": 0.01, "epochs": 150, "learning_rate": 0.05},
    "dtw_band": None,
}
BACKTEST_DEFAULTS = {"rebalance_every": 6, "periods_per_year": 12}


def _merged(defaults: Mapping, given: Mapping | None, name: str) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in defaults.items()}
    for key, value in (given or {}).items():
        if key not in out:
            raise ConfigError(f"unknown {name} config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            for sub, sub_value in value.items():
                if sub not in out[key]:
                    raise ConfigError(f"unknown {name}.{key} config key {sub!r}")
                out[key][sub] = sub_value
        else:
            out[key] = value
    return out


def load_config(path: str, overrides: Mapping | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return resolve_config(raw, overrides or {}, base_dir=os.path.dirname(os.path.abspath(path)))


def resolve_config(raw: Mapping, overrides: Mapping, base_dir: str = ".") -> ExperimentConfig:
    data = dict(raw.get("data") or {})
    if ("generator" in data) == any(k in data for k in ("panel_csv", "targets_csv")):
        raise ConfigError("data must provide either a generator config or CSV paths")
    if "generator" in data:
        parse_generator_config(data["generator"])  # validate shape early
    else:
        for key in ("panel_csv", "targets_csv"):
            if key not in data:
                raise ConfigError(f"data.{key} is required for CSV input")
            data[key] = os.path.join(base_dir, data[key]) if not os.path.isabs(data[key]) else data[key]
            if not os.path.exists(data[key]):
                raise ConfigError(f"data file not found: {data[key]}")
        data.setdefault("horizon", 1)

    learners = raw.get("learners") or []
    if overrides.get("learner"):
        learners = [l for l in learners if _kind_of(l) == LEARNER_ALIASES.get(overrides["learner"], overrides["learner"])]
        if not learners:
            learners = [{"kind": overrides["learner"]}]
    if not learners:
        raise ConfigError("at least one learner is required")
    norm_learners = []
    for item in learners:
        item = dict(item)
        kind = _kind_of(item)
        if kind not in KINDS:
            raise ConfigError(f"unknown learner kind {item.get('kind')!r}")
        item["kind"] = kind
        norm_learners.append(item)
    if len({l["kind"] for l in norm_learners}) != len(norm_learners):
        raise ConfigError("learner kinds must be distinct within one run")

    strategies = list(raw.get("strategies") or [])
    if overrides.get("strategy"):
        strategies = [overrides["strategy"]]
    if not strategies:
        raise ConfigError("at least one similarity strategy is required")
    for name in strategies:
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}; pick from {STRATEGY_NAMES}")

    gate = _merged(GATE_DEFAULTS, raw.get("gate"), "gate")
    if overrides.get("disable_gate"):
        gate["disable"] = True
    engine_cfg = _merged(ENGINE_DEFAULTS, raw.get("engine"), "engine")
    backtest_cfg = _merged(BACKTEST_DEFAULTS, raw.get("backtest"), "backtest")

    seeds = raw.get("seeds")
    if overrides.get("seed") is not None:
        seeds = [int(overrides["seed"])]
    if not seeds:
        raise ConfigError("seeds must be given explicitly (no wall-clock defaults)")
    seeds = tuple(int(s) for s in seeds)

    out = overrides.get("out") or raw.get("out")
    if not out:
        raise ConfigError("an output directory is required (config 'out' or --out)")
    return ExperimentConfig(
        data=data,
        learners=tuple(norm_learners),
        strategies=tuple(strategies),
        gate=gate,
        engine=engine_cfg,
        backtest=backtest_cfg,
        seeds=seeds,
        out=str(out),
    )


def _kind_of(learner_cfg: Mapping) -> str:
    kind = str(learner_cfg.get("kind", ""))
    return LEARNER_ALIASES.get(kind, kind)


def _learner_label(kind: str) -> str:
    return {"feedforward": "ffnn", "recurrent": "lstm", "linear": "linear"}[kind]


def _load_data(config: ExperimentConfig, seed: int) -> tuple[Panel, TargetSeries]:
    data = config.data
    if "generator" in data:
        gen = dict(data["generator"])
        gen["seed"] = seed
        schedule, n_entities, n_features, gseed = parse_generator_config(gen)
        panel, targets, _ = generate_regime_panel(schedule, n_entities, n_features, gseed)
        return panel, targets
    panel = Panel.from_csv(data["panel_csv"])
    targets = TargetSeries.from_csv(data["targets_csv"], horizon=int(data.get("horizon", 1)))
    return panel, targets


def _build_spec(learner_cfg: Mapping, input_width: int, seed: int) -> LearnerSpec:
    kwargs = {k: v for k, v in learner_cfg.items() if k != "kind"}
    if "layer_sizes" in kwargs:
        kwargs["layer_sizes"] = tuple(kwargs["layer_sizes"])
    return LearnerSpec(kind=learner_cfg["kind"], input_width=input_width, seed=seed, **kwargs)


def _build_strategy(config: ExperimentConfig, name: str, seed: int):
    sampler = SamplerConfig(n_samples=int(config.engine["sampler"]["n_samples"]), seed=seed)
    ae_cfg = config.engine["ae"]
    ae_options = AEOptions(
        hidden_width=ae_cfg["hidden_width"],
        sparsity_weight=float(ae_cfg["sparsity_weight"]),
        epochs=int(ae_cfg["epochs"]),
        learning_rate=float(ae_cfg["learning_rate"]),
        seed=seed,
    )
    return make_strategy(name, sampler=sampler, ae_options=ae_options, dtw_band=config.engine["dtw_band"])


def _period_returns(panel: Panel, targets: TargetSeries) -> dict[str, dict[str, float]]:
    """Per-period realized returns: a horizon-1 target at t is the return
    earned over (t, t+1], booked at t+1."""
    if targets.horizon != 1:
        raise ConfigError("backtesting needs one-step targets (horizon 1)")
    out: dict[str, dict[str, float]] = {}
    for i in range(panel.n_times - 1):
        realized = targets.at(panel.times[i])
        if realized:
            out[panel.times[i + 1]] = dict(realized)
    return out


def _write_forecasts_csv(path: str, forecasts: Mapping[str, Mapping[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "entity", "forecast"])
        for t in sorted(forecasts):
            row = forecasts[t]
            for e in sorted(row):
                writer.writerow([t, e, repr(float(row[e]))])


def _write_returns_csv(path: str, times: Sequence[str], strategy, baseline) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "strategy_return", "baseline_return"])
        for t, s, b in zip(times, strategy, baseline):
            writer.writerow([t, repr(float(s)), repr(float(b))])


def _dump_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _backtest_returns(
    forecasts: Mapping[str, Mapping[str, float]],
    period_returns: Mapping[str, Mapping[str, float]],
    rebalance_every: int,
):
    times = sorted(forecasts)
    signals = {}
    for i, t in enumerate(times):
        if i % rebalance_every == 0:
            signals[t] = decile_signals(forecasts[t], t)
    return simulate(times, period_returns, signals, rebalance_every=rebalance_every)


def run_cell(config_obj: Mapping, cell: Mapping) -> str:
    """Execute one (learner, strategy, seed) cell and write its artifacts.

    Standalone so that worker processes can run cells independently; data is
    regenerated deterministically inside each worker.
    """
    config = resolve_config(config_obj, {})
    seed = int(cell["seed"])
    panel, targets = _load_data(config, seed)
    learner_cfg = next(l for l in config.learners if _learner_label(l["kind"]) == cell["learner"])
    spec = _build_spec(learner_cfg, panel.k, seed)
    gate = config.gate
    cell_dir = os.path.join(config.out, "cells", cell["name"])
    os.makedirs(cell_dir, exist_ok=True)

    warmup = config.engine["warmup"]
    window = int(config.engine["window"])
    baseline = run_baseline(panel, targets, spec, window=window, warmup=warmup)
    if cell["strategy"] == "baseline":
        forecasts = baseline.forecasts
        trace_artifacts = None
    else:
        strategy = _build_strategy(config, cell["strategy"], seed)
        eng = CLAEngine(
            panel,
            targets,
            spec,
            strategy,
            window=window,
            grid_size=int(gate["grid_size"]),
            relearn_every=int(gate["relearn_every"]),
            capacity=gate["capacity"],
            top_k=gate["top_k"],
            disable_gate=bool(gate["disable"]),
            warmup=warmup,
        )
        result = eng.run()
        forecasts = result.cla_forecasts
        trace_artifacts = result

    period_returns = _period_returns(panel, targets)
    rebalance = int(config.backtest["rebalance_every"])
    strat_series = _backtest_returns(forecasts, period_returns, rebalance)
    base_series = _backtest_returns(baseline.forecasts, period_returns, rebalance)
    metrics = compute_metrics(
        strat_series.returns, base_series.returns, int(config.backtest["periods_per_year"])
    )
    errors = mean_abs_errors(forecasts, targets)
    base_errors = mean_abs_errors(baseline.forecasts, targets)
    payload = {
        "cell": dict(cell),
        "backtest": metrics.to_obj(),
        "forecast": {
            "mae": statistics.fmean(errors.values()) if errors else None,
            "baseline_mae": statistics.fmean(base_errors.values()) if base_errors else None,
            "n_steps": len(errors),
        },
    }
    _write_forecasts_csv(os.path.join(cell_dir, "forecasts.csv"), forecasts)
    _write_returns_csv(
        os.path.join(cell_dir, "returns.csv"), strat_series.times, strat_series.returns, base_series.returns
    )
    _dump_json(os.path.join(cell_dir, "metrics.json"), payload)
    if trace_artifacts is not None:
        write_trace_jsonl(trace_artifacts.traces, os.path.join(cell_dir, "trace.jsonl"))
        with open(os.path.join(cell_dir, "memory.json"), "w", encoding="utf-8") as fh:
            fh.write(memory_store_to_json(trace_artifacts.store))
    return cell["name"]


def _cells_for(config: ExperimentConfig) -> list[dict]:
    cells = []
    for seed in config.seeds:
        for learner_cfg in config.learners:
            label = _learner_label(learner_cfg["kind"])
            baseline_name = f"{label}-baseline-seed{seed}"
            cells.append({"name": baseline_name, "learner": label, "strategy": "baseline", "seed": seed})
            for strategy in config.strategies:
                cells.append(
                    {
                        "name": f"{label}-{strategy}-seed{seed}",
                        "learner": label,
                        "strategy": strategy,
                        "seed": seed,
                        "baseline_cell": baseline_name,
                    }
                )
    return cells


def cmd_generate(config: ExperimentConfig) -> list[str]:
    if "generator" not in config.data:
        raise ConfigError("generate requires a generator data config")
    paths = []
    for seed in config.seeds:
        out_dir = os.path.join(config.out, f"seed{seed}")
        os.makedirs(out_dir, exist_ok=True)
        gen = dict(config.data["generator"])
        gen["seed"] = seed
        schedule, n_entities, n_features, gseed = parse_generator_config(gen)
        panel, targets, labels = generate_regime_panel(schedule, n_entities, n_features, gseed)
        panel_path = os.path.join(out_dir, "panel.csv")
        target_path = os.path.join(out_dir, "targets.csv")
        labels_path = os.path.join(out_dir, "regimes.csv")
        panel.to_csv(panel_path)
        targets.to_csv(target_path)
        with open(labels_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "regime"])
            for t, label in zip(panel.times, labels):
                writer.writerow([t, label])
        paths += [panel_path, target_path, labels_path]
    for p in paths:
        print(p)
    return paths


def cmd_run(config: ExperimentConfig, workers: int = 1) -> list[str]:
    os.makedirs(config.out, exist_ok=True)
    config_obj = config.to_obj()
    _dump_json(os.path.join(config.out, "config.json"), config_obj)
    cells = _cells_for(config)
    _dump_json(os.path.join(config.out, "manifest.json"), {"cells": cells})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(run_cell, [config_obj] * len(cells), cells))
    else:
        done = [run_cell(config_obj, cell) for cell in cells]
    for name in done:
        print(os.path.join(config.out, "cells", name))
    return done


def build_triangle_rows(trace_path: str) -> list[tuple[str, str, str, float]]:
    """(step, memory_id, created_at, weight) rows straight from the trace."""
    rows = []
    with open(trace_path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            for participant in obj["participants"]:
                if participant["id"] == "base":
                    continue
                rows.append(
                    (obj["t"], participant["id"], participant["created_at"], participant["weight"])
                )
    return rows


def _median_or_none(values: list) -> float | None:
    present = [v for v in values if v is not None]
    return statistics.median(present) if present else None


def _mean_or_none(values: list) -> float | None:
    present = [v for v in values if v is not None]
    return statistics.fmean(present) if present else None


REPORT_METRICS = ("tr", "sd", "sharpe", "sharpe_p", "rr", "rr_sd", "info_ratio", "ir_t", "ir_p")


def cmd_report(run_dir: str) -> dict:
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"missing manifest.json in {run_dir}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = []
    by_group: dict[tuple[str, str], list[dict]] = {}
    report_dir = os.path.join(run_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    for cell in manifest["cells"]:
        cell_dir = os.path.join(run_dir, "cells", cell["name"])
        metrics_path = os.path.join(cell_dir, "metrics.json")
        if not os.path.exists(metrics_path):
            missing.append(metrics_path)
            continue
        with open(metrics_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        by_group.setdefault((cell["learner"], cell["strategy"]), []).append(payload)
        if cell["strategy"] != "baseline":
            trace_path = os.path.join(cell_dir, "trace.jsonl")
            if os.path.exists(trace_path):
                triangle = build_triangle_rows(trace_path)
                tri_path = os.path.join(report_dir, f"triangle-{cell['name']}.csv")
                with open(tri_path, "w", newline="", encoding="utf-8") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["step", "memory_id", "created_at", "weight"])
                    for row in triangle:
                        writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
            else:
                missing.append(trace_path)
    if missing:
        raise FileNotFoundError("missing run artifacts: " + ", ".join(sorted(missing)))

    summary = []
    for (learner, strategy), payloads in sorted(by_group.items()):
        entry = {"learner": learner, "strategy": strategy, "n_seeds": len(payloads)}
        for metric in REPORT_METRICS:
            values = [p["backtest"][metric] for p in payloads]
            entry[metric] = _median_or_none(values)
            entry[f"{metric}_mean"] = _mean_or_none(values)
        entry["forecast_mae"] = _median_or_none([p["forecast"]["mae"] for p in payloads])
        summary.append(entry)
    _dump_json(os.path.join(report_dir, "summary.json"), {"groups": summary})
    with open(os.path.join(report_dir, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["learner", "strategy", "n_seeds", *REPORT_METRICS, "forecast_mae"]
        writer.writerow(header)
        for entry in summary:
            writer.writerow([entry[h] if entry[h] is not None else "" for h in header])

    def fmt(v):
        return "   --" if v is None else f"{v:8.4f}"

    print(f"{'learner':8} {'strategy':9} {'TR':>8} {'SD':>8} {'Sharpe':>8} {'p':>8} "
          f"{'RR':>8} {'RR_SD':>8} {'IR':>8} {'MAE':>8}")
    for entry in summary:
        print(
            f"{entry['learner']:8} {entry['strategy']:9} "
            f"{fmt(entry['tr'])} {fmt(entry['sd'])} {fmt(entry['sharpe'])} {fmt(entry['sharpe_p'])} "
            f"{fmt(entry['rr'])} {fmt(entry['rr_sd'])} {fmt(entry['info_ratio'])} {fmt(entry['forecast_mae'])}"
        )
    return {"groups": summary}


def cmd_inspect_memory(path: str) -> None:
    with open(path, encoding="utf-8") as fh:
        columns = json.load(fh)
    print(f"{len(columns)} memory column(s)")
    for col in columns:
        repr_obj = col["repr"]
        if repr_obj["variant"] == "raw_rows":
            shape = f"{len(repr_obj['rows'])}x{len(repr_obj['rows'][0]) if repr_obj['rows'] else 0}"
            repr_desc = f"raw rows {shape}"
        else:
            ae = repr_obj["ae"]
            repr_desc = f"autoencoder hidden={ae['hidden_width']} sparsity={ae['sparsity_weight']}"
        params = col["params"]
        n_values = len(params["values"])
        print(
            f"  {col['id']}: created_at={col['created_at']} trained_at={params['training_time_id']} "
            f"kind={params['kind']} params={n_values} repr={repr_desc}"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="claug", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override: run this single seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--strategy", choices=STRATEGY_NAMES, default=None,
                       help="override: run this single similarity strategy")
        p.add_argument("--learner", choices=tuple(LEARNER_ALIASES), default=None,
                       help="override: run this single learner kind")
        p.add_argument("--disable-gate", action="store_true", help="force the remember-gate off")

    gen = sub.add_parser("generate", help="write synthetic panel/target CSVs")
    add_common(gen)
    run = sub.add_parser("run", help="run all (learner x strategy x seed) cells plus baselines")
    add_common(run)
    run.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    rep = sub.add_parser("report", help="aggregate a finished run directory")
    rep.add_argument("run_dir", help="directory created by `claug run`")
    ins = sub.add_parser("inspect-memory", help="summarize a memory snapshot JSON")
    ins.add_argument("snapshot", help="memory.json produced by a run cell")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("CLAUG_LOG_LEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            config = load_config(args.config, vars(args))
            cmd_generate(config)
        elif args.command == "run":
            config = load_config(args.config, vars(args))
            cmd_run(config, workers=args.workers)
        elif args.command == "report":
            cmd_report(args.run_dir)
        elif args.command == "inspect-memory":
            cmd_inspect_memory(args.snapshot)
        return 0
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
