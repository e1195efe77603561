"""Command-line harness: dataset generation, training, evaluation, ablation
sweeps, and report aggregation.

Configs are JSON files mirroring ExperimentConfig; any field can be
overridden on the command line with --set dotted.key=value. Output goes
under --out, the AUDIOADAPT_OUT environment variable, or ./runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import synth
from .ablate import AblateError, DEFAULT_SEEDS, run_grid, summarize
from .pipeline import (ExperimentConfig, compute_metrics, default_config,
                       load_run_models, prepare_datasets, run_experiment,
                       save_checkpoints)


class CliError(ValueError):
    pass


def _out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("AUDIOADAPT_OUT", "runs"))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(d: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = d
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise CliError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise CliError(f"unknown config key {dotted!r}")
    node[leaf] = _parse_value(raw)


def load_config(path: str | None, overrides: list[str], seed: int | None) -> ExperimentConfig:
    if path is None:
        d = default_config().to_dict()
    else:
        p = Path(path)
        if not p.exists():
            raise CliError(f"missing config file {path!r}")
        d = json.loads(p.read_text())
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_override(d, key, raw)
    if seed is not None:
        d["seed"] = seed
    try:
        return ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _fmt(value: float) -> str:
    return repr(float(value))


def write_metrics_files(run_dir: Path, config: ExperimentConfig, metrics: dict,
                        name: str = "metrics") -> None:
    rows = sorted(metrics.items())
    with open(run_dir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in rows:
            writer.writerow([key, _fmt(value)])
    with open(run_dir / f"{name}.jsonl", "w") as fh:
        for key, value in rows:
            fh.write(json.dumps({
                "run_id": config.run_id(), "config_hash": config.config_hash(),
                "seed": config.seed, "metric": key, "value": value}) + "\n")


def cmd_gen(args) -> int:
    config = load_config(args.config, args.set or [], args.seed)
    ds, _, _ = prepare_datasets(config)
    out = Path(args.out) if args.out else _out_root(None) / f"dataset-{config.run_id()}"
    synth.save_dataset(ds, out)
    digest = synth.dataset_digest(ds)
    print(f"dataset written to {out}")
    print(f"digest {digest}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or [], args.seed)
    run_dir = _out_root(args.out) / config.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = run_experiment(config)
    wall = time.perf_counter() - t0
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    write_metrics_files(run_dir, config, result.metrics)
    artifacts = save_checkpoints(result, run_dir / "checkpoints")
    record = {
        "run_id": config.run_id(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "timings": {**result.timings, "total": wall},
        "artifacts": artifacts,
        "metrics_file": str(run_dir / "metrics.csv"),
    }
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    for key, value in sorted(result.metrics.items()):
        print(f"{key} = {value:.3f}")
    print(f"run {config.run_id()} written to {run_dir}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise CliError(f"missing config file {str(cfg_path)!r}")
    config = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
    if config.second_visual_modality:
        raise CliError("re-evaluation of dual-modality runs is not supported")
    _, ds_train, ds_eval = prepare_datasets(config)
    audio_enc, visual_pre, stage1, stage2 = load_run_models(config, run_dir / "checkpoints")
    metrics = compute_metrics(config, audio_enc, visual_pre, stage1, stage2, ds_train, ds_eval)
    write_metrics_files(run_dir, config, metrics, name="eval_metrics")
    stored_path = run_dir / "metrics.csv"
    status = 0
    if stored_path.exists():
        stored = {}
        with open(stored_path, newline="") as fh:
            for row in csv.DictReader(fh):
                stored[row["metric"]] = row["value"]
        for key in sorted(metrics):
            fresh = _fmt(metrics[key])
            old = stored.get(key)
            tag = "MATCH" if fresh == old else "MISMATCH"
            if tag == "MISMATCH":
                status = 1
            print(f"{tag} {key}: eval={fresh} train={old}")
    else:
        for key, value in sorted(metrics.items()):
            print(f"{key} = {value:.3f}")
    return status


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set or [], args.seed)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    values = args.values.split(",") if args.values else None
    out_dir = _out_root(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"table_{args.axis}.csv"
    rows = run_grid(args.axis, values, seeds, config, table_path)
    summary_path = out_dir / f"summary_{args.axis}.csv"
    summary = summarize(rows)
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "metric", "mean", "std", "runs"])
        writer.writeheader()
        writer.writerows(summary)
    for row in summary:
        print(f"{row['axis']}={row['value']}: mean {float(row['mean']):.3f} "
              f"std {float(row['std']):.3f} over {row['runs']} runs")
    print(f"table written to {table_path}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for item in args.inputs:
        path = Path(item)
        if path.is_dir():
            metrics_path = path / "metrics.csv"
            if not metrics_path.exists():
                raise CliError(f"no metrics.csv under {item!r}")
            run_id = path.name
            with open(metrics_path, newline="") as fh:
                for row in csv.DictReader(fh):
                    rows.append({"source": run_id, "axis": "", "value": "",
                                 "metric": row["metric"], "mean": row["value"],
                                 "std": "0.0", "runs": 1})
        elif path.suffix == ".csv":
            with open(path, newline="") as fh:
                table_rows = list(csv.DictReader(fh))
            for row in summarize(table_rows):
                row["source"] = path.stem
                rows.append(row)
        else:
            raise CliError(f"report inputs must be run dirs or ablation CSVs, got {item!r}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["source", "axis", "value", "metric", "mean", "std", "runs"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"report written to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audioadapt",
                                     description="audio-adaptive domain adaptation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults to the built-in config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. loss.r=4 or data.N=200")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (default $AUDIOADAPT_OUT or ./runs)")

    p_gen = sub.add_parser("gen", help="generate and save a dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train the configured model end to end")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="recompute metrics for a finished run")
    p_eval.add_argument("--run", required=True, help="run directory written by train")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run a declared grid over one axis")
    common(p_ablate)
    p_ablate.add_argument("--axis", required=True)
    p_ablate.add_argument("--values", help="comma-separated cell values (axis default otherwise)")
    p_ablate.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="aggregate metrics into plot-ready CSV")
    p_report.add_argument("inputs", nargs="+", help="run directories or ablation CSVs")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, AblateError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
