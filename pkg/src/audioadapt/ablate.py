"""Ablation harness: declared grids over config axes, run across seeds.

Each axis mirrors one results table or figure: pseudo-label source/type,
absent-set size r, multi-label threshold gamma, elbow vs fixed cluster
count, clustering feature modality, class-token source, transformer depths,
component progression, baselines/fusion, noise-ratio grid, and the
single-vs-dual visual modality comparison.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .pipeline import ExperimentConfig, run_baseline, run_experiment


class AblateError(ValueError):
    pass


def _set_loss(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, loss=replace(cfg.loss, **kw))


def _set_model(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, **kw))


_COMPONENT_LEGS = {
    "visual_only": dict(use_attention=False, use_absent=False, use_balanced=False, run_stage2=False),
    "attention": dict(use_attention=True, use_absent=False, use_balanced=False, run_stage2=False),
    "absent": dict(use_attention=True, use_absent=True, use_balanced=False, run_stage2=False),
    "balanced": dict(use_attention=True, use_absent=True, use_balanced=True, run_stage2=False),
    "vanilla": dict(run_stage2=True, sequence_mode="vanilla"),
    "domain_embed": dict(run_stage2=True, sequence_mode="domain_embed"),
    "audio_token": dict(run_stage2=True, sequence_mode="audio_token"),
}

_PSEUDO_LEGS = {
    "audio_absent": dict(pseudo_source="audio", pseudo_type="absent"),
    "audio_hard": dict(pseudo_source="audio", pseudo_type="hard"),
    "visual_absent": dict(pseudo_source="visual", pseudo_type="absent"),
    "visual_hard": dict(pseudo_source="visual", pseudo_type="hard"),
}

_TOKEN_LEGS = {
    "audio_prediction": dict(token_source="audio_prediction"),
    "audio_feature": dict(token_source="audio_feature", train_audio_stage2=True),
    "audio_feature_frozen": dict(token_source="audio_feature", train_audio_stage2=False),
    "sound_vectors": dict(token_source="sound_vectors"),
}


def _apply(axis: str, value: str, cfg: ExperimentConfig) -> ExperimentConfig | str:
    """Config for one grid cell, or a baseline kind string."""
    if axis == "r":
        return _set_loss(cfg, r=int(value))
    if axis == "gamma":
        return _set_loss(cfg, gamma=float(value))
    if axis == "beta":
        return _set_loss(cfg, beta=float(value))
    if axis == "eta":
        return _set_loss(cfg, eta=float(value))
    if axis == "fixed_k":
        return replace(cfg, cluster_k=None if value == "elbow" else int(value))
    if axis == "cluster_features":
        return replace(cfg, cluster_features=value)
    if axis == "pseudo":
        if value not in _PSEUDO_LEGS:
            raise AblateError(f"unknown pseudo leg {value!r}")
        return replace(cfg, **_PSEUDO_LEGS[value])
    if axis == "token_source":
        if value not in _TOKEN_LEGS:
            raise AblateError(f"unknown token source {value!r}")
        return replace(cfg, sequence_mode="audio_token", **_TOKEN_LEGS[value])
    if axis == "sequence_mode":
        return replace(cfg, sequence_mode=value)
    if axis == "att_depth":
        return _set_model(cfg, att_depth=int(value))
    if axis == "rec_depth":
        return _set_model(cfg, rec_depth=int(value))
    if axis == "components":
        if value not in _COMPONENT_LEGS:
            raise AblateError(f"unknown component leg {value!r}")
        return replace(cfg, **_COMPONENT_LEGS[value])
    if axis == "baseline":
        if value == "full":
            return cfg
        if value in ("visual_only", "audio_only", "late_fusion"):
            return value
        raise AblateError(f"unknown baseline {value!r}")
    if axis == "noise":
        try:
            train_part, test_part = value.split(":")
            return replace(cfg, train_noise=float(train_part), test_noise=float(test_part))
        except ValueError as exc:
            raise AblateError(f"noise values look like train:test, got {value!r}") from exc
    if axis == "modality":
        if value == "dual":
            return replace(cfg, second_visual_modality=True)
        if value == "single":
            return replace(cfg, second_visual_modality=False)
        raise AblateError(f"unknown modality {value!r}")
    raise AblateError(f"unknown ablation axis {axis!r}")


DEFAULT_VALUES = {
    "r": ["1", "2", "3", "4", "5", "6"],
    "gamma": ["0.03", "0.04", "0.05", "0.06", "0.08", "0.1"],
    "beta": ["0.0", "0.9", "0.99", "0.999"],
    "eta": ["0.0", "0.25", "0.5", "1.0"],
    "fixed_k": ["4", "5", "6", "7", "8", "9", "10", "elbow"],
    "cluster_features": ["audio", "visual"],
    "pseudo": list(_PSEUDO_LEGS),
    "token_source": list(_TOKEN_LEGS),
    "sequence_mode": ["vanilla", "domain_embed", "audio_token"],
    "att_depth": ["5", "6", "7", "8", "9", "10", "11", "12"],
    "rec_depth": ["1", "2", "3", "4", "5", "6"],
    "components": list(_COMPONENT_LEGS),
    "baseline": ["visual_only", "audio_only", "late_fusion", "full"],
    "noise": ["0:0", "0.1:0", "0:0.1", "0.1:0.1", "0.25:0.25", "0.5:0", "0.5:0.5"],
    "modality": ["single", "dual"],
}

DEFAULT_SEEDS = (0, 1, 2)


def run_cell(axis: str, value: str, base: ExperimentConfig, seed: int) -> dict[str, float]:
    cell = _apply(axis, value, replace(base, seed=seed))
    if isinstance(cell, str):
        return run_baseline(cell, replace(base, seed=seed))
    return run_experiment(cell).metrics


def primary_metric(metrics: dict[str, float], multilabel: bool) -> tuple[str, float]:
    key = "target_map" if multilabel else "target_top1"
    return key, metrics[key]


def run_grid(axis: str, values: list[str] | None, seeds, base: ExperimentConfig,
             out_path: str | Path) -> list[dict]:
    """Run axis x seeds cells and write one CSV row per cell."""
    if values is None:
        if axis not in DEFAULT_VALUES:
            raise AblateError(f"unknown ablation axis {axis!r}")
        values = DEFAULT_VALUES[axis]
    rows = []
    for value in values:
        for seed in seeds:
            metrics = run_cell(axis, value, base, int(seed))
            key, val = primary_metric(metrics, base.data.multilabel)
            rows.append({"axis": axis, "value": value, "seed": int(seed),
                         "metric": key, "metric_value": repr(float(val))})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "seed", "metric", "metric_value"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Per-value mean and spread across seeds."""
    import statistics

    by_value: dict[str, list[float]] = {}
    meta: dict[str, tuple[str, str]] = {}
    for row in rows:
        by_value.setdefault(row["value"], []).append(float(row["metric_value"]))
        meta[row["value"]] = (row["axis"], row["metric"])
    out = []
    for value, vals in by_value.items():
        axis, metric = meta[value]
        out.append({
            "axis": axis, "value": value, "metric": metric,
            "mean": repr(statistics.fmean(vals)),
            "std": repr(statistics.pstdev(vals) if len(vals) > 1 else 0.0),
            "runs": len(vals),
        })
    return out
