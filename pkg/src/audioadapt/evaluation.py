"""Metrics: top-1 accuracy, mAP, grouped breakdowns, and pseudo-absent TNR."""

from __future__ import annotations

import numpy as np

from .labels import AbsentLabels

FREQUENCY_BIN_NAMES = ("0-1", "2-10", ">10")


class EvalError(ValueError):
    pass


def top1(predictions, labels) -> float:
    """Percentage of argmax matches; ties go to the smaller class index."""
    scores = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y.shape[0]:
        raise EvalError(f"predictions {scores.shape} and labels {y.shape} are misaligned")
    if y.shape[0] == 0:
        raise EvalError("empty evaluation set")
    return float(np.mean(np.argmax(scores, axis=1) == y) * 100.0)


def average_precision(scores, positives) -> float:
    """AP = mean of precision-at-each-positive over the score-descending ranking."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives).astype(bool)
    npos = int(pos.sum())
    if npos == 0:
        raise EvalError("average precision undefined without positives")
    order = np.argsort(-s, kind="stable")
    hits = pos[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1)
    return float((cum[hits] / ranks[hits]).mean())


def mean_ap(scores, labels) -> float:
    """Mean AP over classes with at least one positive, as a percentage."""
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.shape != Y.shape or S.ndim != 2:
        raise EvalError(f"scores {S.shape} and labels {Y.shape} must be matching M x K arrays")
    aps = []
    for k in range(S.shape[1]):
        if Y[:, k].sum() > 0:
            aps.append(average_precision(S[:, k], Y[:, k]))
    if not aps:
        raise EvalError("no class has positives; mAP undefined")
    return float(np.mean(aps) * 100.0)


def frequency_bin(count: int) -> str:
    if count <= 1:
        return FREQUENCY_BIN_NAMES[0]
    if count <= 10:
        return FREQUENCY_BIN_NAMES[1]
    return FREQUENCY_BIN_NAMES[2]


def pair_bins(all_pairs, source_pairs) -> dict:
    """Bin every (class, cluster) pair by its source-domain occurrence count."""
    counts: dict[tuple, int] = {tuple(p): 0 for p in all_pairs}
    for p in source_pairs:
        key = tuple(p)
        if key not in counts:
            raise EvalError(f"source pair {key} outside the declared pair set")
        counts[key] += 1
    return {p: frequency_bin(c) for p, c in counts.items()}


def group_metrics(scores, labels, grouping: str, *, audible=None,
                  sample_pairs=None, bins=None, mode: str = "top1") -> dict:
    """Per-group metric using the same definition as the overall metric.

    silent_audible: top1 groups samples by their true class's audibility;
    mAP groups classes. frequency_bins: top1 over target samples grouped by
    the bin of their true (class, cluster) pair. Empty groups are omitted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    out: dict[str, float] = {}
    if grouping == "silent_audible":
        if audible is None:
            raise EvalError("silent_audible grouping needs per-class audibility")
        audible = np.asarray(audible).astype(bool)
        if mode == "top1":
            y = np.asarray(labels, dtype=np.int64)
            for name, keep in (("audible", audible[y]), ("silent", ~audible[y])):
                if keep.any():
                    out[name] = top1(scores[keep], y[keep])
        elif mode == "map":
            Y = np.asarray(labels)
            for name, cls_mask in (("audible", audible), ("silent", ~audible)):
                cols = np.flatnonzero(cls_mask)
                cols = [k for k in cols if Y[:, k].sum() > 0]
                if cols:
                    out[name] = float(np.mean([average_precision(scores[:, k], Y[:, k])
                                               for k in cols]) * 100.0)
        else:
            raise EvalError(f"unknown metric mode {mode!r}")
        return out
    if grouping == "frequency_bins":
        if sample_pairs is None or bins is None:
            raise EvalError("frequency_bins grouping needs sample pairs and a bin table")
        y = np.asarray(labels, dtype=np.int64)
        names = [bins[tuple(p)] for p in sample_pairs]
        for name in FREQUENCY_BIN_NAMES:
            keep = np.array([b == name for b in names])
            if keep.any():
                out[name] = top1(scores[keep], y[keep])
        return out
    raise EvalError(f"unknown grouping {grouping!r}")


def tnr_absent(absent: AbsentLabels, true_labels) -> float:
    """Percentage of absent-markings naming a class that is truly absent."""
    if absent.mode == "single":
        q_sets = absent.q_sets
        ys = [int(v) for v in true_labels]
        if q_sets is None or len(q_sets) != len(ys):
            raise EvalError("absent sets and labels are misaligned")
        total = sum(len(q) for q in q_sets)
        if total == 0:
            raise EvalError("no absent markings")
        wrong = sum(1 for q, y in zip(q_sets, ys) if y in q)
        return float((1.0 - wrong / total) * 100.0)
    mask = absent.mask
    truth = np.asarray(true_labels)
    if mask is None or truth.shape != mask.shape:
        raise EvalError("absent mask and labels are misaligned")
    total = int(mask.sum())
    if total == 0:
        raise EvalError("no absent markings")
    wrong = int(np.logical_and(mask > 0, truth > 0).sum())
    return float((1.0 - wrong / total) * 100.0)
