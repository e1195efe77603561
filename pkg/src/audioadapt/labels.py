"""Pseudo-label generation for the unlabeled target domain.

Two flavors: pseudo-absent labels (activity classes asserted NOT to occur,
from the lowest audio/visual probabilities) and hard pseudo-labels (argmax
or thresholded). Also computes source-domain class priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class LabelError(ValueError):
    pass


@dataclass
class AbsentLabels:
    """Per-video absent sets (single-label) or an M x K absent mask (multi-label)."""

    mode: str                      # "single" | "multi"
    provenance: str                # "audio" | "visual"
    q_sets: list[list[int]] | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise LabelError(f"unknown absent-label mode {self.mode!r}")
        if self.provenance not in ("audio", "visual"):
            raise LabelError(f"unknown provenance {self.provenance!r}")


def absent_set_single(p_a: np.ndarray, r: int) -> list[int]:
    """Indices of the r smallest probabilities, ties broken by smaller class index."""
    p_a = np.asarray(p_a, dtype=np.float64)
    K = p_a.shape[-1]
    if p_a.ndim != 1:
        raise LabelError(f"expected a probability vector, got shape {p_a.shape}")
    if not 1 <= r < K:
        raise LabelError(f"r must satisfy 1 <= r < K={K}, got {r}")
    if np.any(np.isnan(p_a)):
        raise LabelError("probabilities contain NaN")
    order = np.argsort(p_a, kind="stable")
    return sorted(int(i) for i in order[:r])


def absent_mask_multi(P_a: np.ndarray, alpha: np.ndarray, gamma: float) -> np.ndarray:
    """Per-class absent mask: exactly floor((1-alpha_k)*gamma*M) lowest-probability videos.

    Ties broken by smaller video index. Returns an int8 array of shape (M, K).
    """
    P_a = np.asarray(P_a, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if P_a.ndim != 2:
        raise LabelError(f"expected an M x K probability matrix, got shape {P_a.shape}")
    M, K = P_a.shape
    if alpha.shape != (K,):
        raise LabelError(f"alpha must have length K={K}, got shape {alpha.shape}")
    if not 0.0 < gamma <= 1.0:
        raise LabelError(f"gamma must be in (0,1], got {gamma}")
    if np.any((alpha < 0) | (alpha > 1)):
        raise LabelError("alpha entries must be in [0,1]")
    mask = np.zeros((M, K), dtype=np.int8)
    for k in range(K):
        c_k = int(math.floor((1.0 - alpha[k]) * gamma * M))
        if c_k == 0:
            continue
        order = np.argsort(P_a[:, k], kind="stable")
        mask[order[:c_k], k] = 1
    return mask


def hard_pseudo(p: np.ndarray, mode: str, threshold: float = 0.5):
    """Hard pseudo-label: argmax (single) or thresholded binary vector (multi).

    Accepts one probability vector or a batch matrix; ties go to the smaller index.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.all(np.isnan(p)):
        raise LabelError("all-NaN probabilities")
    if mode == "single":
        return np.argmax(p, axis=-1).astype(np.int64) if p.ndim > 1 else int(np.argmax(p))
    if mode == "multi":
        if not 0.0 < threshold < 1.0:
            raise LabelError(f"threshold must be in (0,1), got {threshold}")
        return (p >= threshold).astype(np.int8)
    raise LabelError(f"unknown pseudo-label mode {mode!r}")


def class_prior(source_labels, K: int) -> np.ndarray:
    """alpha_k = fraction of source videos containing class k."""
    labels = list(source_labels)
    if len(labels) == 0:
        raise LabelError("empty source label set")
    counts = np.zeros(K, dtype=np.float64)
    for label in labels:
        if np.ndim(label) == 0:
            y = int(label)
            if not 0 <= y < K:
                raise LabelError(f"label {y} out of range [0,{K})")
            counts[y] += 1
        else:
            vec = np.asarray(label)
            if vec.shape != (K,):
                raise LabelError(f"multi-label vector must have length K={K}")
            counts += (vec > 0)
    return counts / len(labels)
