"""Training objectives.

All losses operate on probability inputs (softmax or per-class sigmoid
outputs), accept numpy arrays or torch tensors, and return torch scalars so
gradients flow when the inputs require grad. Probabilities are clamped at
1e-12 inside every log for numerical safety.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-12

SOFTMAX_CE = "softmax_ce"
SIGMOID_CE = "sigmoid_ce"


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    base: str = SOFTMAX_CE
    beta: float = 0.999
    eta: float = 0.5
    r: int = 3
    gamma: float = 0.05

    def __post_init__(self):
        if self.base not in (SOFTMAX_CE, SIGMOID_CE):
            raise LossError(f"unknown base loss {self.base!r}")
        if not 0.0 <= self.beta < 1.0:
            raise LossError(f"beta must be in [0,1), got {self.beta}")
        if self.eta < 0.0:
            raise LossError(f"eta must be >= 0, got {self.eta}")


def _as_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def per_sample_base(p, y, mode: str = SOFTMAX_CE) -> torch.Tensor:
    """Negative log-likelihood per sample under the stated link. Shape (B,)."""
    p = _as_tensor(p)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    if p.dim() != 2:
        raise LossError(f"expected (K,) or (B, K) probabilities, got shape {tuple(p.shape)}")
    B, K = p.shape
    if mode == SOFTMAX_CE:
        y_t = torch.as_tensor(np.atleast_1d(np.asarray(y, dtype=np.int64)))
        if y_t.shape != (B,):
            raise LossError(f"labels shape {tuple(y_t.shape)} does not match batch {B}")
        if torch.any(y_t < 0) or torch.any(y_t >= K):
            raise LossError(f"label out of range [0,{K})")
        picked = p[torch.arange(B), y_t]
        return -torch.log(torch.clamp(picked, min=EPS))
    if mode == SIGMOID_CE:
        y_t = _as_tensor(y).to(p.dtype)
        if y_t.dim() == 1:
            y_t = y_t.unsqueeze(0)
        if y_t.shape != (B, K):
            raise LossError(f"multi-label targets shape {tuple(y_t.shape)} does not match {(B, K)}")
        pos = -y_t * torch.log(torch.clamp(p, min=EPS))
        neg = -(1.0 - y_t) * torch.log(torch.clamp(1.0 - p, min=EPS))
        return (pos + neg).mean(dim=1)
    raise LossError(f"unknown base loss {mode!r}")


def base_loss(p, y, mode: str = SOFTMAX_CE) -> torch.Tensor:
    """Mean negative log-likelihood over the batch."""
    return per_sample_base(p, y, mode).mean()


def absent_loss(p_v, q) -> torch.Tensor:
    """Sum of -log(1 - p_q) over the absent set q. Empty set gives 0."""
    p = _as_tensor(p_v)
    if p.dim() != 1:
        raise LossError(f"expected a probability vector, got shape {tuple(p.shape)}")
    K = p.shape[0]
    idx = sorted(int(i) for i in q)
    if len(idx) == 0:
        return torch.zeros((), dtype=p.dtype)
    if idx[0] < 0 or idx[-1] >= K:
        raise LossError(f"absent index out of range [0,{K}): {idx}")
    return -torch.log(torch.clamp(1.0 - p[idx], min=EPS)).sum()


def per_sample_absent(P, mask) -> torch.Tensor:
    """Batched absent loss from a binary (B, K) mask. Shape (B,)."""
    P = _as_tensor(P)
    m = _as_tensor(mask).to(P.dtype)
    if P.shape != m.shape:
        raise LossError(f"probabilities {tuple(P.shape)} and mask {tuple(m.shape)} differ")
    return -(m * torch.log(torch.clamp(1.0 - P, min=EPS))).sum(dim=1)


def cb_weight(n: int, beta: float) -> float:
    """Inverse effective-sample-count weight (1 - beta) / (1 - beta^n)."""
    if n < 1:
        raise LossError(f"count must be >= 1, got {n}")
    if not 0.0 <= beta < 1.0:
        raise LossError(f"beta must be in [0,1), got {beta}")
    if beta == 0.0:
        return 1.0
    return (1.0 - beta) / (1.0 - beta ** n)


def cb_weights(counts, beta: float) -> np.ndarray:
    counts = np.asarray(counts)
    return np.array([cb_weight(int(c), beta) for c in counts.reshape(-1)]).reshape(counts.shape)


def audio_balanced_loss(p_v, y, n_y, n_yj, cfg: LossConfig) -> torch.Tensor:
    """Class- and interaction-cluster-balanced classification loss.

    Weights each sample by cb_weight(n_yj) * cb_weight(n_y) before the base
    loss; counts are per the sample's ground-truth class and its cluster.
    """
    n_y_arr = np.atleast_1d(np.asarray(n_y, dtype=np.int64))
    n_yj_arr = np.atleast_1d(np.asarray(n_yj, dtype=np.int64))
    if n_y_arr.shape != n_yj_arr.shape:
        raise LossError("n_y and n_yj shapes differ")
    if np.any(n_yj_arr < 1) or np.any(n_y_arr < n_yj_arr):
        raise LossError("counts must satisfy n_y >= n_yj >= 1")
    per = per_sample_base(p_v, y, cfg.base)
    w = cb_weights(n_y_arr, cfg.beta) * cb_weights(n_yj_arr, cfg.beta)
    w_t = torch.as_tensor(w, dtype=per.dtype)
    if w_t.shape != per.shape:
        raise LossError(f"counts shape {tuple(w_t.shape)} does not match batch {tuple(per.shape)}")
    return (w_t * per).mean()


def encoder_loss(target_probs, target_absent, source_probs, source_y,
                 source_n_y, source_n_yj, cfg: LossConfig) -> torch.Tensor:
    """Stage-1 objective: batch-mean absent loss on target plus batch-mean
    audio-balanced loss on source. Either batch may be empty."""
    terms = []
    if target_probs is not None and len(target_probs) > 0:
        if isinstance(target_absent, np.ndarray) and target_absent.ndim == 2:
            mask = target_absent
        else:
            P = _as_tensor(target_probs)
            mask = np.zeros(tuple(P.shape), dtype=np.int8)
            for i, q in enumerate(target_absent):
                mask[i, sorted(int(j) for j in q)] = 1
        terms.append(per_sample_absent(target_probs, mask).mean())
    if source_probs is not None and len(source_probs) > 0:
        terms.append(audio_balanced_loss(source_probs, source_y, source_n_y, source_n_yj, cfg))
    if not terms:
        return torch.zeros(())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def recognizer_loss(p_star, h, h_prime, y, cfg: LossConfig) -> torch.Tensor:
    """Stage-2 objective: L(p*, y) + eta * (L(h, y) + L(h', y)).

    h and h' are the sound-vector selection probabilities; passing None for
    both (token-source ablations) or eta = 0 disables the auxiliary terms.
    """
    total = base_loss(p_star, y, cfg.base)
    if cfg.eta > 0.0 and h is not None and h_prime is not None:
        total = total + cfg.eta * (base_loss(h, y, cfg.base) + base_loss(h_prime, y, cfg.base))
    return total
