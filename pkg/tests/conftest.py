import numpy as np
import pytest
import torch

from audioadapt import synth


def central_difference(f, x: torch.Tensor, index, step: float = 1e-5) -> float:
    """Central finite difference of a scalar function along one coordinate."""
    xp = x.detach().clone()
    xm = x.detach().clone()
    xp.view(-1)[index] += step
    xm.view(-1)[index] -= step
    return (float(f(xp)) - float(f(xm))) / (2.0 * step)


def assert_grad_matches(f, x: torch.Tensor, indices=None, rel_tol: float = 1e-4,
                        abs_floor: float = 1e-7, step: float = 1e-5) -> None:
    """Compare autograd gradients of f(x) against central differences.

    Relative error must stay within rel_tol wherever the gradient is not
    essentially zero (abs_floor guards the near-zero coordinates).
    """
    x = x.detach().double().requires_grad_(True)
    loss = f(x)
    loss.backward()
    grad = x.grad.view(-1)
    if indices is None:
        indices = range(x.numel())
    for i in indices:
        fd = central_difference(f, x, i, step)
        a = float(grad[i])
        err = abs(a - fd)
        denom = max(abs(a), abs(fd))
        assert err <= abs_floor or err / denom <= rel_tol, \
            f"coordinate {i}: autograd {a} vs finite difference {fd} (err {err})"


def random_simplex(rng: np.random.Generator, k: int, margin: float = 0.02) -> np.ndarray:
    """Probability vector with entries bounded away from 0 and 1."""
    p = rng.dirichlet(np.ones(k))
    p = (1.0 - k * margin) * p + margin
    return p / p.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_spec(**kw) -> synth.DomainSpec:
    base = dict(
        K=4,
        audible=(True, True, False, True),
        clusters_per_class=(2, 2, 2, 2),
        source_class_prior=(0.4, 0.3, 0.2, 0.1),
        target_class_prior=(0.1, 0.2, 0.3, 0.4),
        source_cluster_freq=((0.7, 0.3),) * 4,
        target_cluster_freq=((0.4, 0.6),) * 4,
        C_v=8, C_a=8, n=2,
        sigma_within=1.0,
        visual_shift=2.0,
        audio_jitter=0.05,
        N=40, M=40,
        multilabel=False,
        seed=7,
    )
    base.update(kw)
    return synth.DomainSpec(**base)
