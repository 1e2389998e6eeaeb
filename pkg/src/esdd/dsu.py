"""Distribution-uncertainty (DSU) augmentation of instance feature statistics.

Each instance's temporal mean and standard deviation are treated as
Gaussian random variables whose spread is estimated from the batch.  A
perturbed pair is sampled and the instance is re-normalised onto it, which
shifts global channel statistics while leaving the normalised content alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class DsuConfig:
    p: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"DSU probability must lie in [0, 1], got {self.p}")
        if self.eps <= 0:
            raise ValueError("DSU eps must be positive")


@dataclass
class DsuStats:
    mu: np.ndarray  # (B, C)
    sigma: np.ndarray  # (B, C)
    Sigma_mu: np.ndarray  # (C,)
    Sigma_sigma: np.ndarray  # (C,)


@dataclass
class DsuResult:
    output: Tensor
    applied: bool
    stats: DsuStats | None = None
    mu_tilde: np.ndarray | None = None
    sigma_tilde: np.ndarray | None = None


def instance_stats(x, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Per-instance mean and eps-stabilised population std over time.

    ``x`` is (B, T, C); both outputs are (B, C).
    """
    x = tn.as_tensor(x)
    if x.ndim != 3:
        raise tn.ShapeError(f"instance_stats expects B x T x C, got {x.shape}")
    return tn.mean(x, axis=1), tn.std(x, axis=1, eps=eps)


def dsu_perturb_detailed(
    x,
    cfg: DsuConfig,
    rng: np.random.Generator | None,
    mode: str = "train",
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> DsuResult:
    """Like :func:`dsu_perturb` but also returns the sampled statistics.

    ``noise=(eps_mu, eps_sigma)`` replaces the Gaussian draws (both B x C);
    the Bernoulli gate is still drawn from ``rng`` unless ``p`` is 0 or 1.
    """
    x = tn.as_tensor(x)
    if x.ndim != 3:
        raise tn.ShapeError(f"dsu_perturb expects B x T x C, got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or cfg.p == 0.0:
        return DsuResult(x, applied=False)
    if cfg.p < 1.0 and rng.random() >= cfg.p:
        return DsuResult(x, applied=False)
    B, T, C = x.shape
    if B == 1:
        return DsuResult(x, applied=False)

    mu, sigma = instance_stats(x, cfg.eps)
    # Uncertainty scales are batch statistics used as constant noise levels.
    Sigma_mu = mu.data.std(axis=0)
    Sigma_sigma = sigma.data.std(axis=0)
    if noise is None:
        eps_mu = rng.standard_normal((B, C))
        eps_sigma = rng.standard_normal((B, C))
    else:
        eps_mu, eps_sigma = (np.asarray(n, dtype=np.float64) for n in noise)
    dtype = x.dtype
    mu_shift = (eps_mu * Sigma_mu).astype(dtype)
    sigma_shift = (eps_sigma * Sigma_sigma).astype(dtype)
    mu_tilde = mu + mu_shift
    sigma_tilde = sigma + sigma_shift

    normed = tn.div(tn.sub(x, tn.expand(mu, 1, T)), tn.expand(sigma, 1, T))
    out = tn.add(tn.mul(normed, tn.expand(sigma_tilde, 1, T)), tn.expand(mu_tilde, 1, T))
    stats = DsuStats(mu.data, sigma.data, Sigma_mu, Sigma_sigma)
    return DsuResult(out, True, stats, mu_tilde.data, sigma_tilde.data)


def dsu_perturb(
    x,
    cfg: DsuConfig,
    rng: np.random.Generator | None,
    mode: str = "train",
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Jitter the instance statistics of ``x`` (B x T x C).

    Returns ``x`` itself in eval mode, when the per-batch gate stays closed
    (probability ``1 - p``) or for a single-instance batch.  Gradients flow
    through ``x`` and its instance statistics; the sampled noise and the batch
    uncertainty scales are constants.
    """
    return dsu_perturb_detailed(x, cfg, rng, mode, noise).output
