"""Training objectives: supervised error, measurement consistency and the equivariant-imaging loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linops import RotationGroup, rotate
from .rng import stream

__all__ = [
    "LossConfig",
    "sup_loss",
    "mc_loss",
    "equ_loss",
    "ei_objective",
    "sample_group",
]


@dataclass(frozen=True)
class LossConfig:
    mode: str = "supervised"  # or "equivariant-imaging"
    alpha: float = 1.0
    group_sampling: str = "sample-k"  # or "all"
    k: int = 1
    group_step: float = 90.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("supervised", "equivariant-imaging"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.group_sampling not in ("all", "sample-k"):
            raise ValueError(f"unknown group sampling {self.group_sampling!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def group(self):
        return RotationGroup(self.group_step)


def _same_shape(name, a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def sup_loss(xhat, x):
    """Per-sample mean squared error, summed over the batch.

    For a single (unbatched) image this is the plain pixel mean.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    _same_shape("sup_loss", xhat, x)
    per_sample = int(np.prod(x.shape[1:])) if x.ndim == 4 else x.size
    return ad.sq_norm(xhat - x) * (1.0 / per_sample)


def mc_loss(xhat, y, A):
    """``||A xhat - y||^2`` summed over everything."""
    r = A.apply(xhat) - y
    return ad.sq_norm(r)


def equ_loss(f, xhat, g, A):
    """``||T_g xhat - f(A T_g xhat)||^2`` with both passes on the graph.

    ``g`` may be one group element or a list with one element per batch entry.
    """
    x2 = rotate(xhat, g)
    x3 = f(A.apply(x2))
    return ad.sq_norm(x2 - x3)


def sample_group(cfg, batch, counter=0):
    """Group elements for one step.

    Returns a list of rounds; a round is a single element (mode ``all``) or a
    list with one independently drawn element per sample.
    """
    group = cfg.group
    if cfg.group_sampling == "all":
        return list(group)
    rng = stream(cfg.seed, "group-sampling", counter)
    idx = rng.integers(0, len(group), size=(cfg.k, batch))
    return [[group[i] for i in row] for row in idx]


def ei_objective(y, f, A, cfg, counter=0, xhat=None):
    """Measurement consistency plus ``alpha`` times the sampled equivariance terms.

    Consumes measurements only. ``xhat = f(y)`` may be passed in when the
    caller already has it on the graph.
    """
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y.ndim == 0 or y.shape[0] == 0:
        raise ValueError("ei_objective needs a non-empty batch")
    if xhat is None:
        xhat = f(y)
    loss = mc_loss(xhat, y, A)
    if cfg.alpha == 0:
        return loss
    for elems in sample_group(cfg, y.shape[0], counter):
        loss = loss + equ_loss(f, xhat, elems, A) * cfg.alpha
    return loss
