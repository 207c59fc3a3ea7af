"""Fixed-point solvers for ``x = F(x)``: damped Picard iteration and Anderson acceleration.

Solvers operate on plain numpy arrays of any shape and never record on the
differentiation graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad

__all__ = [
    "SolverConfig",
    "FixedPointResult",
    "SolverDivergence",
    "picard_solve",
    "anderson_solve",
    "solve",
    "FORWARD_DEFAULTS",
    "BACKWARD_DEFAULTS",
]


class SolverDivergence(RuntimeError):
    def __init__(self, iteration, message="non-finite iterate"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class SolverConfig:
    method: str = "anderson"
    tol: float = 1e-5
    max_iter: int = 100
    damping: float = 1.0
    anderson_memory: int = 5
    anderson_reg: float = 1e-10

    def __post_init__(self):
        if self.method not in ("picard", "anderson"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.anderson_memory < 1:
            raise ValueError("anderson_memory must be at least 1")
        if self.anderson_reg < 0:
            raise ValueError("anderson_reg must be non-negative")


FORWARD_DEFAULTS = SolverConfig(tol=1e-5, max_iter=100)
BACKWARD_DEFAULTS = SolverConfig(tol=1e-7, max_iter=200)


@dataclass
class FixedPointResult:
    point: np.ndarray
    residual: float
    iterations: int
    converged: bool
    residual_history: list = field(default_factory=list)
    fallbacks: int = 0


def _rel(r, x):
    return float(np.linalg.norm(r) / (np.linalg.norm(x) + 1e-12))


def _eval(F, x, k):
    fx = np.asarray(F(x), dtype=np.float64)
    if fx.shape != x.shape:
        raise ValueError(f"map changed shape {x.shape} -> {fx.shape}")
    if not np.all(np.isfinite(fx)):
        raise SolverDivergence(k)
    return fx


def picard_solve(F, x0, cfg=FORWARD_DEFAULTS):
    """Damped Picard iteration ``x <- (1 - d) x + d F(x)``.

    ``residual_history`` holds the absolute residual norms ``||F(x_k) - x_k||``.
    The returned point is the last iterate whose residual was measured.
    """
    x = np.array(x0, dtype=np.float64)
    hist = []
    best = (np.inf, x, np.inf)
    with no_grad():
        for k in range(cfg.max_iter + 1):
            fx = _eval(F, x, k)
            r = fx - x
            hist.append(float(np.linalg.norm(r)))
            rel = _rel(r, x)
            if rel <= cfg.tol:
                return FixedPointResult(x, rel, k, True, hist)
            if rel < best[0]:
                best = (rel, x, k)
            if k == cfg.max_iter:
                break
            x = x + cfg.damping * r
    return FixedPointResult(best[1], best[0], cfg.max_iter, False, hist)


def anderson_solve(F, x0, cfg=FORWARD_DEFAULTS):
    """Type-II Anderson acceleration with Tikhonov-regularized mixing.

    Keeps the last ``anderson_memory`` pairs ``(x_i, F(x_i))``, chooses
    weights ``alpha`` minimizing ``||sum_i alpha_i g_i||`` subject to
    ``sum_i alpha_i = 1`` with ``g_i = F(x_i) - x_i``, and moves to
    ``sum_i alpha_i [(1 - d) x_i + d F(x_i)]``. The regularization is scaled
    by the largest diagonal entry of the Gram matrix so it is invariant to the
    residual magnitude.
    """
    x = np.array(x0, dtype=np.float64)
    shape = x.shape
    xs, gs = deque(maxlen=cfg.anderson_memory), deque(maxlen=cfg.anderson_memory)
    hist = []
    fallbacks = 0
    best = (np.inf, x, np.inf)
    d = cfg.damping
    with no_grad():
        for k in range(cfg.max_iter + 1):
            fx = _eval(F, x, k)
            r = fx - x
            hist.append(float(np.linalg.norm(r)))
            rel = _rel(r, x)
            if rel <= cfg.tol:
                return FixedPointResult(x, rel, k, True, hist, fallbacks)
            if rel < best[0]:
                best = (rel, x, k)
            if k == cfg.max_iter:
                break
            xs.append(x.ravel())
            gs.append(r.ravel())
            n = len(gs)
            if n == 1:
                x = x + d * r
                continue
            G = np.stack(gs)
            gram = G @ G.T
            gram[np.diag_indices(n)] += cfg.anderson_reg * max(float(np.max(np.diag(gram))), 1e-300)
            try:
                w = np.linalg.solve(gram, np.ones(n))
                alpha = w / w.sum()
                if not np.all(np.isfinite(alpha)):
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                fallbacks += 1
                x = x + d * r
                continue
            X = np.stack(xs)
            x = (alpha @ (X + d * G)).reshape(shape)
    return FixedPointResult(best[1], best[0], cfg.max_iter, False, hist, fallbacks)


def solve(F, x0, cfg=FORWARD_DEFAULTS):
    if cfg.method == "picard":
        return picard_solve(F, x0, cfg)
    if cfg.method == "anderson":
        return anderson_solve(F, x0, cfg)
    raise ValueError(f"unknown solver method {cfg.method!r}")
