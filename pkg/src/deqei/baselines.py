"""Non-equilibrium reconstructors: weight-tied unrolling, pseudoinverse refinement, PnP-PGM and RED."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .deq import apply_operator
from .linops import operator_norm

__all__ = [
    "UnrolledModel",
    "IterativeConfig",
    "IterationDivergence",
    "unrolled_forward",
    "refine_forward",
    "pnp_pgm",
    "red_solve",
    "UnrolledReconstructor",
    "RefineReconstructor",
    "IterativeReconstructor",
    "default_red_eta",
]

UNROLL_PRESETS = (1, 3, 5, 7)
_TEMPLATE = {"pgm": "de-prox", "red": "de-grad"}


class IterationDivergence(RuntimeError):
    def __init__(self, iteration, norm):
        super().__init__(f"iterate norm {norm:.3g} exceeded 1e6 at iteration {iteration}")
        self.iteration = iteration


@dataclass
class UnrolledModel:
    template: str
    steps: int
    denoiser: object
    eta: float
    operator: object

    def __post_init__(self):
        if self.template not in _TEMPLATE:
            raise ValueError(f"unknown unrolled template {self.template!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def params(self):
        return self.denoiser.params


@dataclass
class IterativeConfig:
    iters: int = 50
    eta: float | None = None
    red_lambda: float = 1.0
    stop_tol: float | None = None

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be non-negative")


def unrolled_forward(m, y):
    """``K`` weight-tied applications of the template starting from ``A^+ y``, all on the graph."""
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    step_model = _StepModel(_TEMPLATE[m.template], m.denoiser, m.eta, m.operator)
    weights = m.denoiser.effective_weights()
    x = m.operator.pseudoinverse(y_t)
    for _ in range(m.steps):
        x = apply_operator(step_model, x, y_t, weights)
    return x


@dataclass
class _StepModel:
    template: str
    denoiser: object
    eta: float
    operator: object


def refine_forward(denoiser, A, y):
    """``D(A^+ y)``."""
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    return denoiser(A.pseudoinverse(y_t))


def _as_fn(denoiser):
    if hasattr(denoiser, "frozen"):
        return denoiser.frozen()
    return denoiser


def _check(x, k):
    n = float(np.linalg.norm(x))
    if not np.isfinite(n) or n > 1e6:
        raise IterationDivergence(k, n)


def default_red_eta(A, lam):
    return 1.0 / (2.0 * operator_norm(A) ** 2 + lam)


def pnp_pgm(denoiser, A, y, cfg=IterativeConfig()):
    """``x <- D(x - eta * 2 A^T (A x - y))`` from ``A^+ y`` with a frozen denoiser."""
    D = _as_fn(denoiser)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    eta = cfg.eta if cfg.eta is not None else 1.0 / (2.0 * operator_norm(A) ** 2)
    with no_grad():
        x = A.pseudoinverse(y)
        for k in range(cfg.iters):
            nxt = D(x - eta * A.gradient_mc(x, y))
            _check(nxt, k + 1)
            done = cfg.stop_tol is not None and np.linalg.norm(nxt - x) <= cfg.stop_tol * (np.linalg.norm(x) + 1e-12)
            x = nxt
            if done:
                break
    return x


def red_solve(denoiser, A, y, cfg=IterativeConfig()):
    """``x <- x - eta * (2 A^T (A x - y) + lam (x - D(x)))`` from ``A^+ y``."""
    D = _as_fn(denoiser)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    lam = cfg.red_lambda
    eta = cfg.eta if cfg.eta is not None else default_red_eta(A, lam)
    with no_grad():
        x = A.pseudoinverse(y)
        for k in range(cfg.iters):
            step = A.gradient_mc(x, y)
            if lam != 0:
                step = step + lam * (x - D(x))
            nxt = x - eta * step
            _check(nxt, k + 1)
            done = cfg.stop_tol is not None and np.linalg.norm(nxt - x) <= cfg.stop_tol * (np.linalg.norm(x) + 1e-12)
            x = nxt
            if done:
                break
    return x


class UnrolledReconstructor:
    kind = "unrolled"

    def __init__(self, model):
        self.model = model

    @property
    def params(self):
        return self.model.params

    @property
    def operator(self):
        return self.model.operator

    def __call__(self, y):
        return unrolled_forward(self.model, y)

    def after_step(self):
        self.model.denoiser.refresh_spectral_state()


class RefineReconstructor:
    kind = "refine"

    def __init__(self, denoiser, A):
        self.denoiser = denoiser
        self.A = A

    @property
    def params(self):
        return self.denoiser.params

    @property
    def operator(self):
        return self.A

    def __call__(self, y):
        return refine_forward(self.denoiser, self.A, y)

    def after_step(self):
        self.denoiser.refresh_spectral_state()


class IterativeReconstructor:
    """Inference-only PnP or RED reconstructor with a frozen denoiser."""

    def __init__(self, kind, denoiser, A, cfg=IterativeConfig()):
        if kind not in ("pnp", "red"):
            raise ValueError(f"unknown iterative method {kind!r}")
        self.kind = kind
        self.denoiser = denoiser
        self.A = A
        self.cfg = cfg

    @property
    def params(self):
        return self.denoiser.params

    @property
    def operator(self):
        return self.A

    def __call__(self, y):
        fn = pnp_pgm if self.kind == "pnp" else red_solve
        return Tensor(fn(self.denoiser, self.A, y, self.cfg))
