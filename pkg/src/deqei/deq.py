"""Deep equilibrium reconstruction layer.

The forward pass finds ``xhat = F(xhat; y)`` off the graph, then applies
``F`` once more on the graph so the parameter (and measurement) dependence
of ``F`` at the equilibrium is recorded. In implicit mode a gradient hook on
that output replaces the upstream gradient ``g`` by the solution of the
linear fixed point ``beta = beta dF/dx + g``; the hook's ``beta`` then flows
through ``dF/dtheta`` by ordinary backpropagation, which gives
``g dxhat/dtheta`` exactly. Because every DEQ output carries its own hook, a
loss built from several (possibly chained) DEQ passes needs only one call
to :func:`~deqei.autodiff.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .solvers import BACKWARD_DEFAULTS, FORWARD_DEFAULTS, solve

__all__ = [
    "BackpropMode",
    "DeqModel",
    "DeqStats",
    "BackwardSolveError",
    "apply_operator",
    "equilibrium",
    "deq_forward",
    "backward_fixed_point",
    "multi_pass_gradient",
    "DeqReconstructor",
]

TEMPLATES = ("de-prox", "de-grad")
MODES = ("implicit", "jacobian-free", "unrolled")


class BackwardSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackpropMode:
    tag: str = "implicit"
    unrolled_steps: int = 200

    def __post_init__(self):
        if self.tag not in MODES:
            raise ValueError(f"unknown backprop mode {self.tag!r}")
        if self.tag == "unrolled" and self.unrolled_steps < 1:
            raise ValueError("unrolled_steps must be >= 1")


@dataclass
class DeqModel:
    template: str
    denoiser: object
    eta: float
    operator: object

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    @property
    def params(self):
        return self.denoiser.params


@dataclass
class DeqStats:
    forward_iterations: list = field(default_factory=list)
    backward_iterations: list = field(default_factory=list)
    forward_failures: int = 0
    backward_failures: int = 0

    def reset(self):
        self.forward_iterations.clear()
        self.backward_iterations.clear()
        self.forward_failures = self.backward_failures = 0

    def mean_forward(self):
        return float(np.mean(self.forward_iterations)) if self.forward_iterations else 0.0

    def mean_backward(self):
        return float(np.mean(self.backward_iterations)) if self.backward_iterations else 0.0


def apply_operator(model, x, y, weights=None):
    """One application of the template.

    de-prox: ``D(x - eta * grad)``; de-grad: ``x - eta * grad - eta * (x - D(x))``,
    where ``grad = 2 A^T (Ax - y)`` is the gradient of ``||Ax - y||^2``.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    A = model.operator
    step = A.gradient_mc(x, y) * model.eta
    if model.template == "de-prox":
        return model.denoiser(x - step, weights)
    return x - step - (x - model.denoiser(x, weights)) * model.eta


def backward_fixed_point(g, Fx, x_in, cfg=BACKWARD_DEFAULTS, stats=None, strict=False):
    """Solve ``beta = vjp(F, x, beta) + g`` at the equilibrium.

    ``Fx`` must be ``F`` applied to the detached leaf ``x_in`` so that the
    vector-Jacobian product only sees ``dF/dx``.
    """
    g = np.asarray(g, dtype=np.float64)
    res = solve(lambda b: ad.vjp(Fx, x_in, b) + g, g, cfg)
    if stats is not None:
        stats.backward_iterations.append(res.iterations)
        if not res.converged:
            stats.backward_failures += 1
    if strict and not res.converged:
        raise BackwardSolveError(f"backward fixed point did not converge "
                                 f"(residual {res.residual:.2e} after {res.iterations} iterations)")
    return res.point


def equilibrium(F, x0, mode=BackpropMode(), fwd_cfg=FORWARD_DEFAULTS, bwd_cfg=BACKWARD_DEFAULTS,
                stats=None, strict=False, F_frozen=None):
    """Generic fixed-point layer ``xhat = F(xhat)``.

    ``F`` maps a Tensor to a Tensor and may close over parameters. ``x0`` is
    the initial iterate (a Tensor, possibly on the graph for unrolled mode).
    ``F_frozen`` is an optional equivalent of ``F`` with every parameter
    detached; it keeps the backward sub-graph small.
    """
    if F_frozen is None:
        F_frozen = F
    if not isinstance(x0, Tensor):
        x0 = Tensor(x0)
    if mode.tag == "unrolled":
        x = x0
        for _ in range(mode.unrolled_steps):
            x = F(x)
        return x

    with no_grad():
        res = solve(lambda x: F_frozen(Tensor(x)).data, x0.data, fwd_cfg)
    if stats is not None:
        stats.forward_iterations.append(res.iterations)
        if not res.converged:
            stats.forward_failures += 1
    if strict and not res.converged:
        raise BackwardSolveError(f"forward fixed point did not converge (residual {res.residual:.2e})")

    xhat = F(Tensor(res.point))
    if mode.tag == "implicit" and xhat.requires_grad:
        x_in = Tensor(xhat.data.copy(), requires_grad=True)
        Fx = F_frozen(x_in)
        xhat.register_hook(lambda g: backward_fixed_point(g, Fx, x_in, bwd_cfg, stats, strict))
    return xhat


def deq_forward(model, y, fwd_cfg=FORWARD_DEFAULTS, mode=BackpropMode(), bwd_cfg=BACKWARD_DEFAULTS,
                stats=None, strict=False):
    """Equilibrium reconstruction from measurements ``y`` (ndarray or Tensor, batched).

    The initial iterate is the pseudoinverse ``A^+ y``.
    """
    y_t = y if isinstance(y, Tensor) else Tensor(y)
    weights = model.denoiser.effective_weights()
    w_const = {i: Tensor(w.data) for i, w in weights.items()}
    y_const = Tensor(y_t.data)
    if mode.tag == "unrolled":
        x0 = model.operator.pseudoinverse(y_t)
    else:
        x0 = Tensor(model.operator.pseudoinverse(y_const.data))
    return equilibrium(lambda x: apply_operator(model, x, y_t, weights), x0, mode, fwd_cfg, bwd_cfg,
                       stats, strict, F_frozen=lambda x: apply_operator(model, x, y_const, w_const))


def multi_pass_gradient(loss, params):
    """Parameter gradients of a loss containing any number of DEQ outputs."""
    return ad.backward(loss, params)


class DeqReconstructor:
    """Callable ``y -> xhat`` bundling a model with its solver and backprop settings."""

    kind = "deq"

    def __init__(self, model, mode=BackpropMode(), fwd_cfg=FORWARD_DEFAULTS, bwd_cfg=BACKWARD_DEFAULTS,
                 strict=False):
        self.model = model
        self.mode = mode
        self.fwd_cfg = fwd_cfg
        self.bwd_cfg = bwd_cfg
        self.strict = strict
        self.stats = DeqStats()

    @property
    def params(self):
        return self.model.params

    @property
    def operator(self):
        return self.model.operator

    def __call__(self, y):
        return deq_forward(self.model, y, self.fwd_cfg, self.mode, self.bwd_cfg, self.stats, self.strict)

    def fixed_point_map(self, x, y):
        """Single application of ``F(x; y)`` with the current weights."""
        return apply_operator(self.model, x, y)

    def after_step(self):
        self.model.denoiser.refresh_spectral_state()
