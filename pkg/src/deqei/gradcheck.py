"""Gradient verification on small random DEQs.

Implicit-differentiation gradients are compared with central finite
differences and with backpropagation through many unrolled applications of
the same operator. The Jacobian-free direction is reported against the true
gradient (cosine) but never counts as a failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, flat_grad, numeric_grad
from .deq import BackpropMode, DeqModel, DeqReconstructor, equilibrium
from .linops import (DenseOp, InpaintingOp, MaskedFourierOp, TomographyOp, gaussian_line_mask,
                     random_inpainting_mask)
from .losses import LossConfig, ei_objective, sup_loss
from .models import Denoiser, DenoiserArch
from .rng import stream
from .solvers import SolverConfig

__all__ = [
    "TIGHT_FORWARD",
    "TIGHT_BACKWARD",
    "ToyProblem",
    "toy_problem",
    "toy_gradients",
    "InstanceReport",
    "check_instance",
    "scalar_suite",
    "max_rel",
]

TIGHT_FORWARD = SolverConfig(tol=1e-13, max_iter=1000)
TIGHT_BACKWARD = SolverConfig(tol=1e-12, max_iter=1000)
OPERATOR_KINDS = ("inpainting", "dense", "tomography", "masked-fourier")


def max_rel(a, b):
    """``max|a - b| / max|b|``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a - b)))


@dataclass
class ToyProblem:
    seed: int
    template: str
    loss: str
    model: DeqModel
    x: np.ndarray
    y: np.ndarray

    @property
    def operator_kind(self):
        return self.model.operator.kind


def _toy_operator(kind, size, rng, seed):
    if kind == "inpainting":
        return InpaintingOp(random_inpainting_mask((1, size, size), 0.6, seed))
    if kind == "dense":
        m = (size * size * 5) // 8
        M = rng.standard_normal((m, size * size))
        return DenseOp(M / np.linalg.norm(M, 2), (1, size, size))
    if kind == "tomography":
        return TomographyOp(size, np.arange(5) * 36.0)
    return MaskedFourierOp(gaussian_line_mask(size, 2.0, seed=seed))


def toy_problem(seed, template, loss="supervised", size=8, hidden=3, batch=2):
    """A random contractive DEQ: 2-layer spectrally normalized CNN, operator kind cycled by seed."""
    rng = stream(seed, "toy")
    kind = OPERATOR_KINDS[seed % len(OPERATOR_KINDS)]
    A = _toy_operator(kind, size, rng, seed)
    channels = A.input_shape[0]
    arch = DenoiserArch(channels=channels, hidden_channels=hidden, depth=2, residual=False, norm_groups=0,
                        sn_target=0.8, zero_init_last=False)
    den = Denoiser(arch, seed=seed)
    for name, p in den.params.items():
        if name.endswith("bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    den.refresh_spectral_state()
    eta = rng.uniform(0.3, 0.9) if template == "de-prox" else rng.uniform(0.2, 0.5)
    x = rng.uniform(0.0, 1.0, (batch,) + A.input_shape)
    if channels == 2:
        x[:, 1] = 0.0
    y = A.apply(x) + 0.01 * rng.standard_normal((batch,) + A.output_shape)
    return ToyProblem(seed, template, loss, DeqModel(template, den, eta, A), x, y)


def _loss(prob, mode, fwd=TIGHT_FORWARD, bwd=TIGHT_BACKWARD, unrolled_steps=200):
    f = DeqReconstructor(prob.model, BackpropMode(mode, unrolled_steps), fwd, bwd, strict=True)
    if prob.loss == "supervised":
        return sup_loss(f(prob.y), prob.x)
    return ei_objective(prob.y, f, prob.model.operator,
                        LossConfig("equivariant-imaging", 1.0, "all", seed=prob.seed))


def toy_gradients(prob, mode, unrolled_steps=200):
    params = prob.model.params
    return flat_grad(backward(_loss(prob, mode, unrolled_steps=unrolled_steps), params), list(params))


def finite_difference(prob, step=1e-7):
    params = prob.model.params
    theta0 = params.flatten()

    def value(v):
        params.load_flat(v)
        return float(_loss(prob, "implicit").data)

    try:
        return numeric_grad(value, theta0, step)
    finally:
        params.load_flat(theta0)


@dataclass
class InstanceReport:
    name: str
    fd_error: float
    unrolled_error: float
    jfb_cosine: float
    failing_blocks: list = field(default_factory=list)

    def passed(self, tol):
        return self.fd_error <= tol and self.unrolled_error <= tol


def _blocks(params, a, b, tol):
    scale = np.max(np.abs(b))
    bad, i = [], 0
    for name, t in params.items():
        err = np.max(np.abs(a[i:i + t.size] - b[i:i + t.size])) / scale if scale > 0 else 0.0
        if err > tol:
            bad.append(name)
        i += t.size
    return bad


def check_instance(seed, template, loss, tol=1e-4, step=1e-7, size=8, hidden=3, unrolled_steps=200):
    prob = toy_problem(seed, template, loss, size, hidden)
    g_id = toy_gradients(prob, "implicit")
    g_un = toy_gradients(prob, "unrolled", unrolled_steps)
    g_jfb = toy_gradients(prob, "jacobian-free")
    g_fd = finite_difference(prob, step)
    cos = float(g_jfb @ g_id / (np.linalg.norm(g_jfb) * np.linalg.norm(g_id)))
    name = f"{template}/{loss}/{prob.operator_kind}/seed{seed}"
    bad = sorted(set(_blocks(prob.model.params, g_id, g_fd, tol)) | set(_blocks(prob.model.params, g_id, g_un, tol)))
    return InstanceReport(name, max_rel(g_id, g_fd), max_rel(g_id, g_un), cos, bad)


def scalar_suite():
    """``F(x) = theta x + c`` at ``theta = 0.5, c = 1``: fixed point 2, gradient 4 (Jacobian-free: 2).

    Returns ``(name, value, expected)`` triples.
    """
    out = []
    for mode, expected in (("implicit", 4.0), ("unrolled", 4.0), ("jacobian-free", 2.0)):
        theta = Tensor(np.array(0.5), requires_grad=True, name="theta")
        c = Tensor(np.array(1.0), requires_grad=True, name="c")
        xhat = equilibrium(lambda x: theta * x + c, Tensor(np.array(0.0)), BackpropMode(mode),
                           TIGHT_FORWARD, TIGHT_BACKWARD, strict=True)
        g = backward(xhat, {"theta": theta, "c": c})
        out.append((f"scalar/{mode}/fixed-point", float(xhat.data), 2.0))
        out.append((f"scalar/{mode}/d-theta", float(g["theta"]), expected))
    return out
