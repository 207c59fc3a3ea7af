"""Learnable denoiser: a small residual CNN with spectral and group normalization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .rng import stream

__all__ = [
    "DenoiserArch",
    "Denoiser",
    "spectral_normalize",
    "lipschitz_estimate",
]


@dataclass(frozen=True)
class DenoiserArch:
    channels: int = 1
    hidden_channels: int = 16
    depth: int = 3
    kernel: int = 3
    slope: float = 0.1
    residual: bool = True
    norm_groups: int = 4  # 0 disables group normalization
    spectral_norm: bool = True
    sn_power_iters: int = 5
    sn_target: float = 1.0
    # "matrix": norm of the kernel viewed as an (out, rest) matrix;
    # "operator": norm of the convolution itself, circular on an sn_grid lattice
    sn_mode: str = "matrix"
    sn_grid: int = 32
    zero_init_last: bool = True

    def __post_init__(self):
        if self.sn_mode not in ("matrix", "operator"):
            raise ValueError(f"sn_mode must be 'matrix' or 'operator', got {self.sn_mode!r}")
        if self.sn_grid < self.kernel:
            raise ValueError("sn_grid must be at least the kernel size")
        if self.depth < 1 or self.kernel % 2 != 1:
            raise ValueError("depth must be >= 1 and kernel odd")
        if self.norm_groups and self.depth > 1 and self.hidden_channels % self.norm_groups:
            raise ValueError("hidden_channels must be divisible by norm_groups")

    def layer_shapes(self):
        chans = [self.channels] + [self.hidden_channels] * (self.depth - 1) + [self.channels]
        return [(chans[i + 1], chans[i], self.kernel, self.kernel) for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def spectral_normalize(weight, iters=5, u0=None, target=1.0):
    """Rescale ``weight`` to spectral norm ``target`` using a power-iteration estimate.

    The weight is viewed as an (out, rest) matrix. The power iterations run on
    the graph when ``weight`` is a recording tensor, so the returned weight is
    an exactly differentiable function of the raw weight. Returns the scaled
    weight and the estimate ``sigma``.
    """
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    out_ch = w.shape[0]
    mat = ad.reshape(w, (out_ch, -1))
    if u0 is None:
        u0 = np.ones(out_ch) / math.sqrt(out_ch)
    if not np.any(w.data):
        return w, Tensor(0.0)
    u = Tensor(u0)
    mt = ad.linear_map(mat, lambda a: a.T, lambda g: g.T, op="transpose")
    for _ in range(iters):
        v = ad.matmul(mt, u)
        v = v / ad.sqrt(ad.sq_norm(v) + 1e-24)
        u = ad.matmul(mat, v)
        u = u / ad.sqrt(ad.sq_norm(u) + 1e-24)
    sigma = ad.tsum(u * ad.matmul(mat, v))
    if float(sigma.data) < 1e-12:
        sigma = Tensor(1e-12)
    return ad.div(w, sigma) * target, sigma


def _half_lattice_phases(grid, kh, kw):
    # exp(-2 pi i <w, tap> / grid) for the frequencies kept by a real FFT
    w1 = np.arange(grid)[:, None, None, None]
    w2 = np.arange(grid // 2 + 1)[None, :, None, None]
    a = np.arange(kh)[None, None, :, None]
    b = np.arange(kw)[None, None, None, :]
    return np.exp(-2j * np.pi * (w1 * a + w2 * b) / grid).reshape(-1, kh * kw)


def conv_operator_direction(weight, probe, iters, grid=32):
    """Power iteration for the operator norm of a convolution.

    The convolution is treated as circular on a ``grid`` x ``grid`` lattice,
    where it is block diagonal in frequency; a real kernel has a conjugate
    symmetric response, so half the lattice carries every singular value.
    ``probe`` holds a complex start vector of length C per frequency,
    typically the result of the previous call. Returns ``(sigma, M, probe)`` with
    ``sigma = <weight, M>`` the current estimate and ``M`` its gradient at
    ``weight`` once the iteration has converged.
    """
    O, C, kh, kw = weight.shape
    phase = _half_lattice_phases(grid, kh, kw)  # (n_freq, taps)
    F = (phase @ weight.reshape(O * C, kh * kw).T).reshape(-1, O, C)
    gram = np.conj(np.swapaxes(F, 1, 2)) @ F
    u = probe[:, :, None]
    for _ in range(iters):  # one independent power iteration per frequency
        u = gram @ u
        u /= np.linalg.norm(u, axis=1, keepdims=True) + 1e-300
    gains = np.linalg.norm(F @ u, axis=1)[:, 0]
    k = int(np.argmax(gains))
    sigma = float(gains[k])
    v = (F[k] @ u[k])[:, 0] / sigma
    # sigma = Re <v, F_k u_k>, linear in the kernel taps
    M = np.real(np.outer(np.conj(v), u[k, :, 0]).reshape(O * C, 1) * phase[k]).reshape(O, C, kh, kw)
    return sigma, M, u[:, :, 0]


def spectral_normalize_operator(weight, direction, target=1.0):
    """Rescale a convolution kernel by the linear norm estimate ``<weight, direction>``.

    ``direction`` comes from :func:`conv_operator_direction` at the current
    weights, so the estimate equals the operator norm there and its gradient
    is the exact gradient of the norm (a simple top singular value).
    """
    w = weight if isinstance(weight, Tensor) else Tensor(weight)
    if not np.any(w.data):
        return w, Tensor(0.0)
    sigma = ad.tsum(w * Tensor(direction))
    if float(sigma.data) < 1e-12:
        sigma = Tensor(1e-12)
    return ad.div(w, sigma) * target, sigma


class Denoiser:
    """``D(x) = x + net(x)`` (or ``net(x)`` when not residual).

    ``net`` is ``depth`` convolutions; every hidden layer is followed by
    group normalization (when enabled) and a leaky rectifier.
    """

    def __init__(self, arch=DenoiserArch(), params=None, seed=0):
        self.arch = arch
        if params is None:
            params = self.init_params(arch, seed)
        self.params = params if isinstance(params, ParameterSet) else ParameterSet(params)
        rng = stream(seed, "sn-start")
        self.buffers = {}
        for i, shape in enumerate(arch.layer_shapes()):
            if arch.sn_mode == "operator":
                n_freq = arch.sn_grid * (arch.sn_grid // 2 + 1)
                z = rng.standard_normal((2, n_freq, shape[1]))
                self.buffers[f"sn_p{i}"] = z / np.linalg.norm(z)  # real and imaginary parts
                self.buffers[f"sn_m{i}"] = np.zeros(shape)
            else:
                u = rng.standard_normal(shape[0])
                self.buffers[f"sn_u{i}"] = u / np.linalg.norm(u)
        self.refresh_spectral_state(200 if arch.sn_mode == "operator" else None)

    def refresh_spectral_state(self, iters=None):
        """Advance the stored power-iteration start vectors toward the top singular vectors.

        Runs off the graph; call after every parameter update so the on-graph
        iterations start warm. In operator mode this also fixes the linear
        norm estimate used by the next forward passes. ``iters`` defaults to
        100 for matrix mode and to ``4 * sn_power_iters`` for operator mode,
        whose probe is warm from the previous update.
        """
        if not self.arch.spectral_norm:
            return
        if self.arch.sn_mode == "operator":
            iters = 4 * self.arch.sn_power_iters if iters is None else iters
            for i in range(self.arch.depth):
                w = self.params[f"conv{i}.weight"].data
                if not np.any(w):
                    continue
                p = self.buffers[f"sn_p{i}"]
                _, M, probe = conv_operator_direction(w, p[0] + 1j * p[1], iters, self.arch.sn_grid)
                self.buffers[f"sn_p{i}"] = np.stack([probe.real, probe.imag])
                self.buffers[f"sn_m{i}"] = M
            return
        iters = 100 if iters is None else iters
        for i in range(self.arch.depth):
            mat = self.params[f"conv{i}.weight"].data.reshape(self.arch.layer_shapes()[i][0], -1)
            if not np.any(mat):
                continue
            u = self.buffers[f"sn_u{i}"]
            for _ in range(iters):
                v = mat.T @ u
                v /= np.linalg.norm(v)
                u = mat @ v
                u /= np.linalg.norm(u)
            self.buffers[f"sn_u{i}"] = u

    @staticmethod
    def init_params(arch, seed=0):
        rng = stream(seed, "init")
        params = {}
        shapes = arch.layer_shapes()
        for i, shape in enumerate(shapes):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            last = i == len(shapes) - 1
            if last and arch.zero_init_last:
                params[f"conv{i}.weight"] = np.zeros(shape)
            else:
                params[f"conv{i}.weight"] = rng.uniform(-bound, bound, shape)
            params[f"conv{i}.bias"] = np.zeros(shape[0])
            if not last and arch.norm_groups:
                params[f"norm{i}.weight"] = np.ones(shape[0])
                params[f"norm{i}.bias"] = np.zeros(shape[0])
        return ParameterSet(params)

    def effective_weights(self):
        """Convolution weights after spectral normalization (recorded when grad is enabled)."""
        out = {}
        for i in range(self.arch.depth):
            w = self.params[f"conv{i}.weight"]
            if self.arch.spectral_norm and self.arch.sn_mode == "operator":
                w, _ = spectral_normalize_operator(w, self.buffers[f"sn_m{i}"], self.arch.sn_target)
            elif self.arch.spectral_norm:
                w, _ = spectral_normalize(w, self.arch.sn_power_iters, self.buffers[f"sn_u{i}"],
                                          self.arch.sn_target)
            out[i] = w
        return out

    def __call__(self, x, weights=None):
        if weights is None:
            weights = self.effective_weights()
        a = self.arch
        h = x
        for i in range(a.depth):
            h = ad.conv2d(h, weights[i], self.params[f"conv{i}.bias"])
            if i < a.depth - 1:
                if a.norm_groups:
                    h = ad.group_norm(h, a.norm_groups, self.params[f"norm{i}.weight"],
                                      self.params[f"norm{i}.bias"])
                h = ad.leaky_relu(h, a.slope)
        return x + h if a.residual else h

    def frozen(self):
        """A numpy-only callable with weights fixed at their current values."""
        with ad.no_grad():
            weights = {i: Tensor(w.data) for i, w in self.effective_weights().items()}

        def apply(x):
            with ad.no_grad():
                return self(Tensor(x), weights).data

        return apply

    def copy(self):
        d = Denoiser(self.arch, self.params.copy())
        d.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return d


def lipschitz_estimate(fn, shape, n_pairs=32, seed=0, scale=1.0):
    """Largest observed ``||f(u) - f(v)|| / ||u - v||`` over random pairs."""
    rng = stream(seed, "lipschitz")
    best = 0.0
    for _ in range(n_pairs):
        u = rng.standard_normal(shape) * scale
        v = rng.standard_normal(shape) * scale
        num = np.linalg.norm(np.asarray(fn(u)) - np.asarray(fn(v)))
        best = max(best, float(num / np.linalg.norm(u - v)))
    return best
