"""Measurement operators, the rotation group and the additive noise model.

All operators act on image batches of shape ``(B, C, H, W)`` (a single
``(C, H, W)`` image is accepted too) and return measurements of shape
``(B, *output_shape)``. Passing a :class:`~deqei.autodiff.Tensor` records the
application on the differentiation graph with the adjoint as its VJP.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .rng import stream

__all__ = [
    "LinearOperator",
    "DenseOp",
    "InpaintingOp",
    "MaskedFourierOp",
    "TomographyOp",
    "PinvInfo",
    "GroupElement",
    "RotationGroup",
    "NoiseModel",
    "rotate",
    "add_noise",
    "random_inpainting_mask",
    "gaussian_line_mask",
    "operator_norm",
    "build_operator",
]


@dataclass
class PinvInfo:
    converged: bool
    iterations: int
    residual: float


class LinearOperator:
    kind = "abstract"

    def __init__(self, input_shape, output_shape):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.output_shape = tuple(int(s) for s in output_shape)

    @property
    def output_dim(self):
        return int(np.prod(self.output_shape))

    # numpy-level maps on batches; subclasses implement these
    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def _pinv(self, y):
        """Pseudoinverse on a batch; returns (x, PinvInfo)."""
        return self._adjoint(y), PinvInfo(True, 0, 0.0)

    def _pinv_adjoint(self, x):
        return self._forward(x)

    def _check(self, arr, expected, what):
        if tuple(arr.shape[-len(expected):]) != expected or arr.ndim not in (len(expected), len(expected) + 1):
            raise ValueError(f"{self.kind}: {what} has shape {arr.shape}, expected (B, *{expected})")

    def _lift(self, fn, arr, in_shape):
        single = arr.ndim == len(in_shape)
        a = arr[None] if single else arr
        out = fn(a)
        return out[0] if single else out

    def apply(self, x):
        xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
        self._check(xd, self.input_shape, "input")
        fwd = lambda a: self._lift(self._forward, a, self.input_shape)
        if isinstance(x, ad.Tensor):
            adj = lambda g: self._lift(self._adjoint, g, self.output_shape)
            return ad.linear_map(x, fwd, adj, op=f"{self.kind}.apply")
        return fwd(xd)

    def adjoint(self, y):
        yd = y.data if isinstance(y, ad.Tensor) else np.asarray(y, dtype=np.float64)
        self._check(yd, self.output_shape, "measurement")
        adj = lambda a: self._lift(self._adjoint, a, self.output_shape)
        if isinstance(y, ad.Tensor):
            fwd = lambda g: self._lift(self._forward, g, self.input_shape)
            return ad.linear_map(y, adj, fwd, op=f"{self.kind}.adjoint")
        return adj(yd)

    def pseudoinverse(self, y, return_info=False):
        yd = y.data if isinstance(y, ad.Tensor) else np.asarray(y, dtype=np.float64)
        self._check(yd, self.output_shape, "measurement")
        info = {}

        def pinv(a):
            out, info["info"] = self._pinv(a)
            if not info["info"].converged:
                warnings.warn(f"{self.kind} pseudoinverse did not converge "
                              f"(residual {info['info'].residual:.2e})", RuntimeWarning, stacklevel=3)
            return out

        fwd = lambda a: self._lift(pinv, a, self.output_shape)
        if isinstance(y, ad.Tensor):
            adj = lambda g: self._lift(self._pinv_adjoint, g, self.input_shape)
            out = ad.linear_map(y, fwd, adj, op=f"{self.kind}.pinv")
        else:
            out = fwd(yd)
        return (out, info["info"]) if return_info else out

    def gradient_mc(self, x, y):
        """Gradient of ||Ax - y||^2 with respect to x, i.e. 2 A^T (Ax - y)."""
        return self.adjoint(self.apply(x) - y) * 2.0

    def describe(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "output_shape": list(self.output_shape)}


class DenseOp(LinearOperator):
    """Explicit matrix; mainly a test oracle."""

    kind = "dense"

    def __init__(self, matrix, input_shape):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape[1] != int(np.prod(input_shape)):
            raise ValueError(f"dense: matrix {matrix.shape} incompatible with input {input_shape}")
        super().__init__(input_shape, (matrix.shape[0],))
        self.matrix = matrix
        self._pinv_matrix = np.linalg.pinv(matrix)

    def _forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.matrix.T

    def _adjoint(self, y):
        return (y @ self.matrix).reshape((y.shape[0],) + self.input_shape)

    def _pinv(self, y):
        return (y @ self._pinv_matrix.T).reshape((y.shape[0],) + self.input_shape), PinvInfo(True, 0, 0.0)

    def _pinv_adjoint(self, x):
        return x.reshape(x.shape[0], -1) @ self._pinv_matrix


class InpaintingOp(LinearOperator):
    """Keeps the pixels where ``mask`` is true; measurements are the kept values."""

    kind = "inpainting"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError("inpainting mask must be (C, H, W)")
        super().__init__(mask.shape, (int(mask.sum()),))
        self.mask = mask
        self._flat = np.flatnonzero(mask.ravel())

    def _forward(self, x):
        return x.reshape(x.shape[0], -1)[:, self._flat]

    def _adjoint(self, y):
        out = np.zeros((y.shape[0], self.mask.size))
        out[:, self._flat] = y
        return out.reshape((y.shape[0],) + self.input_shape)

    def describe(self):
        return {**super().describe(), "kept": int(self.mask.sum())}


class MaskedFourierOp(LinearOperator):
    """Subsampled orthonormal 2-D DFT of a complex image stored as two channels.

    Input is ``(2, H, W)`` with channel 0 the real and channel 1 the imaginary
    part; the output is ``(2, k)`` holding the real and imaginary parts of the
    ``k`` kept frequencies. Rows are orthonormal, so ``A A^T = I``.
    """

    kind = "masked-fourier"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("fourier mask must be (H, W)")
        H, W = mask.shape
        super().__init__((2, H, W), (2, int(mask.sum())))
        self.mask = mask

    def _forward(self, x):
        k = np.fft.fft2(x[:, 0] + 1j * x[:, 1], norm="ortho")[:, self.mask]
        return np.stack([k.real, k.imag], axis=1)

    def _adjoint(self, y):
        B = y.shape[0]
        K = np.zeros((B,) + self.mask.shape, dtype=np.complex128)
        K[:, self.mask] = y[:, 0] + 1j * y[:, 1]
        img = np.fft.ifft2(K, norm="ortho")
        return np.stack([img.real, img.imag], axis=1)

    def describe(self):
        return {**super().describe(), "kept_fraction": float(self.mask.mean())}


def _bilinear_matrix(rows, cols, N, M):
    """Sparse (len(rows) x N*M) bilinear interpolation weights, zero outside the grid."""
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0
    idx = np.arange(rows.size)
    I, J, V = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < N) & (cc >= 0) & (cc < M) & (w != 0)
        I.append(idx[ok])
        J.append(rr[ok] * M + cc[ok])
        V.append(w[ok])
    return sp.csr_matrix((np.concatenate(V), (np.concatenate(I), np.concatenate(J))),
                         shape=(rows.size, N * M))


class TomographyOp(LinearOperator):
    """Parallel-beam discrete Radon transform.

    Line integrals are sampled at unit steps with bilinear interpolation;
    ``detector_count`` detectors are spread over the image width. With
    ``normalize`` the matrix is rescaled to unit spectral norm.

    The pseudoinverse ``A^T (A A^T)^+`` is precomputed from an
    eigendecomposition of ``A A^T`` when the dense matrix is small
    (``pinv_method="direct"``); otherwise it runs conjugate gradients on the
    normal equations for every call (``"cg"``).
    """

    kind = "tomography"

    def __init__(self, size, angles, detector_count=None, normalize=True,
                 pinv_method="auto", cg_tol=1e-8, cg_maxiter=500):
        size = int(size)
        angles = np.asarray(angles, dtype=np.float64)
        D = size if detector_count is None else int(detector_count)
        super().__init__((1, size, size), (angles.size, D))
        self.size, self.angles, self.detector_count = size, angles, D
        self.cg_tol, self.cg_maxiter = cg_tol, cg_maxiter
        c = (size - 1) / 2.0
        spacing = size / D
        t = (np.arange(D) - (D - 1) / 2.0) * spacing
        half = math.ceil(c * math.sqrt(2.0))
        s = np.arange(-half, half + 1, dtype=np.float64)
        th = np.deg2rad(angles)[:, None, None]
        tt, ss = t[None, :, None], s[None, None, :]
        # ray direction (cos, sin), detector axis (-sin, cos); y points up
        x = tt * -np.sin(th) + ss * np.cos(th)
        y = tt * np.cos(th) + ss * np.sin(th)
        rows = (c - y).ravel()
        cols = (x + c).ravel()
        interp = _bilinear_matrix(rows, cols, size, size)
        n_rays = angles.size * D
        gather = sp.csr_matrix((np.ones(rows.size), (np.repeat(np.arange(n_rays), s.size),
                                                      np.arange(rows.size))), shape=(n_rays, rows.size))
        mat = (gather @ interp).tocsr()
        mat.sum_duplicates()
        self.scale = 1.0
        if normalize:
            self.scale = 1.0 / _sparse_norm(mat)
            mat = mat * self.scale
        self.matrix = mat.tocsr()
        self.matrix_t = self.matrix.T.tocsr()
        if pinv_method == "auto":
            pinv_method = "direct" if self.output_dim * size * size <= 4_000_000 else "cg"
        if pinv_method not in ("direct", "cg"):
            raise ValueError(f"unknown pinv_method {pinv_method!r}")
        self.pinv_method = pinv_method
        self._pinv_matrix = None
        if pinv_method == "direct":
            gram = (self.matrix @ self.matrix_t).toarray()
            w, V = np.linalg.eigh(gram)
            keep = w > w.max() * 1e-12
            inv_gram = (V[:, keep] / w[keep]) @ V[:, keep].T
            self._pinv_matrix = np.asarray(self.matrix_t @ inv_gram)

    def _forward(self, x):
        return (self.matrix @ x.reshape(x.shape[0], -1).T).T.reshape((x.shape[0],) + self.output_shape)

    def _adjoint(self, y):
        return (self.matrix_t @ y.reshape(y.shape[0], -1).T).T.reshape((y.shape[0],) + self.input_shape)

    def _normal_solve(self, Y):
        """Conjugate gradients on A A^T Z = Y, one column per sample."""
        A, At = self.matrix, self.matrix_t
        Z = np.zeros_like(Y)
        R = Y.copy()
        P = R.copy()
        rr = np.einsum("ij,ij->j", R, R)
        bnorm = np.sqrt(np.einsum("ij,ij->j", Y, Y))
        bnorm[bnorm == 0] = 1.0
        it = 0
        rel = np.sqrt(rr) / bnorm
        while it < self.cg_maxiter and rel.max() > self.cg_tol:
            AP = A @ (At @ P)
            pap = np.einsum("ij,ij->j", P, AP)
            active = rel > self.cg_tol
            alpha = np.where(active & (pap > 0), rr / np.where(pap > 0, pap, 1.0), 0.0)
            Z += alpha * P
            R -= alpha * AP
            rr_new = np.einsum("ij,ij->j", R, R)
            beta = np.where(rr > 0, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
            P = R + beta * P
            rr = rr_new
            rel = np.sqrt(rr) / bnorm
            it += 1
        return Z, PinvInfo(bool(rel.max() <= self.cg_tol), it, float(rel.max()))

    def _pinv(self, y):
        Y = y.reshape(y.shape[0], -1).T
        if self._pinv_matrix is not None:
            return (self._pinv_matrix @ Y).T.reshape((y.shape[0],) + self.input_shape), PinvInfo(True, 0, 0.0)
        Z, info = self._normal_solve(Y)
        x = (self.matrix_t @ Z).T.reshape((y.shape[0],) + self.input_shape)
        return x, info

    def _pinv_adjoint(self, x):
        # (A^T (A A^T)^-1)^T = (A A^T)^-1 A
        if self._pinv_matrix is not None:
            return (x.reshape(x.shape[0], -1) @ self._pinv_matrix).reshape((x.shape[0],) + self.output_shape)
        Y = self.matrix @ x.reshape(x.shape[0], -1).T
        Z, _ = self._normal_solve(Y)
        return Z.T.reshape((x.shape[0],) + self.output_shape)

    def describe(self):
        return {**super().describe(), "angles": self.angles.tolist(), "scale": self.scale}


def _sparse_norm(mat, iters=500, tol=1e-12):
    v = np.ones(mat.shape[1]) / math.sqrt(mat.shape[1])
    sigma = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 1.0
        v = w / nw
        if abs(nw - sigma) <= tol * nw:
            sigma = nw
            break
        sigma = nw
    return math.sqrt(sigma)


def operator_norm(A, iters=100, seed=0):
    """Power-iteration estimate of the spectral norm of ``A``."""
    v = stream(seed, "operator-norm").standard_normal(A.input_shape)
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(iters):
        w = A.adjoint(A.apply(v))
        sigma2 = float(np.linalg.norm(w))
        if sigma2 == 0.0:
            return 0.0
        v = w / sigma2
    return math.sqrt(sigma2)


def random_inpainting_mask(shape, keep=0.5, seed=0):
    return stream(seed, "inpainting-mask").random(shape) < keep


def gaussian_line_mask(size, acceleration=4.0, center_fraction=0.04, seed=0):
    """Cartesian line mask: a fully sampled low band plus Gaussian-weighted random lines.

    Lines within ``ceil(center_fraction * size)`` of DC are always kept; the
    rest are kept with probability ``exp(-d^2 / 2 s^2)`` where ``s`` makes the
    expected kept fraction equal ``1 / acceleration``.
    """
    size = int(size)
    d = np.abs(np.fft.fftfreq(size) * size)
    radius = math.ceil(center_fraction * size)
    center = d <= radius
    target = size / acceleration - center.sum()
    outer = d[~center]
    if target <= 0:
        s = 0.0
        probs = np.zeros_like(outer)
    else:
        lo, hi = 1e-6, 1e6
        for _ in range(200):
            s = math.sqrt(lo * hi)
            if np.exp(-outer ** 2 / (2 * s * s)).sum() < target:
                lo = s
            else:
                hi = s
        probs = np.exp(-outer ** 2 / (2 * s * s))
    keep = center.copy()
    keep[~center] = stream(seed, "fourier-mask").random(outer.size) < probs
    return np.repeat(keep[:, None], size, axis=1)


# ---------------------------------------------------------------- rotations


@dataclass(frozen=True)
class GroupElement:
    angle_degrees: float

    @property
    def exact(self):
        return float(self.angle_degrees) % 90.0 == 0.0

    @property
    def quarter_turns(self):
        return int(round(float(self.angle_degrees) / 90.0)) % 4

    def inverse(self):
        return GroupElement((-float(self.angle_degrees)) % 360.0)

    def compose(self, other):
        return GroupElement((float(self.angle_degrees) + float(other.angle_degrees)) % 360.0)


class RotationGroup:
    """Cyclic rotation group with a fixed angular step (90 gives the exact 4-element group)."""

    def __init__(self, step_degrees=90.0):
        n = 360.0 / step_degrees
        if abs(n - round(n)) > 1e-9:
            raise ValueError("step must divide 360")
        self.step = float(step_degrees)
        self.elements = [GroupElement(i * self.step) for i in range(int(round(n)))]

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i):
        return self.elements[i]


_rotation_cache: dict[tuple[float, int, int], sp.csr_matrix] = {}


def _rotation_matrix(angle, H, W):
    key = (float(angle) % 360.0, H, W)
    mat = _rotation_cache.get(key)
    if mat is None:
        cr, cc = (H - 1) / 2.0, (W - 1) / 2.0
        r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
        x, y = c - cc, cr - r
        th = math.radians(angle)
        # output(p) = input(R(-theta) p)
        xs = math.cos(th) * x + math.sin(th) * y
        ys = -math.sin(th) * x + math.cos(th) * y
        mat = _bilinear_matrix((cr - ys).ravel(), (xs + cc).ravel(), H, W)
        _rotation_cache[key] = mat
    return mat


def _rotate_np(x, g):
    if g.exact:
        return np.ascontiguousarray(np.rot90(x, g.quarter_turns, axes=(-2, -1)))
    H, W = x.shape[-2:]
    if H != W:
        raise ValueError("non-quarter-turn rotation needs a square image")
    mat = _rotation_matrix(g.angle_degrees, H, W)
    flat = x.reshape(-1, H * W)
    return (mat @ flat.T).T.reshape(x.shape)


def _rotate_adj_np(x, g):
    if g.exact:
        return _rotate_np(x, g.inverse())
    H, W = x.shape[-2:]
    mat = _rotation_matrix(g.angle_degrees, H, W)
    flat = x.reshape(-1, H * W)
    return (mat.T @ flat.T).T.reshape(x.shape)


def rotate(x, g):
    """Counterclockwise rotation of the last two axes.

    ``g`` is a single :class:`GroupElement` or a sequence with one element per
    batch entry. Quarter turns are exact index permutations; other angles use
    bilinear interpolation about the image center with zeros outside.
    """
    per_sample = not isinstance(g, GroupElement)
    xd = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    if per_sample and len(g) != xd.shape[0]:
        raise ValueError(f"got {len(g)} group elements for a batch of {xd.shape[0]}")
    if xd.shape[-1] != xd.shape[-2] and not (all(e.exact for e in g) if per_sample else g.exact):
        raise ValueError("non-quarter-turn rotation needs a square image")

    if per_sample:
        fwd = lambda a: np.stack([_rotate_np(a[i], e) for i, e in enumerate(g)])
        adj = lambda a: np.stack([_rotate_adj_np(a[i], e) for i, e in enumerate(g)])
    else:
        fwd = lambda a: _rotate_np(a, g)
        adj = lambda a: _rotate_adj_np(a, g)
    if isinstance(x, ad.Tensor):
        return ad.linear_map(x, fwd, adj, op="rotate")
    return fwd(xd)


# ---------------------------------------------------------------- noise


@dataclass
class NoiseModel:
    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "additive-gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")


def add_noise(y, nm, counter=0):
    """``y + sigma * z`` with ``z`` standard normal from the model's seeded stream."""
    if nm.sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if nm.kind == "none" or nm.sigma == 0.0:
        return y
    return y + nm.sigma * stream(nm.seed, "noise", counter).standard_normal(y.shape)


def build_operator(spec, seed=0):
    """Construct an operator from a task description dict (see the config module)."""
    task = spec["task"]
    size = int(spec["size"])
    if task == "inpainting":
        return InpaintingOp(random_inpainting_mask((1, size, size), spec.get("keep", 0.5), seed))
    if task == "masked-fourier":
        return MaskedFourierOp(gaussian_line_mask(size, spec.get("acceleration", 4.0),
                                                  spec.get("center_fraction", 0.04), seed))
    if task == "tomography":
        n = int(spec.get("angles", 13))
        return TomographyOp(size, np.arange(n) * 180.0 / n)
    raise ValueError(f"unknown task {task!r}")
