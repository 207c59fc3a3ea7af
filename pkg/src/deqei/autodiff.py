"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Primitives record their parents and a
vector-Jacobian rule on the output tensor when any input requires a gradient
and recording is enabled (see :func:`no_grad`). Gradients are computed by
:func:`grad`, which walks the recorded graph in reverse topological order and
applies per-tensor hooks to the fully accumulated upstream gradient before it
flows further.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ParameterSet",
    "AutodiffError",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "vjp",
    "backward",
    "detach",
    "register_hook",
    "graph_size",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "matmul",
    "conv2d",
    "leaky_relu",
    "group_norm",
    "tsum",
    "mean",
    "sq_norm",
    "reshape",
    "concat_channels",
    "linear_map",
]

_grad_enabled = True


class AutodiffError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_op", "_hook")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None
        self._op = None
        self._hook = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return detach(self)

    def requires_grad_(self, flag=True):
        if self._parents:
            raise AutodiffError("requires_grad_ only applies to leaf tensors")
        self.requires_grad = bool(flag)
        return self

    def register_hook(self, hook):
        register_hook(self, hook)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def detach(x):
    """Value-equal tensor with no history; shares the underlying buffer."""
    return Tensor(x.data)


def register_hook(x, hook):
    """Replace the upstream gradient arriving at ``x`` by ``hook(g)``."""
    if not x.requires_grad:
        raise AutodiffError("cannot register a hook on a tensor that does not require grad")
    if x._hook is not None:
        raise AutodiffError("tensor already has a hook")
    x._hook = hook


# ---------------------------------------------------------------- primitives


def _unbroadcast(g, shape):
    # only scalar-with-tensor broadcasting is supported
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


def _check_broadcast(op, a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _record(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    """Elementwise product; a python scalar operand gives scalar-multiply."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        return _record(a.data * s, (a,), lambda g, needs: (g * s,), "scale")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _record(ad * bd, (a, b), vjp, "mul")


def div(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return mul(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g, needs):
        return (_unbroadcast(g / bd, ad.shape) if needs[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None)

    return _record(out, (a, b), vjp, "div")


def neg(a):
    return _record(-a.data, (a,), lambda g, needs: (-g,), "neg")


def sqrt(a):
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g, needs: (0.5 * g / out,), "sqrt")


def matmul(a, b):
    """Matrix-matrix or matrix-vector product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = np.outer(g, bd) if bd.ndim == 1 else g @ bd.T
        if needs[1]:
            gb = ad.T @ g
        return ga, gb

    return _record(ad @ bd, (a, b), vjp, "matmul")


def conv2d(x, w, b=None):
    """Stride-1 2-D convolution with zero padding that preserves H and W.

    ``x`` is (B, C, H, W), ``w`` is (O, C, k, k) with odd k, ``b`` is (O,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 != 1 or (b is not None and b.shape != (w.shape[0],)):
        bs = None if b is None else b.shape
        raise AutodiffError(f"conv2d: shape mismatch x={x.shape} w={w.shape} b={bs}")
    xd, wd = x.data, w.data
    k = wd.shape[-1]
    out = kernels.conv2d_forward(xd, wd, None if b is None else b.data)

    def vjp(g, needs):
        gx = kernels.conv2d_backward_input(g, wd) if needs[0] else None
        gw = kernels.conv2d_backward_weight(xd, g, k) if needs[1] else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, vjp, "conv2d")


def leaky_relu(x, slope=0.1):
    xd = x.data
    pos = xd > 0
    out = np.where(pos, xd, slope * xd)
    return _record(out, (x,), lambda g, needs: (np.where(pos, g, slope * g),), "leaky_relu")


def group_norm(x, groups, weight=None, bias=None, eps=1e-5):
    """Group normalization over (C/groups, H, W) blocks with optional per-channel affine."""
    if x.ndim != 4 or x.shape[1] % groups != 0:
        raise AutodiffError(f"group_norm: {x.shape} not divisible into {groups} groups")
    B, C, H, W = x.shape
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, H, W)
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g, needs):
        gx = None
        gh = g if weight is None else g * weight.data[None, :, None, None]
        if needs[0]:
            ghg = gh.reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (ghg - ghg.mean(axis=2, keepdims=True)
                        - xh * (ghg * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(B, C, H, W)
        rest = []
        if weight is not None:
            rest.append((g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None)
        if bias is not None:
            rest.append(g.sum(axis=(0, 2, 3)) if needs[-1] else None)
        return (gx, *rest)

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)
    return _record(out, parents, vjp, "group_norm")


def tsum(x):
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g, needs: (np.full(shape, float(g)),), "sum")


def mean(x):
    shape, n = x.shape, x.size
    return _record(np.asarray(x.data.mean()), (x,),
                   lambda g, needs: (np.full(shape, float(g) / n),), "mean")


def sq_norm(x):
    """Squared L2 norm of all entries."""
    xd = x.data
    return _record(np.asarray(np.vdot(xd, xd)), (x,), lambda g, needs: (2.0 * float(g) * xd,), "sq_norm")


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _record(out, (x,), lambda g, needs: (g.reshape(old),), "reshape")


def concat_channels(xs):
    xs = list(xs)
    if not xs or any(t.ndim != 4 or t.shape[0] != xs[0].shape[0] or t.shape[2:] != xs[0].shape[2:]
                     for t in xs):
        raise AutodiffError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def vjp(g, needs):
        return tuple(p if n else None for p, n in zip(np.split(g, splits, axis=1), needs))

    return _record(np.concatenate([t.data for t in xs], axis=1), xs, vjp, "concat_channels")


def linear_map(x, forward, adjoint, op="linear_map"):
    """Apply a fixed linear map given as numpy callables; its VJP is ``adjoint``."""
    return _record(forward(x.data), (x,), lambda g, needs: (adjoint(g),), op)


# ---------------------------------------------------------------- traversal


def _topo(root):
    """Tensors reachable from ``root`` through recorded edges, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_size(t):
    """Number of recorded (non-leaf) tensors reachable from ``t``."""
    if not t.requires_grad:
        return 0
    return sum(1 for n in _topo(t) if n._parents)


def grad(output, inputs, grad_output=None, allow_unused=False):
    """Gradients of ``output`` with respect to ``inputs`` without side effects.

    ``grad_output`` defaults to ones for a scalar output. Hooks registered on
    intermediate tensors transform the accumulated gradient before it flows
    to their parents.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise AutodiffError(f"grad_output required for non-scalar output of shape {output.shape}")
        grad_output = np.ones(output.shape)
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != output.shape:
        raise AutodiffError(f"vector shape {grad_output.shape} does not match output {output.shape}")
    if not output.requires_grad:
        raise AutodiffError("output is not attached to a differentiation graph")

    order = _topo(output)
    targets = {id(t): i for i, t in enumerate(inputs)}
    relevant = set()
    for t in order:
        if id(t) in targets or any(id(p) in relevant for p in t._parents):
            relevant.add(id(t))
    results = [None] * len(inputs)
    if id(output) not in relevant:
        if allow_unused:
            return [np.zeros(t.shape) for t in inputs]
        raise AutodiffError("input is not an ancestor of output")

    grads = {id(output): grad_output}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None or id(t) not in relevant:
            continue
        if t._hook is not None:
            g2 = np.asarray(t._hook(g), dtype=np.float64)
            if g2.shape != g.shape:
                raise AutodiffError(f"hook changed gradient shape {g.shape} -> {g2.shape}")
            g = g2
        if id(t) in targets:
            results[targets[id(t)]] = g
        if not t._parents:
            continue
        needs = tuple(id(p) in relevant for p in t._parents)
        for p, gp in zip(t._parents, t._vjp(g, needs)):
            if gp is None or id(p) not in relevant:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    for i, t in enumerate(inputs):
        if results[i] is None:
            if not allow_unused:
                raise AutodiffError(f"input {i} is not an ancestor of output")
            results[i] = np.zeros(t.shape)
    return results


def vjp(output, input, vector):
    """``vector^T (d output / d input)`` shaped like ``input``."""
    return grad(output, [input], grad_output=vector)[0]


class ParameterSet(Mapping):
    """Ordered named collection of trainable leaf tensors."""

    def __init__(self, params=None):
        self._params = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    @property
    def total_count(self):
        return sum(t.size for t in self._params.values())

    def flatten(self):
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def unflatten(self, vec):
        """Split a flat vector into a name -> array dict matching this set."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_count,):
            raise ValueError(f"expected vector of length {self.total_count}, got {vec.shape}")
        out, i = {}, 0
        for name, t in self._params.items():
            out[name] = vec[i:i + t.size].reshape(t.shape).copy()
            i += t.size
        return out

    def load_flat(self, vec):
        for name, arr in self.unflatten(vec).items():
            self._params[name].data = arr

    def values_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load(self, values):
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self._params[name].shape}")
            self._params[name].data = arr.copy()

    def copy(self):
        return ParameterSet({n: Tensor(t.data.copy()) for n, t in self._params.items()})


def backward(loss, params=None):
    """Gradient of a scalar ``loss`` for every parameter.

    ``params`` is a :class:`ParameterSet` or a mapping name -> Tensor; when
    omitted, every named leaf reachable from ``loss`` is used. Parameters
    that do not influence ``loss`` receive zeros.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss is detached from the differentiation graph")
    if params is None:
        leaves = [t for t in _topo(loss) if not t._parents and t.name is not None]
        params = {t.name: t for t in leaves}
    names = list(params)
    gs = grad(loss, [params[n] for n in names], allow_unused=True)
    return dict(zip(names, gs))


def flat_grad(grads: Mapping[str, np.ndarray], names: Iterable[str]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[n]) for n in names])


def numeric_grad(f: Callable[[np.ndarray], float], x0: np.ndarray, step: float = 1e-6,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central finite differences of ``f`` at flat vector ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    idx = range(x0.size) if indices is None else indices
    out = np.zeros(x0.size)
    for i in idx:
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        out[i] = (f(xp) - f(xm)) / (2 * step)
    return out
