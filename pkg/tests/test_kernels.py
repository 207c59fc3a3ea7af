import os
import subprocess
import sys

import numpy as np
import pytest

from deqei import kernels
from deqei.kernels import python_backend

compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _case(seed, B=2, C=3, O=4, H=7, W=6, k=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, C, H, W)), rng.standard_normal((O, C, k, k)), rng.standard_normal(O), \
        rng.standard_normal((B, O, H, W))


def _direct_conv(x, w, b):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((B, O, H, W))
    for i in range(H):
        for j in range(W):
            out[:, :, i, j] = np.einsum("bcuv,ocuv->bo", xp[:, :, i:i + k, j:j + k], w)
    return out + b[None, :, None, None]


@pytest.mark.parametrize("k", [1, 3, 5])
def test_python_forward_matches_direct_loop(k):
    x, w, b, _ = _case(0, k=k)
    assert np.allclose(python_backend.conv2d_forward(x, w, b), _direct_conv(x, w, b), atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_python_backward_is_adjoint(k):
    x, w, _, g = _case(1, k=k)
    lhs = np.vdot(python_backend.conv2d_forward(x, w), g)
    assert np.isclose(lhs, np.vdot(x, python_backend.conv2d_backward_input(g, w)), rtol=1e-12)
    assert np.isclose(lhs, np.vdot(w, python_backend.conv2d_backward_weight(x, g, k)), rtol=1e-12)


@needs_compiled
@pytest.mark.parametrize("seed,k", [(2, 3), (3, 1), (4, 5)])
def test_backends_agree(seed, k):
    x, w, b, g = _case(seed, k=k)
    for name, args in (("conv2d_forward", (x, w, b)), ("conv2d_backward_input", (g, w)),
                       ("conv2d_backward_weight", (x, g, k))):
        a = getattr(compiled, name)(*args)
        p = getattr(python_backend, name)(*args)
        assert a.shape == p.shape
        assert np.max(np.abs(a - p)) <= 1e-12 * max(1.0, np.max(np.abs(p))), name


@needs_compiled
def test_compiled_is_default():
    assert kernels.BACKEND == "cython"


def test_pure_python_switch():
    env = dict(os.environ, DEQEI_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from deqei import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
