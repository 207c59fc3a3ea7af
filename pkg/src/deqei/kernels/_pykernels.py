"""Pure numpy convolution kernels.

Reference implementation of the compiled core; used when the extension is
missing or ``DEQEI_PURE_PYTHON=1``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    # (B, C, H, W, k, k)
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward(x, w, b=None):
    k = w.shape[-1]
    cols = _windows(x, k)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_backward_input(gout, w):
    k = w.shape[-1]
    cols = _windows(gout, k)
    wf = w[:, :, ::-1, ::-1]
    gx = np.tensordot(cols, wf, axes=([1, 4, 5], [0, 2, 3]))  # (B, H, W, C)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def conv2d_backward_weight(x, gout, k):
    cols = _windows(x, k)
    return np.ascontiguousarray(np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3])))
