# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 'same'-padded stride-1 convolution: im2col + BLAS dgemm."""

import numpy as np
from scipy.linalg.cython_blas cimport dgemm


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols, int k) noexcept nogil:
    cdef int C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int r = k // 2
    cdef int c, p, q, i, j, si, sj, row
    for c in range(C):
        for p in range(k):
            for q in range(k):
                row = (c * k + p) * k + q
                for i in range(H):
                    si = i + p - r
                    if si < 0 or si >= H:
                        for j in range(W):
                            cols[row, i * W + j] = 0.0
                        continue
                    for j in range(W):
                        sj = j + q - r
                        if sj < 0 or sj >= W:
                            cols[row, i * W + j] = 0.0
                        else:
                            cols[row, i * W + j] = x[c, si, sj]


cdef void _col2im(const double[:, ::1] cols, double[:, :, ::1] x, int k) noexcept nogil:
    cdef int C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int r = k // 2
    cdef int c, p, q, i, j, si, sj, row
    for c in range(C):
        for i in range(H):
            for j in range(W):
                x[c, i, j] = 0.0
    for c in range(C):
        for p in range(k):
            for q in range(k):
                row = (c * k + p) * k + q
                for i in range(H):
                    si = i + p - r
                    if si < 0 or si >= H:
                        continue
                    for j in range(W):
                        sj = j + q - r
                        if sj >= 0 and sj < W:
                            x[c, si, sj] += cols[row, i * W + j]


cdef void _gemm(char ta, char tb, int M, int N, int K, double alpha,
                double* A, int lda, double* B, int ldb, double beta,
                double* Cm, int ldc) noexcept nogil:
    # row-major C(MxN) = op(A) op(B); column-major view computes C^T = op(B)^T op(A)^T
    dgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, Cm, &ldc)


def conv2d_forward(x, w, b=None):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wm = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = wm.shape[0], k = w.shape[3]
    cdef int K = C * k * k, N = H * W
    cdef double[:, ::1] cv = np.empty((K, N))
    out = np.empty((B, O, H, W))
    cdef double[:, :, :, ::1] ov = out
    cdef int n
    for n in range(B):
        _im2col(xv[n], cv, k)
        _gemm(c'N', c'N', O, N, K, 1.0, &wm[0, 0], K, &cv[0, 0], N, 0.0,
              &ov[n, 0, 0, 0], N)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out


def conv2d_backward_input(gout, w):
    cdef double[:, :, :, ::1] ga = np.ascontiguousarray(gout, dtype=np.float64)
    cdef double[:, ::1] wm = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef int B = ga.shape[0], O = ga.shape[1], H = ga.shape[2], W = ga.shape[3]
    cdef int C = w.shape[1], k = w.shape[3]
    cdef int K = C * k * k, N = H * W
    cdef double[:, ::1] cv = np.empty((K, N))
    gx = np.empty((B, C, H, W))
    cdef double[:, :, :, ::1] gxv = gx
    cdef int n
    for n in range(B):
        # cols (K x N) = W^T (K x O) @ gout_n (O x N)
        _gemm(c'T', c'N', K, N, O, 1.0, &wm[0, 0], K, &ga[n, 0, 0, 0], N, 0.0,
              &cv[0, 0], N)
        _col2im(cv, gxv[n], k)
    return gx


def conv2d_backward_weight(x, gout, int k):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] ga = np.ascontiguousarray(gout, dtype=np.float64)
    cdef int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = ga.shape[1]
    cdef int K = C * k * k, N = H * W
    cdef double[:, ::1] cv = np.empty((K, N))
    gw = np.zeros((O, K))
    cdef double[:, ::1] gwv = gw
    cdef int n
    for n in range(B):
        _im2col(xv[n], cv, k)
        # gw (O x K) += gout_n (O x N) @ cols^T (N x K)
        _gemm(c'N', c'T', O, K, N, 1.0, &ga[n, 0, 0, 0], N, &cv[0, 0], N, 1.0,
              &gwv[0, 0], K)
    return gw.reshape(O, C, k, k)
