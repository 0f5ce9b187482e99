# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Same contracts as `simts.backend.reference`: causal 1-D convolution
forward/backward and the fused SGD momentum update.  The convolution is an
im2col panel (built with tight C loops, chunked along time) fed to BLAS
dgemm; the SGD update runs in a single pass over the parameter buffers
instead of the several full-array sweeps numpy needs.
"""

import numpy as np

from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"

DEF PANEL_BYTES = 33554432  # 32 MiB cap per im2col panel


cdef inline void _fill_panel(double* panel, const double* x, int cin, int L,
                             int k, int t0, int lc) noexcept nogil:
    """panel[(i*k+j)*lc + t] = x[i, t0+t+j-(k-1)], zero left of the input."""
    cdef int i, j, row, src0, tstart
    for i in range(cin):
        for j in range(k):
            row = i * k + j
            src0 = t0 + j - (k - 1)
            tstart = -src0 if src0 < 0 else 0
            if tstart > lc:
                tstart = lc
            if tstart > 0:
                memset(panel + row * lc, 0, tstart * sizeof(double))
            if tstart < lc:
                memcpy(panel + row * lc + tstart, x + i * L + src0 + tstart,
                       (lc - tstart) * sizeof(double))


def conv1d_fwd(x, w, b):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    cdef int cout = w.shape[0]
    cdef int cin = w.shape[1]
    cdef int k = w.shape[2]
    cdef int L = x.shape[1]
    cdef int ck = cin * k
    y = np.empty((cout, L), dtype=np.float64)

    cdef double[:, ::1] xv = x
    cdef double[:, :, ::1] wv = w
    cdef double[::1] bv = b
    cdef double[:, ::1] yv = y

    cdef int step = PANEL_BYTES // (8 * ck)
    if step < 1:
        step = 1
    if step > L:
        step = L
    cdef double* panel = <double*> malloc(<size_t> ck * step * sizeof(double))
    if panel is NULL:
        raise MemoryError()

    cdef int t0, lc, o, t
    cdef int m, n, kk, lda, ldb, ldc
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N'
    try:
        with nogil:
            t0 = 0
            while t0 < L:
                lc = L - t0 if L - t0 < step else step
                _fill_panel(panel, &xv[0, 0], cin, L, k, t0, lc)
                # C-order Y[:, t0:t0+lc] viewed in Fortran is (lc x cout),
                # and equals panel_F (lc x ck) @ W_F (ck x cout).
                m = lc; n = cout; kk = ck; lda = lc; ldb = ck; ldc = L
                dgemm(&nt, &nt, &m, &n, &kk, &one, panel, &lda,
                      &wv[0, 0, 0], &ldb, &zero, &yv[0, t0], &ldc)
                t0 += lc
            for o in range(cout):
                for t in range(L):
                    yv[o, t] += bv[o]
    finally:
        free(panel)
    return y


def conv1d_bwd(x, w, gy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int cout = w.shape[0]
    cdef int cin = w.shape[1]
    cdef int k = w.shape[2]
    cdef int L = x.shape[1]
    cdef int ck = cin * k

    gx = np.zeros((cin, L), dtype=np.float64)
    gw = np.zeros((cout, cin, k), dtype=np.float64)
    gb = np.asarray(gy).sum(axis=1)

    cdef double[:, ::1] xv = x
    cdef double[:, :, ::1] wv = w
    cdef double[:, ::1] gyv = gy
    cdef double[:, ::1] gxv = gx
    cdef double[:, :, ::1] gwv = gw

    cdef int step = PANEL_BYTES // (2 * 8 * ck)
    if step < 1:
        step = 1
    if step > L:
        step = L
    cdef double* panel = <double*> malloc(<size_t> ck * step * sizeof(double))
    cdef double* gcols = <double*> malloc(<size_t> ck * step * sizeof(double))
    if panel is NULL or gcols is NULL:
        free(panel)
        free(gcols)
        raise MemoryError()

    cdef int t0, lc, i, j, row, src0, tstart, t
    cdef int m, n, kk, lda, ldb, ldc
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    try:
        with nogil:
            t0 = 0
            while t0 < L:
                lc = L - t0 if L - t0 < step else step
                _fill_panel(panel, &xv[0, 0], cin, L, k, t0, lc)
                # gw (ck x cout in Fortran view) += panel_F^T @ gy_F
                m = ck; n = cout; kk = lc; lda = lc; ldb = L; ldc = ck
                dgemm(&tt, &nt, &m, &n, &kk, &one, panel, &lda,
                      &gyv[0, t0], &ldb, &one, &gwv[0, 0, 0], &ldc)
                # gcols (lc x ck in Fortran view) = gy_F @ W_F^T
                m = lc; n = ck; kk = cout; lda = L; ldb = ck; ldc = lc
                dgemm(&nt, &tt, &m, &n, &kk, &one, &gyv[0, t0], &lda,
                      &wv[0, 0, 0], &ldb, &zero, gcols, &ldc)
                # scatter-add the column gradients back onto the input
                for i in range(cin):
                    for j in range(k):
                        row = i * k + j
                        src0 = t0 + j - (k - 1)
                        tstart = -src0 if src0 < 0 else 0
                        for t in range(tstart, lc):
                            gxv[i, src0 + t] += gcols[row * lc + t]
                t0 += lc
    finally:
        free(panel)
        free(gcols)
    return gx, gw, gb


def sgd_update(theta, grad, vel, double lr, double momentum, double weight_decay):
    """Single-pass v = m*v + g + wd*theta; theta -= lr*v (in place)."""
    cdef double[::1] t = theta.reshape(-1)
    cdef double[::1] g = grad.reshape(-1)
    cdef double[::1] v = vel.reshape(-1)
    cdef Py_ssize_t i, n = t.shape[0]
    with nogil:
        for i in range(n):
            v[i] = momentum * v[i] + g[i] + weight_decay * t[i]
            t[i] -= lr * v[i]
