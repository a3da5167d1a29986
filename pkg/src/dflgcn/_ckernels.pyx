# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: temporal convolution through direct BLAS calls on
strided sub-matrices (no im2col, no padding copy), fused batch norm, and the
sequential per-frame body-axis computation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double DEGENERATE_NORM = 1e-8


cdef inline void gemm_rm(bint ta, bint tb, int m, int n, int k, double alpha,
                         double* a, int lda, double* b, int ldb, double beta,
                         double* c, int ldc) noexcept nogil:
    # row-major C[m, n] = alpha * op(A) @ op(B) + beta * C, via column-major C^T = op(B)^T op(A)^T
    cdef char opa = b'T' if ta else b'N'
    cdef char opb = b'T' if tb else b'N'
    dgemm(&opb, &opa, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef inline void valid_range(int t, int t_out, int k, int stride, int pad,
                             int* lo, int* hi) noexcept nogil:
    # output frames t' whose source frame t' * stride + k - pad lies in [0, t)
    cdef int first = pad - k
    if first > 0:
        lo[0] = (first + stride - 1) // stride
    else:
        lo[0] = 0
    cdef int last = t - 1 + pad - k
    if last < 0:
        hi[0] = 0
    else:
        hi[0] = last // stride + 1
    if hi[0] > t_out:
        hi[0] = t_out
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def temporal_conv_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] w, int stride, int pad):
    cdef int b_n = x.shape[0], c = x.shape[1], t = x.shape[2], v = x.shape[3]
    cdef int k_size = w.shape[0], o = w.shape[1]
    cdef int t_out = (t + 2 * pad - k_size) // stride + 1
    y_arr = np.zeros((b_n, o, t_out, v))
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[:, ::1] g
    cdef int b, k, lo, hi, n, ci, tp, vi, src
    cdef int ldx = t * v, ldy = t_out * v
    if stride != 1:
        g = np.empty((c, t_out * v))
    with nogil:
        for b in range(b_n):
            for k in range(k_size):
                valid_range(t, t_out, k, stride, pad, &lo, &hi)
                n = (hi - lo) * v
                if n <= 0:
                    continue
                if stride == 1:
                    gemm_rm(False, False, o, n, c, 1.0, <double*>&w[k, 0, 0], c,
                            <double*>&x[b, 0, lo + k - pad, 0], ldx, 1.0, &y[b, 0, lo, 0], ldy)
                else:
                    for ci in range(c):
                        for tp in range(lo, hi):
                            src = tp * stride + k - pad
                            for vi in range(v):
                                g[ci, (tp - lo) * v + vi] = x[b, ci, src, vi]
                    gemm_rm(False, False, o, n, c, 1.0, <double*>&w[k, 0, 0], c,
                            &g[0, 0], t_out * v, 1.0, &y[b, 0, lo, 0], ldy)
    return y_arr


def temporal_conv_backward(const double[:, :, :, ::1] dy, const double[:, :, :, ::1] x,
                           const double[:, :, ::1] w, int stride, int pad, double[:, :, ::1] dw):
    cdef int b_n = x.shape[0], c = x.shape[1], t = x.shape[2], v = x.shape[3]
    cdef int k_size = w.shape[0], o = w.shape[1]
    cdef int t_out = dy.shape[2]
    dx_arr = np.zeros((b_n, c, t, v))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, ::1] g, dg
    cdef int b, k, lo, hi, n, ci, tp, vi, src
    cdef int ldx = t * v, ldy = t_out * v
    if stride != 1:
        g = np.empty((c, t_out * v))
        dg = np.empty((c, t_out * v))
    with nogil:
        for b in range(b_n):
            for k in range(k_size):
                valid_range(t, t_out, k, stride, pad, &lo, &hi)
                n = (hi - lo) * v
                if n <= 0:
                    continue
                if stride == 1:
                    # dW_k += dY[:, range] @ X[:, range]^T
                    gemm_rm(False, True, o, c, n, 1.0, <double*>&dy[b, 0, lo, 0], ldy,
                            <double*>&x[b, 0, lo + k - pad, 0], ldx, 1.0, &dw[k, 0, 0], c)
                    # dX[:, range] += W_k^T @ dY[:, range]
                    gemm_rm(True, False, c, n, o, 1.0, <double*>&w[k, 0, 0], c,
                            <double*>&dy[b, 0, lo, 0], ldy, 1.0, &dx[b, 0, lo + k - pad, 0], ldx)
                else:
                    for ci in range(c):
                        for tp in range(lo, hi):
                            src = tp * stride + k - pad
                            for vi in range(v):
                                g[ci, (tp - lo) * v + vi] = x[b, ci, src, vi]
                    gemm_rm(False, True, o, c, n, 1.0, <double*>&dy[b, 0, lo, 0], ldy,
                            &g[0, 0], t_out * v, 1.0, &dw[k, 0, 0], c)
                    gemm_rm(True, False, c, n, o, 1.0, <double*>&w[k, 0, 0], c,
                            <double*>&dy[b, 0, lo, 0], ldy, 0.0, &dg[0, 0], t_out * v)
                    for ci in range(c):
                        for tp in range(lo, hi):
                            src = tp * stride + k - pad
                            for vi in range(v):
                                dx[b, ci, src, vi] += dg[ci, (tp - lo) * v + vi]
    return dx_arr


def batchnorm_forward_train(const double[:, :, ::1] x, const double[::1] gamma,
                            const double[::1] beta,
                            double eps):
    cdef int b_n = x.shape[0], c = x.shape[1], n = x.shape[2]
    y_arr = np.empty((b_n, c, n))
    xhat_arr = np.empty((b_n, c, n))
    mean_arr = np.zeros(c)
    var_arr = np.zeros(c)
    inv_arr = np.empty(c)
    cdef double[:, :, ::1] y = y_arr, xhat = xhat_arr
    cdef double[::1] mean = mean_arr, var = var_arr, inv = inv_arr
    cdef int b, ci, i
    cdef double s, d, m, istd, gm, bt, count = b_n * n
    with nogil:
        for ci in range(c):
            s = 0.0
            for b in range(b_n):
                for i in range(n):
                    s = s + x[b, ci, i]
            m = s / count
            s = 0.0
            for b in range(b_n):
                for i in range(n):
                    d = x[b, ci, i] - m
                    s = s + d * d
            mean[ci] = m
            var[ci] = s / count
            istd = 1.0 / sqrt(var[ci] + eps)
            inv[ci] = istd
            gm = gamma[ci]
            bt = beta[ci]
            for b in range(b_n):
                for i in range(n):
                    d = (x[b, ci, i] - m) * istd
                    xhat[b, ci, i] = d
                    y[b, ci, i] = gm * d + bt
    return y_arr, xhat_arr, mean_arr, var_arr, inv_arr


def batchnorm_backward_train(const double[:, :, ::1] dy, const double[:, :, ::1] xhat,
                             const double[::1] gamma, const double[::1] inv_std):
    cdef int b_n = dy.shape[0], c = dy.shape[1], n = dy.shape[2]
    dx_arr = np.empty((b_n, c, n))
    dgamma_arr = np.zeros(c)
    dbeta_arr = np.zeros(c)
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef int b, ci, i
    cdef double sg, sb, scale, mg, mb, count = b_n * n
    with nogil:
        for ci in range(c):
            sg = 0.0
            sb = 0.0
            for b in range(b_n):
                for i in range(n):
                    sg = sg + dy[b, ci, i] * xhat[b, ci, i]
                    sb = sb + dy[b, ci, i]
            dgamma[ci] = sg
            dbeta[ci] = sb
            scale = gamma[ci] * inv_std[ci]
            mg = sg / count
            mb = sb / count
            for b in range(b_n):
                for i in range(n):
                    dx[b, ci, i] = scale * (dy[b, ci, i] - mb - xhat[b, ci, i] * mg)
    return dx_arr, dgamma_arr, dbeta_arr


cdef inline void cross3(double* a, double* b, double* out) noexcept nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


def dif_axes(const double[:, :, ::1] positions, int center, int chest, int lshoulder, int rshoulder):
    cdef int t_n = positions.shape[0]
    axes_arr = np.empty((t_n, 3, 3))
    cdef double[:, :, ::1] axes = axes_arr
    cdef double up[3]
    cdef double across[3]
    cdef double xa[3]
    cdef double za[3]
    cdef double prev[9]
    cdef double n_up, n_x
    cdef int t, i
    for i in range(9):
        prev[i] = 1.0 if i % 4 == 0 else 0.0
    with nogil:
        for t in range(t_n):
            for i in range(3):
                up[i] = positions[t, chest, i] - positions[t, center, i]
                across[i] = positions[t, rshoulder, i] - positions[t, lshoulder, i]
            n_up = sqrt(up[0] * up[0] + up[1] * up[1] + up[2] * up[2])
            cross3(up, across, xa)
            n_x = sqrt(xa[0] * xa[0] + xa[1] * xa[1] + xa[2] * xa[2])
            if n_up >= DEGENERATE_NORM and n_x >= DEGENERATE_NORM:
                for i in range(3):
                    up[i] = up[i] / n_up
                    xa[i] = xa[i] / n_x
                cross3(xa, up, za)
                for i in range(3):
                    prev[i] = xa[i]
                    prev[3 + i] = up[i]
                    prev[6 + i] = za[i]
            for i in range(9):
                axes[t, i // 3, i % 3] = prev[i]
    return axes_arr


def dif_transform(const double[:, :, ::1] positions, int center, int chest, int lshoulder,
                  int rshoulder):
    cdef int t_n = positions.shape[0], v_n = positions.shape[1]
    axes_arr = dif_axes(positions, center, chest, lshoulder, rshoulder)
    cdef double[:, :, ::1] axes = axes_arr
    out_arr = np.empty((t_n, v_n, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef int t, j, i
    cdef double r0, r1, r2
    with nogil:
        for t in range(t_n):
            for j in range(v_n):
                r0 = positions[t, j, 0] - positions[t, center, 0]
                r1 = positions[t, j, 1] - positions[t, center, 1]
                r2 = positions[t, j, 2] - positions[t, center, 2]
                for i in range(3):
                    out[t, j, i] = axes[t, i, 0] * r0 + axes[t, i, 1] * r1 + axes[t, i, 2] * r2
    return out_arr, axes_arr
