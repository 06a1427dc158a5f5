# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for periodic / valid cross-correlation.

The convolutions are lowered to a fused gather (im2col with periodic index
wrapping, no padded copy) followed by a single BLAS dgemm. The backward pass
for the input runs one dgemm and a fused scatter-add that folds the halo back
onto the periodic grid.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   double* A, int lda, double* B, int ldb,
                   double* C, int ldc, double beta) noexcept nogil:
    # row-major C[m,n] = op(A)[m,k] @ op(B)[k,n] + beta*C via the transposed
    # column-major product C^T = op(B)^T op(A)^T
    cdef char tra = b'T' if ta else b'N'
    cdef char trb = b'T' if tb else b'N'
    cdef double alpha = 1.0
    dgemm(&trb, &tra, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline int _out_extent(int n, int kk, int stride, bint periodic):
    if periodic:
        return (n + 2 * (kk // 2) - kk) // stride + 1
    return (n - kk) // stride + 1


cdef cnp.ndarray _index_table(int n, int kk, int nout, int stride, bint periodic):
    # table[i, o] = source index along one axis for kernel tap i, output o
    cdef cnp.ndarray[cnp.intp_t, ndim=2] tab = np.empty((kk, nout), dtype=np.intp)
    cdef int i, o, src, half = kk // 2
    for i in range(kk):
        for o in range(nout):
            if periodic:
                src = o * stride + i - half
                src = (src % n + n) % n
            else:
                src = o * stride + i
            tab[i, o] = src
    return tab


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] col,
                  const cnp.intp_t[:, ::1] rows, const cnp.intp_t[:, ::1] cols,
                  int kh, int kw, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t ci, i, j, oy, ox, r, p
    cdef Py_ssize_t Ci = x.shape[0]
    cdef Py_ssize_t sy
    for ci in range(Ci):
        for i in range(kh):
            for j in range(kw):
                r = (ci * kh + i) * kw + j
                p = 0
                for oy in range(Ho):
                    sy = rows[i, oy]
                    for ox in range(Wo):
                        col[r, p] = x[ci, sy, cols[j, ox]]
                        p += 1


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                   int stride=1, bint periodic=True):
    cdef int Ci = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = _out_extent(H, kh, stride, periodic)
    cdef int Wo = _out_extent(W, kw, stride, periodic)
    cdef int K = Ci * kh * kw, P = Ho * Wo
    rows = _index_table(H, kh, Ho, stride, periodic)
    cols = _index_table(W, kw, Wo, stride, periodic)
    cdef double[:, ::1] col = np.empty((K, P))
    _im2col(x, col, rows, cols, kh, kw, Ho, Wo)
    out = np.empty((Co, Ho, Wo))
    cdef double[:, :, ::1] y = out
    cdef const double[:, :, :, ::1] wv = w
    with nogil:
        _gemm_rm(False, False, Co, P, K, <double*>&wv[0, 0, 0, 0], K,
                 &col[0, 0], P, &y[0, 0, 0], P, 0.0)
    return out


def conv2d_backward_weight(const double[:, :, ::1] gy, const double[:, :, ::1] x,
                           int kh, int kw, int stride=1, bint periodic=True):
    cdef int Ci = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef int Co = gy.shape[0], Ho = gy.shape[1], Wo = gy.shape[2]
    cdef int K = Ci * kh * kw, P = Ho * Wo
    rows = _index_table(H, kh, Ho, stride, periodic)
    cols = _index_table(W, kw, Wo, stride, periodic)
    cdef double[:, ::1] col = np.empty((K, P))
    _im2col(x, col, rows, cols, kh, kw, Ho, Wo)
    out = np.empty((Co, Ci, kh, kw))
    cdef double[:, :, :, ::1] gw = out
    with nogil:
        # gw[Co,K] = gy[Co,P] @ col[K,P]^T
        _gemm_rm(False, True, Co, K, P, <double*>&gy[0, 0, 0], P,
                 &col[0, 0], P, &gw[0, 0, 0, 0], K, 0.0)
    return out


def conv2d_backward_input(const double[:, :, ::1] gy, const double[:, :, :, ::1] w,
                          int H, int W, int stride=1, bint periodic=True):
    cdef int Co = gy.shape[0], Ho = gy.shape[1], Wo = gy.shape[2]
    cdef int Ci = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int K = Ci * kh * kw, P = Ho * Wo
    rows_arr = _index_table(H, kh, Ho, stride, periodic)
    cols_arr = _index_table(W, kw, Wo, stride, periodic)
    cdef const cnp.intp_t[:, ::1] rows = rows_arr
    cdef const cnp.intp_t[:, ::1] cols = cols_arr
    cdef double[:, ::1] gcol = np.empty((K, P))
    with nogil:
        # gcol[K,P] = w[Co,K]^T @ gy[Co,P]
        _gemm_rm(True, False, K, P, Co, <double*>&w[0, 0, 0, 0], K,
                 <double*>&gy[0, 0, 0], P, &gcol[0, 0], P, 0.0)
    out = np.zeros((Ci, H, W))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t ci, i, j, oy, ox, r, p, sy
    with nogil:
        for ci in range(Ci):
            for i in range(kh):
                for j in range(kw):
                    r = (ci * kh + i) * kw + j
                    p = 0
                    for oy in range(Ho):
                        sy = rows[i, oy]
                        for ox in range(Wo):
                            gx[ci, sy, cols[j, ox]] += gcol[r, p]
                            p += 1
    return out


def stencil_periodic(const double[:, :, ::1] u, const double[:, ::1] s):
    """Apply one 2D stencil to every channel with periodic wrapping."""
    cdef int C = u.shape[0], H = u.shape[1], W = u.shape[2]
    cdef int kh = s.shape[0], kw = s.shape[1]
    cdef int ph = kh // 2, pw = kw // 2
    out = np.zeros((C, H, W))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t c, y, x, i, j, sy, off, lo, hi
    cdef double coef
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    coef = s[i, j]
                    if coef == 0.0:
                        continue
                    off = j - pw
                    # columns [lo, hi) read without wrapping
                    lo = -off if off < 0 else 0
                    hi = W - off if off > 0 else W
                    for y in range(H):
                        sy = (y + i - ph + H) % H
                        for x in range(lo):
                            o[c, y, x] += coef * u[c, sy, x + off + W]
                        for x in range(lo, hi):
                            o[c, y, x] += coef * u[c, sy, x + off]
                        for x in range(hi, W):
                            o[c, y, x] += coef * u[c, sy, x + off - W]
    return out
