# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled attention kernel for packed float32 batches.

Query rows are processed in blocks; scores for a block are computed with
BLAS sgemm restricted to the block's allowed key span, so sliding-window
layers cost O(total * window) instead of O(total^2).  Softmax row sums
accumulate in double.  The backward pass recomputes probabilities (no
saved score matrices).  Single-threaded by design.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport expf
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()

DEF BQ = 128

KIND_GLOBAL = 0
KIND_WINDOW = 1
KIND_CAUSAL = 2


cdef char _N = b'N'
cdef char _T = b'T'


cdef inline void rm_gemm_nn(int m, int n, int k, float alpha,
                            const float* a, int lda, const float* b, int ldb,
                            float beta, float* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * A(m,k) @ B(k,n) + beta * C
    sgemm(&_N, &_N, &n, &m, &k, &alpha, <float*> b, &ldb, <float*> a, &lda, &beta, c, &ldc)


cdef inline void rm_gemm_nt(int m, int n, int k, float alpha,
                            const float* a, int lda, const float* b, int ldb,
                            float beta, float* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * A(m,k) @ B(n,k)^T + beta * C
    sgemm(&_T, &_N, &n, &m, &k, &alpha, <float*> b, &ldb, <float*> a, &lda, &beta, c, &ldc)


cdef inline void rm_gemm_tn(int m, int n, int k, float alpha,
                            const float* a, int lda, const float* b, int ldb,
                            float beta, float* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * A(k,m)^T @ B(k,n) + beta * C
    sgemm(&_N, &_T, &n, &m, &k, &alpha, <float*> b, &ldb, <float*> a, &lda, &beta, c, &ldc)


cdef inline void _block_span(int kind, int window, long lo, long hi,
                             long i0, int ib, long* blo, long* bhi) noexcept nogil:
    cdef long w2 = window // 2
    if kind == 1:  # sliding window
        blo[0] = i0 - w2 if i0 - w2 > lo else lo
        bhi[0] = i0 + ib - 1 + w2 + 1
        if bhi[0] > hi:
            bhi[0] = hi
    elif kind == 2:  # causal
        blo[0] = lo
        bhi[0] = i0 + ib
    else:  # global
        blo[0] = lo
        bhi[0] = hi


cdef inline void _row_span(int kind, int window, long lo, long hi,
                           long i, long* jlo, long* jhi) noexcept nogil:
    cdef long w2 = window // 2
    if kind == 1:
        jlo[0] = i - w2 if i - w2 > lo else lo
        jhi[0] = i + w2 + 1
        if jhi[0] > hi:
            jhi[0] = hi
    elif kind == 2:
        jlo[0] = lo
        jhi[0] = i + 1
    else:
        jlo[0] = lo
        jhi[0] = hi


cdef void _softmax_rows(float* s, int ib, int span, long i0, int lds,
                        int kind, int window, long lo, long hi, long blo) noexcept nogil:
    # In place: s holds a block's scores over columns [blo, blo+span).  After
    # the call each row holds probabilities, zeroed outside its allowed span.
    cdef long i, jlo, jhi
    cdef int r, c, c0, c1
    cdef float m, inv
    cdef double denom
    for r in range(ib):
        i = i0 + r
        _row_span(kind, window, lo, hi, i, &jlo, &jhi)
        c0 = <int> (jlo - blo)
        c1 = <int> (jhi - blo)
        m = s[r * lds + c0]
        for c in range(c0 + 1, c1):
            if s[r * lds + c] > m:
                m = s[r * lds + c]
        denom = 0.0
        for c in range(c0, c1):
            s[r * lds + c] = expf(s[r * lds + c] - m)
            denom += s[r * lds + c]
        inv = <float> (1.0 / denom)
        for c in range(c0, c1):
            s[r * lds + c] *= inv
        for c in range(0, c0):
            s[r * lds + c] = 0.0
        for c in range(c1, span):
            s[r * lds + c] = 0.0


def attn_forward(cnp.ndarray[cnp.float32_t, ndim=3] q,
                 cnp.ndarray[cnp.float32_t, ndim=3] k,
                 cnp.ndarray[cnp.float32_t, ndim=3] v,
                 cnp.ndarray[cnp.int64_t, ndim=1] boundaries,
                 int kind, int window, double scale):
    cdef int H = q.shape[0]
    cdef long T = q.shape[1]
    cdef int D = q.shape[2]
    cdef int n_seg = boundaries.shape[0] - 1
    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = np.empty_like(q)

    cdef long max_len = 0
    cdef int s
    for s in range(n_seg):
        if boundaries[s + 1] - boundaries[s] > max_len:
            max_len = boundaries[s + 1] - boundaries[s]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] sbuf_arr = np.empty((BQ, max_len), dtype=np.float32)
    cdef float* sbuf = <float*> sbuf_arr.data

    cdef float* qp = <float*> q.data
    cdef float* kp = <float*> k.data
    cdef float* vp = <float*> v.data
    cdef float* op = <float*> out.data
    cdef long lo, hi, i0, blo, bhi, plane
    cdef int h, ib, span, lds = <int> max_len
    cdef float alpha = <float> scale

    with nogil:
        for s in range(n_seg):
            lo = boundaries[s]
            hi = boundaries[s + 1]
            for h in range(H):
                plane = (<long> h) * T * D
                i0 = lo
                while i0 < hi:
                    ib = <int> (hi - i0 if hi - i0 < BQ else BQ)
                    _block_span(kind, window, lo, hi, i0, ib, &blo, &bhi)
                    span = <int> (bhi - blo)
                    rm_gemm_nt(ib, span, D, alpha,
                               qp + plane + i0 * D, D,
                               kp + plane + blo * D, D,
                               0.0, sbuf, lds)
                    _softmax_rows(sbuf, ib, span, i0, lds, kind, window, lo, hi, blo)
                    rm_gemm_nn(ib, D, span, 1.0,
                               sbuf, lds,
                               vp + plane + blo * D, D,
                               0.0, op + plane + i0 * D, D)
                    i0 += ib
    return out


def attn_backward(cnp.ndarray[cnp.float32_t, ndim=3] q,
                  cnp.ndarray[cnp.float32_t, ndim=3] k,
                  cnp.ndarray[cnp.float32_t, ndim=3] v,
                  cnp.ndarray[cnp.float32_t, ndim=3] d_out,
                  cnp.ndarray[cnp.int64_t, ndim=1] boundaries,
                  int kind, int window, double scale):
    cdef int H = q.shape[0]
    cdef long T = q.shape[1]
    cdef int D = q.shape[2]
    cdef int n_seg = boundaries.shape[0] - 1
    cdef cnp.ndarray[cnp.float32_t, ndim=3] dq = np.zeros_like(q)
    cdef cnp.ndarray[cnp.float32_t, ndim=3] dk = np.zeros_like(k)
    cdef cnp.ndarray[cnp.float32_t, ndim=3] dv = np.zeros_like(v)

    cdef long max_len = 0
    cdef int s
    for s in range(n_seg):
        if boundaries[s + 1] - boundaries[s] > max_len:
            max_len = boundaries[s + 1] - boundaries[s]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] pbuf_arr = np.empty((BQ, max_len), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] gbuf_arr = np.empty((BQ, max_len), dtype=np.float32)
    cdef float* pbuf = <float*> pbuf_arr.data
    cdef float* gbuf = <float*> gbuf_arr.data

    cdef float* qp = <float*> q.data
    cdef float* kp = <float*> k.data
    cdef float* vp = <float*> v.data
    cdef float* gp = <float*> d_out.data
    cdef float* dqp = <float*> dq.data
    cdef float* dkp = <float*> dk.data
    cdef float* dvp = <float*> dv.data

    cdef long lo, hi, i0, blo, bhi, plane
    cdef int h, ib, span, r, c, lds = <int> max_len
    cdef float alpha = <float> scale
    cdef double row

    with nogil:
        for s in range(n_seg):
            lo = boundaries[s]
            hi = boundaries[s + 1]
            for h in range(H):
                plane = (<long> h) * T * D
                i0 = lo
                while i0 < hi:
                    ib = <int> (hi - i0 if hi - i0 < BQ else BQ)
                    _block_span(kind, window, lo, hi, i0, ib, &blo, &bhi)
                    span = <int> (bhi - blo)
                    # probabilities, recomputed exactly as in the forward pass
                    rm_gemm_nt(ib, span, D, alpha,
                               qp + plane + i0 * D, D,
                               kp + plane + blo * D, D,
                               0.0, pbuf, lds)
                    _softmax_rows(pbuf, ib, span, i0, lds, kind, window, lo, hi, blo)
                    # dV[span] += P^T @ dO
                    rm_gemm_tn(span, D, ib, 1.0,
                               pbuf, lds,
                               gp + plane + i0 * D, D,
                               1.0, dvp + plane + blo * D, D)
                    # dP = dO @ V^T
                    rm_gemm_nt(ib, span, D, 1.0,
                               gp + plane + i0 * D, D,
                               vp + plane + blo * D, D,
                               0.0, gbuf, lds)
                    # dS = P * (dP - rowsum(P * dP)) * scale; P is zero outside
                    # each row's span, so dS vanishes there automatically
                    for r in range(ib):
                        row = 0.0
                        for c in range(span):
                            row += (<double> pbuf[r * lds + c]) * gbuf[r * lds + c]
                        for c in range(span):
                            gbuf[r * lds + c] = pbuf[r * lds + c] * (gbuf[r * lds + c] - <float> row) * alpha
                    # dQ[block] += dS @ K[span]
                    rm_gemm_nn(ib, D, span, 1.0,
                               gbuf, lds,
                               kp + plane + blo * D, D,
                               1.0, dqp + plane + i0 * D, D)
                    # dK[span] += dS^T @ Q[block]
                    rm_gemm_tn(span, D, ib, 1.0,
                               gbuf, lds,
                               qp + plane + i0 * D, D,
                               1.0, dkp + plane + blo * D, D)
                    i0 += ib
    return dq, dk, dv
