# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, sqrt, tanh

cdef extern from "_fastmath.h":
    void hp_lstm_forward_f(float *z, const float *c_prev, float *c, float *tc,
                           float *h, Py_ssize_t B, Py_ssize_t H) nogil
    double hp_softmax_row_f(float *row, Py_ssize_t V, Py_ssize_t t, double scale,
                            int want_grad) nogil
    void hp_adam_f(float *value, const float *grad, float *m, float *v, Py_ssize_t n,
                   float beta1, float one_m_beta1, float beta2, float one_m_beta2,
                   float step, float c2, float eps) nogil
    void hp_adam_d(double *value, const double *grad, double *m, double *v, Py_ssize_t n,
                   double beta1, double one_m_beta1, double beta2, double one_m_beta2,
                   double step, double c2, double eps) nogil

cnp.import_array()

BACKEND = "cython"


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def lstm_forward(floating[:, ::1] z, floating[:, ::1] c_prev):
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, k
    dtype = np.float32 if floating is float else np.float64
    c_arr = np.empty((B, H), dtype=dtype)
    tc_arr = np.empty((B, H), dtype=dtype)
    h_arr = np.empty((B, H), dtype=dtype)
    cdef floating[:, ::1] c = c_arr
    cdef floating[:, ::1] tc = tc_arr
    cdef floating[:, ::1] h = h_arr
    cdef floating i, f, g, o, cc, t
    if floating is float:
        with nogil:
            hp_lstm_forward_f(&z[0, 0], &c_prev[0, 0], &c[0, 0], &tc[0, 0], &h[0, 0], B, H)
        return np.asarray(z), c_arr, tc_arr, h_arr
    with nogil:
        for b in range(B):
            for k in range(H):
                i = <floating>_sigmoid(z[b, k])
                f = <floating>_sigmoid(z[b, H + k])
                g = <floating>tanh(z[b, 2 * H + k])
                o = <floating>_sigmoid(z[b, 3 * H + k])
                z[b, k] = i
                z[b, H + k] = f
                z[b, 2 * H + k] = g
                z[b, 3 * H + k] = o
                cc = f * c_prev[b, k] + i * g
                t = <floating>tanh(cc)
                c[b, k] = cc
                tc[b, k] = t
                h[b, k] = o * t
    return np.asarray(z), c_arr, tc_arr, h_arr


def lstm_backward(floating[:, ::1] acts, floating[:, ::1] c_prev,
                  floating[:, ::1] tc, floating[:, ::1] dh, dc_in):
    cdef Py_ssize_t B = c_prev.shape[0], H = c_prev.shape[1], b, k
    dtype = np.float32 if floating is float else np.float64
    dz_arr = np.empty((B, 4 * H), dtype=dtype)
    dcp_arr = np.empty((B, H), dtype=dtype)
    cdef floating[:, ::1] dz = dz_arr
    cdef floating[:, ::1] dcp = dcp_arr
    cdef floating[:, ::1] dc
    cdef bint has_dc = dc_in is not None
    if has_dc:
        dc = dc_in
    cdef floating i, f, g, o, t, dct, dhv
    with nogil:
        for b in range(B):
            for k in range(H):
                i = acts[b, k]
                f = acts[b, H + k]
                g = acts[b, 2 * H + k]
                o = acts[b, 3 * H + k]
                t = tc[b, k]
                dhv = dh[b, k]
                dct = dhv * o * (1 - t * t)
                if has_dc:
                    dct = dct + dc[b, k]
                dz[b, k] = dct * g * i * (1 - i)
                dz[b, H + k] = dct * c_prev[b, k] * f * (1 - f)
                dz[b, 2 * H + k] = dct * i * (1 - g * g)
                dz[b, 3 * H + k] = dhv * t * o * (1 - o)
                dcp[b, k] = dct * f
    return dz_arr, dcp_arr


def softmax_xent(floating[:, ::1] logits, targets, scale=None):
    cdef Py_ssize_t N = logits.shape[0], V = logits.shape[1], n, v
    cdef cnp.int64_t[::1] tg = np.ascontiguousarray(targets, dtype=np.int64)
    nll_arr = np.empty(N, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] nll = nll_arr
    cdef double[::1] sc
    cdef bint want_grad = scale is not None
    if want_grad:
        sc = np.ascontiguousarray(scale, dtype=np.float64)
    cdef double m, s, inv, w
    cdef cnp.int64_t t
    if floating is float:
        with nogil:
            for n in range(N):
                nll[n] = <float>hp_softmax_row_f(&logits[n, 0], V, tg[n],
                                                 sc[n] if want_grad else 0.0, want_grad)
        if want_grad:
            return nll_arr, np.asarray(logits)
        return nll_arr, None
    with nogil:
        for n in range(N):
            t = tg[n]
            m = logits[n, 0]
            for v in range(1, V):
                if logits[n, v] > m:
                    m = logits[n, v]
            s = 0.0
            for v in range(V):
                s += exp(logits[n, v] - m)
            nll[n] = <floating>(log(s) + m - logits[n, t])
            if want_grad:
                inv = 1.0 / s
                w = sc[n]
                for v in range(V):
                    logits[n, v] = <floating>(exp(logits[n, v] - m) * inv * w)
                logits[n, t] = <floating>(logits[n, t] - w)
    if want_grad:
        return nll_arr, np.asarray(logits)
    return nll_arr, None


def scatter_add_rows(floating[:, ::1] dst, ids, floating[:, ::1] src):
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t N = idx.shape[0], D = dst.shape[1], n, k
    cdef cnp.int64_t r
    with nogil:
        for n in range(N):
            r = idx[n]
            for k in range(D):
                dst[r, k] += src[n, k]


def average_intervals(floating[:, ::1] mat, starts, ends, Py_ssize_t c0, Py_ssize_t c1):
    cdef cnp.int64_t[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef cnp.int64_t[::1] en = np.ascontiguousarray(ends, dtype=np.int64)
    cdef Py_ssize_t R = st.shape[0], r, j, k
    cdef double base, acc, mean
    cdef floating out
    if c1 <= c0:
        return
    with nogil:
        for r in range(R):
            for k in range(c0, c1):
                base = mat[st[r], k]
                acc = 0.0
                for j in range(st[r], en[r]):
                    acc = acc + (<double>mat[j, k] - base)
                mean = base + acc / <double>(en[r] - st[r])
                out = <floating>mean
                for j in range(st[r], en[r]):
                    mat[j, k] = out


def adam_update(floating[::1] value, floating[::1] grad, floating[::1] m, floating[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    """In-place bias-corrected Adam on flat arrays; ``step`` is the 1-based count."""
    cdef Py_ssize_t n = value.shape[0]
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    if n == 0:
        return
    if floating is float:
        with nogil:
            hp_adam_f(&value[0], &grad[0], &m[0], &v[0], n, <float>beta1, <float>(1.0 - beta1),
                      <float>beta2, <float>(1.0 - beta2), <float>(lr / c1), <float>c2, <float>eps)
    else:
        with nogil:
            hp_adam_d(&value[0], &grad[0], &m[0], &v[0], n, beta1, 1.0 - beta1,
                      beta2, 1.0 - beta2, lr / c1, c2, eps)
