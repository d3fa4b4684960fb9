# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: negative binomial log-pmf and diagonal Gaussian
component log-densities, each with a fused backward pass.

Function signatures match ``dgd._kernels_py`` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, lgamma

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef inline double _digamma(double x) noexcept nogil:
    # recurrence up to x >= 10, then the asymptotic series
    cdef double result = 0.0
    cdef double f
    while x < 10.0:
        result -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    result += log(x) - 0.5 / x - f * (1.0 / 12 - f * (1.0 / 120 - f * (
        1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))))
    return result


def nb_logpmf(x, mu, r):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t B = mv.shape[0], G = mv.shape[1], i, j
    out = np.empty((B, G), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double xi, m, rr
    with nogil:
        for i in range(B):
            for j in range(G):
                xi = xv[i, j]
                m = mv[i, j]
                rr = rv[j]
                ov[i, j] = (lgamma(xi + rr) - lgamma(rr) - lgamma(xi + 1.0)
                            - rr * log1p(m / rr)
                            + xi * (log(m) - log(rr + m)))
    return out


def nb_logpmf_backward(x, mu, r, g):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t B = mv.shape[0], G = mv.shape[1], i, j
    dmu = np.empty((B, G), dtype=np.float64)
    dr = np.zeros(G, dtype=np.float64)
    cdef double[:, ::1] dmv = dmu
    cdef double[::1] drv = dr
    cdef double xi, m, rr, gij, denom
    with nogil:
        for i in range(B):
            for j in range(G):
                xi = xv[i, j]
                m = mv[i, j]
                rr = rv[j]
                gij = gv[i, j]
                denom = rr + m
                dmv[i, j] = gij * (xi / m - (xi + rr) / denom)
                drv[j] += gij * (_digamma(xi + rr) - _digamma(rr)
                                 - log1p(m / rr) + (m - xi) / denom)
    return dmu, dr


def gauss_logdens(z, means, neg_log_var):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef const double[:, ::1] nv = np.ascontiguousarray(neg_log_var, dtype=np.float64)
    cdef Py_ssize_t B = zv.shape[0], K = mv.shape[0], M = mv.shape[1], b, k, d
    out = np.empty((B, K), dtype=np.float64)
    cdef double[:, ::1] ov = out
    prec_arr = np.exp(np.asarray(nv))
    const_arr = 0.5 * np.asarray(nv).sum(axis=1) - 0.5 * M * LOG_2PI
    cdef const double[:, ::1] pv = prec_arr
    cdef const double[::1] cv = const_arr
    cdef double quad, diff
    with nogil:
        for b in range(B):
            for k in range(K):
                quad = 0.0
                for d in range(M):
                    diff = zv[b, d] - mv[k, d]
                    quad += diff * diff * pv[k, d]
                ov[b, k] = cv[k] - 0.5 * quad
    return out


def gauss_logdens_backward(z, means, neg_log_var, g):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef const double[:, ::1] nv = np.ascontiguousarray(neg_log_var, dtype=np.float64)
    cdef const double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t B = zv.shape[0], K = mv.shape[0], M = mv.shape[1], b, k, d
    prec_arr = np.exp(np.asarray(nv))
    cdef const double[:, ::1] pv = prec_arr
    dz = np.zeros((B, M), dtype=np.float64)
    dmeans = np.zeros((K, M), dtype=np.float64)
    dnlv = np.zeros((K, M), dtype=np.float64)
    cdef double[:, ::1] dzv = dz
    cdef double[:, ::1] dmv = dmeans
    cdef double[:, ::1] dnv = dnlv
    cdef double diff, w, gbk
    with nogil:
        for b in range(B):
            for k in range(K):
                gbk = gv[b, k]
                for d in range(M):
                    diff = zv[b, d] - mv[k, d]
                    w = gbk * diff * pv[k, d]
                    dzv[b, d] -= w
                    dmv[k, d] += w
                    dnv[k, d] += gbk * (0.5 - 0.5 * diff * diff * pv[k, d])
    return dz, dmeans, dnlv
