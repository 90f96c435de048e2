# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Signatures mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log

cnp.import_array()


def bn_forward_train(const double[:, ::1] x, const double[::1] gamma,
                     const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], f = x.shape[1], i, j
    y_arr = np.empty((n, f))
    xhat_arr = np.empty((n, f))
    mean_arr = np.zeros(f)
    var_arr = np.zeros(f)
    inv_arr = np.empty(f)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double[::1] inv = inv_arr
    cdef double c
    for i in range(n):
        for j in range(f):
            mean[j] += x[i, j]
    for j in range(f):
        mean[j] /= n
    for i in range(n):
        for j in range(f):
            c = x[i, j] - mean[j]
            var[j] += c * c
    for j in range(f):
        var[j] /= n
        inv[j] = 1.0 / sqrt(var[j] + eps)
    for i in range(n):
        for j in range(f):
            c = (x[i, j] - mean[j]) * inv[j]
            xhat[i, j] = c
            y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, mean_arr, var_arr, inv_arr


def bn_forward_frozen(const double[:, ::1] x, const double[::1] mean,
                      const double[::1] var, const double[::1] gamma,
                      const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], f = x.shape[1], i, j
    y_arr = np.empty((n, f))
    xhat_arr = np.empty((n, f))
    inv_arr = np.empty(f)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef double c
    for j in range(f):
        inv[j] = 1.0 / sqrt(var[j] + eps)
    for i in range(n):
        for j in range(f):
            c = (x[i, j] - mean[j]) * inv[j]
            xhat[i, j] = c
            y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, inv_arr


def bn_backward_train(const double[:, ::1] dy, const double[:, ::1] xhat,
                      const double[::1] gamma, const double[::1] inv_std):
    cdef Py_ssize_t n = dy.shape[0], f = dy.shape[1], i, j
    dx_arr = np.empty((n, f))
    dgamma_arr = np.zeros(f)
    dbeta_arr = np.zeros(f)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double dn = <double>n
    for i in range(n):
        for j in range(f):
            dbeta[j] += dy[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
    # sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
    for i in range(n):
        for j in range(f):
            dx[i, j] = (inv_std[j] / dn) * gamma[j] * (
                dn * dy[i, j] - dbeta[j] - xhat[i, j] * dgamma[j])
    return dx_arr, dgamma_arr, dbeta_arr


def bn_backward_frozen(const double[:, ::1] dy, const double[:, ::1] xhat,
                       const double[::1] gamma, const double[::1] inv_std):
    cdef Py_ssize_t n = dy.shape[0], f = dy.shape[1], i, j
    dx_arr = np.empty((n, f))
    dgamma_arr = np.zeros(f)
    dbeta_arr = np.zeros(f)
    dmean_arr = np.empty(f)
    dvar_arr = np.empty(f)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double[::1] dmean = dmean_arr
    cdef double[::1] dvar = dvar_arr
    for i in range(n):
        for j in range(f):
            dbeta[j] += dy[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dx[i, j] = dy[i, j] * gamma[j] * inv_std[j]
    for j in range(f):
        dmean[j] = -dbeta[j] * gamma[j] * inv_std[j]
        dvar[j] = -0.5 * dgamma[j] * gamma[j] * inv_std[j] * inv_std[j]
    return dx_arr, dgamma_arr, dbeta_arr, dmean_arr, dvar_arr


cdef void _log_softmax_row(const double[:, ::1] z, Py_ssize_t i,
                           double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t c, k = z.shape[1]
    cdef double m = z[i, 0], s = 0.0
    for c in range(1, k):
        if z[i, c] > m:
            m = z[i, c]
    for c in range(k):
        s += exp(z[i, c] - m)
    s = log(s)
    for c in range(k):
        out[i, c] = z[i, c] - m - s


def log_softmax(const double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], i
    out_arr = np.empty((n, logits.shape[1]))
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        _log_softmax_row(logits, i, out)
    return out_arr


def entropy_grad(const double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], k = logits.shape[1], i, c
    logp_arr = np.empty((n, k))
    p_arr = np.empty((n, k))
    d_arr = np.empty((n, k))
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] d = d_arr
    cdef double ent, total = 0.0
    for i in range(n):
        _log_softmax_row(logits, i, logp)
        ent = 0.0
        for c in range(k):
            p[i, c] = exp(logp[i, c])
            ent -= p[i, c] * logp[i, c]
        total += ent
        for c in range(k):
            d[i, c] = -p[i, c] * (logp[i, c] + ent) / n
    return p_arr, total / n, d_arr


def ce_grad(const double[:, ::1] logits, const long long[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], k = logits.shape[1], i, c
    logp_arr = np.empty((n, k))
    p_arr = np.empty((n, k))
    d_arr = np.empty((n, k))
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] d = d_arr
    cdef double total = 0.0
    for i in range(n):
        _log_softmax_row(logits, i, logp)
        total -= logp[i, labels[i]]
        for c in range(k):
            p[i, c] = exp(logp[i, c])
            d[i, c] = p[i, c] / n
        d[i, labels[i]] -= 1.0 / n
    return p_arr, total / n, d_arr


def segment_dot(const double[::1] h, const double[::1] g,
                const long long[::1] offsets, const long long[::1] lengths):
    cdef Py_ssize_t m = offsets.shape[0], i, j
    out_arr = np.empty(m)
    cdef double[::1] out = out_arr
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(offsets[i], offsets[i] + lengths[i]):
            acc += h[j] * g[j]
        out[i] = acc
    return out_arr


def scatter_axpy(const double[::1] w, const double[::1] alpha, const double[::1] h,
                 const long long[::1] offsets, const long long[::1] lengths):
    cdef Py_ssize_t m = offsets.shape[0], i, j
    out_arr = np.array(w, copy=True)
    cdef double[::1] out = out_arr
    cdef double a
    for i in range(m):
        a = alpha[i]
        if a == 0.0:
            continue
        for j in range(offsets[i], offsets[i] + lengths[i]):
            out[j] = w[j] + a * h[j]
    return out_arr
