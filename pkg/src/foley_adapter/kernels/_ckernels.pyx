# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``_numpy_kernels``; same contracts, fused loops.

Statistics accumulate in double for both float32 and float64 inputs so the
two backends agree to rounding error.
"""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh, pow

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, mu, rs, xh
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j]
        mu = acc / d
        acc = 0.0
        for j in range(d):
            acc += (x[i, j] - mu) * (x[i, j] - mu)
        rs = 1.0 / sqrt(acc / d + eps)
        mean[i] = <real> mu
        rstd[i] = <real> rs
        for j in range(d):
            xh = (x[i, j] - mu) * rs
            y[i, j] = <real> (xh * gain[j] + bias[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(real[:, ::1] dy, real[:, ::1] x, real[::1] mean,
                        real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m1, m2, xh, dxh
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xh
            dgain[j] += dy[i, j] * xh
            dbias[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dx[i, j] = <real> (rstd[i] * (dxh - m1 - xh * m2))
    return dx_arr, dgain_arr.astype(dtype), dbias_arr.astype(dtype)


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, acc
    dtype = np.float32 if real is float else np.float64
    p_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] p = p_arr
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        acc = 0.0
        for j in range(d):
            p[i, j] = <real> exp(x[i, j] - mx)
            acc += p[i, j]
        for j in range(d):
            p[i, j] = <real> (p[i, j] / acc)
    return p_arr


def softmax_rows_backward(real[:, ::1] dp, real[:, ::1] p):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += dp[i, j] * p[i, j]
        for j in range(d):
            dx[i, j] = <real> (p[i, j] * (dp[i, j] - inner))
    return dx_arr


def relu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    for i in range(n):
        y[i] = x[i] if x[i] > 0 else 0
    return y_arr


def relu_backward(real[::1] dy, real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] dx = dx_arr
    for i in range(n):
        dx[i] = dy[i] if x[i] > 0 else 0
    return dx_arr


def gelu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double xi, inner
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    for i in range(n):
        xi = x[i]
        inner = GELU_C * (xi + GELU_A * xi * xi * xi)
        y[i] = <real> (0.5 * xi * (1.0 + tanh(inner)))
    return y_arr


def gelu_backward(real[::1] dy, real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double xi, t, dinner, grad
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] dx = dx_arr
    for i in range(n):
        xi = x[i]
        t = tanh(GELU_C * (xi + GELU_A * xi * xi * xi))
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        grad = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner
        dx[i] = <real> (dy[i] * grad)
    return dx_arr


def dropout_apply(real[::1] x, double[::1] uniform, double rate):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double scale = 1.0 / (1.0 - rate)
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    mult_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    cdef real[::1] mult = mult_arr
    for i in range(n):
        if uniform[i] >= rate:
            mult[i] = <real> scale
        else:
            mult[i] = 0
        y[i] = x[i] * mult[i]
    return y_arr, mult_arr


def adamw_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                 long step, double lr, double beta1, double beta2,
                 double eps, double weight_decay):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double mi, vi, mhat, vhat
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * grad[i]
        vi = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        m[i] = <real> mi
        v[i] = <real> vi
        mhat = mi / bc1
        vhat = vi / bc2
        param[i] = <real> (param[i] - lr * (mhat / (sqrt(vhat) + eps)
                                            + weight_decay * param[i]))
