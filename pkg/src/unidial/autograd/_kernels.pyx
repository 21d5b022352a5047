# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels: softmax, layer norm and tanh-GELU.

All functions take C-contiguous 2-D (or flat for GELU) float32/float64
arrays and return freshly allocated outputs. Loops run in a fixed order so
results are bitwise reproducible for a given input.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def softmax_rows(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_np = np.empty((n, m), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_np
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            if floating is float:
                out[i, j] = expf(<float>(x[i, j] - mx))
            else:
                out[i, j] = exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(m):
            out[i, j] = <floating>(out[i, j] / s)
    return out_np


def softmax_rows_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out_np = np.empty((n, m), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] out = out_np
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out_np


def layer_norm_rows(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dt = np.asarray(x).dtype
    out_np = np.empty((n, m), dtype=dt)
    xhat_np = np.empty((n, m), dtype=dt)
    rstd_np = np.empty(n, dtype=dt)
    cdef floating[:, ::1] out = out_np
    cdef floating[:, ::1] xhat = xhat_np
    cdef floating[::1] rstd = rstd_np
    cdef double mean, var, d, r
    for i in range(n):
        mean = 0.0
        for j in range(m):
            mean += x[i, j]
        mean /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mean
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <floating>r
        for j in range(m):
            xhat[i, j] = <floating>((x[i, j] - mean) * r)
            out[i, j] = <floating>(xhat[i, j] * gain[j] + bias[j])
    return out_np, xhat_np, rstd_np


def layer_norm_rows_backward(floating[:, ::1] gy, floating[:, ::1] xhat,
                             floating[::1] rstd, floating[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], m = gy.shape[1], i, j
    dt = np.asarray(gy).dtype
    gx_np = np.empty((n, m), dtype=dt)
    ggain_acc = np.zeros(m, dtype=np.float64)
    gbias_acc = np.zeros(m, dtype=np.float64)
    cdef floating[:, ::1] gx = gx_np
    cdef double[::1] gg = ggain_acc
    cdef double[::1] gb = gbias_acc
    cdef double s1, s2, gxh
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            gxh = gy[i, j] * gain[j]
            s1 += gxh
            s2 += gxh * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        s1 /= m
        s2 /= m
        for j in range(m):
            gxh = gy[i, j] * gain[j]
            gx[i, j] = <floating>(rstd[i] * (gxh - s1 - xhat[i, j] * s2))
    return gx_np, ggain_acc.astype(dt), gbias_acc.astype(dt)


def gelu(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_np
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <floating>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
    return out_np


def gelu_backward(floating[::1] x, floating[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_np
    cdef double v, t, dt
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        dt = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = <floating>(gy[i] * dt)
    return out_np
