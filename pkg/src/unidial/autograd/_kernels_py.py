"""Pure-numpy versions of the fused kernels in ``_kernels.pyx``.

Same signatures and semantics; selected automatically when the compiled
extension is unavailable or ``UNIDIAL_PURE_PYTHON=1`` is set.
"""
import numpy as np

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def layer_norm_rows(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    d = x - mean
    var = (d * d).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_rows_backward(gy, xhat, rstd, gain):
    gxh = gy * gain
    s1 = gxh.mean(axis=1, keepdims=True)
    s2 = (gxh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxh - s1 - xhat * s2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_backward(x, gy):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * d
