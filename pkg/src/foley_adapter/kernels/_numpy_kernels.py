"""Reference numpy implementation of the hot kernels.

Semantics contract shared with the compiled twin (``_ckernels``):
row statistics are accumulated in float64 regardless of input dtype and
results are cast back to the input dtype.  Inputs are 2-D contiguous
arrays unless noted; reshaping is the caller's job.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def layer_norm_forward(x, gain, bias, eps):
    """Per-row normalization with affine. Returns (y, mean, rstd)."""
    mean = x.mean(axis=1, dtype=np.float64)
    var = np.square(x - mean[:, None]).mean(axis=1, dtype=np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_backward(dy, x, mean, rstd, gain):
    """Gradient of layer_norm_forward. Returns (dx, dgain, dbias)."""
    xhat = (x - mean[:, None].astype(x.dtype)) * rstd[:, None].astype(x.dtype)
    dxhat = dy * gain
    # dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) per row
    m1 = dxhat.mean(axis=1, dtype=np.float64)[:, None]
    m2 = (dxhat * xhat).mean(axis=1, dtype=np.float64)[:, None]
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0, dtype=np.float64)
    dbias = dy.sum(axis=0, dtype=np.float64)
    return (dx.astype(x.dtype, copy=False), dgain.astype(x.dtype), dbias.astype(x.dtype))


def softmax_rows(x):
    """Numerically stable softmax over the last axis of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(dp, p):
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, np.zeros((), dtype=x.dtype))


def gelu_forward(x):
    """tanh-form gaussian error linear unit."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_backward(dy, x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return (dy * grad).astype(x.dtype, copy=False)


def dropout_apply(x, uniform, rate):
    """Mask x with pre-drawn uniforms; kept entries rescaled by 1/(1-rate).

    Returns (y, multiplier) where multiplier is reused by the backward pass.
    """
    scale = 1.0 / (1.0 - rate)
    multiplier = np.where(uniform >= rate, scale, 0.0).astype(x.dtype)
    return x * multiplier, multiplier


def adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """In-place decoupled-weight-decay adaptive moment update.

    ``step`` is the 1-based update count used for bias correction; decay is
    applied directly to the parameter, not folded into the gradient.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
