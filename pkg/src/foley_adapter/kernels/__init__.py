"""Hot numerical kernels with a compiled fast path.

The compiled extension (built from ``_ckernels.pyx``) and the numpy
reference (``_numpy_kernels``) implement the same contracts.  Which one
backs this module is chosen at import time from the environment variable
``FOLEY_ADAPTER_KERNELS``:

* ``auto`` (default): use the extension when importable, else numpy.
* ``cython``: require the extension; fail loudly if it is missing.
* ``numpy``: force the reference implementation.

Both implementations stay importable directly for parity tests and for
the benchmark, regardless of the selected backend.
"""

import os

import numpy as np

from . import _numpy_kernels as _np_impl

_choice = os.environ.get("FOLEY_ADAPTER_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "cython", "numpy"):
    raise RuntimeError(
        "FOLEY_ADAPTER_KERNELS must be one of auto/cython/numpy, got %r" % _choice
    )

_c_impl = None
if _choice in ("auto", "cython"):
    try:
        from . import _ckernels as _c_impl
    except ImportError:
        if _choice == "cython":
            raise
        _c_impl = None

BACKEND = "numpy" if _c_impl is None else "cython"


def backend_name():
    """Name of the active backend, ``"cython"`` or ``"numpy"``."""
    return BACKEND


if _c_impl is None:
    layer_norm_forward = _np_impl.layer_norm_forward
    layer_norm_backward = _np_impl.layer_norm_backward
    softmax_rows = _np_impl.softmax_rows
    softmax_rows_backward = _np_impl.softmax_rows_backward
    relu_forward = _np_impl.relu_forward
    relu_backward = _np_impl.relu_backward
    gelu_forward = _np_impl.gelu_forward
    gelu_backward = _np_impl.gelu_backward
    dropout_apply = _np_impl.dropout_apply
    adamw_update = _np_impl.adamw_update
else:
    # The extension wants flat contiguous buffers for the elementwise
    # kernels; these wrappers restore the any-shape numpy semantics.
    def layer_norm_forward(x, gain, bias, eps):
        return _c_impl.layer_norm_forward(x, gain, bias, eps)

    def layer_norm_backward(dy, x, mean, rstd, gain):
        return _c_impl.layer_norm_backward(
            np.ascontiguousarray(dy), x, mean, rstd, gain
        )

    def softmax_rows(x):
        return _c_impl.softmax_rows(x)

    def softmax_rows_backward(dp, p):
        return _c_impl.softmax_rows_backward(np.ascontiguousarray(dp), p)

    def relu_forward(x):
        return _c_impl.relu_forward(x.ravel()).reshape(x.shape)

    def relu_backward(dy, x):
        flat = _c_impl.relu_backward(np.ascontiguousarray(dy).ravel(), x.ravel())
        return flat.reshape(x.shape)

    def gelu_forward(x):
        return _c_impl.gelu_forward(x.ravel()).reshape(x.shape)

    def gelu_backward(dy, x):
        flat = _c_impl.gelu_backward(np.ascontiguousarray(dy).ravel(), x.ravel())
        return flat.reshape(x.shape)

    def dropout_apply(x, uniform, rate):
        y, mult = _c_impl.dropout_apply(x.ravel(), uniform.ravel(), rate)
        return y.reshape(x.shape), mult.reshape(x.shape)

    def adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
        # reshape(-1) must alias the originals or the in-place update is lost
        assert param.flags["C_CONTIGUOUS"] and m.flags["C_CONTIGUOUS"]
        assert v.flags["C_CONTIGUOUS"]
        _c_impl.adamw_update(
            param.reshape(-1),
            np.ascontiguousarray(grad).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            int(step),
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        )

    for _f in (
        layer_norm_forward,
        layer_norm_backward,
        softmax_rows,
        softmax_rows_backward,
        relu_forward,
        relu_backward,
        gelu_forward,
        gelu_backward,
        dropout_apply,
        adamw_update,
    ):
        _f.__doc__ = getattr(_np_impl, _f.__name__).__doc__
    del _f
