"""Kernel backend selection.

The compiled Cython module is preferred. Set ``UNIDIAL_PURE_PYTHON=1`` to
force the numpy fallback (useful for benchmarking and debugging).
"""
import os

BACKEND = "python"

if os.environ.get("UNIDIAL_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from . import _kernels_py as _impl
else:
    from . import _kernels_py as _impl

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
