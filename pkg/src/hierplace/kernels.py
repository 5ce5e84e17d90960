"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_kernels_py`` are used.  Setting
``HIERPLACE_KERNELS=numpy`` forces the fallback.
"""
import os

from . import _kernels_py

_forced = os.environ.get("HIERPLACE_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py

BACKEND = _impl.BACKEND
lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
softmax_xent = _impl.softmax_xent
scatter_add_rows = _impl.scatter_add_rows
average_intervals = _impl.average_intervals
adam_update = _impl.adam_update


def backends():
    """All importable kernel modules, keyed by backend name."""
    found = {"numpy": _kernels_py}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
