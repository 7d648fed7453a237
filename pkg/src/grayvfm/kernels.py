"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
versions are.  Setting ``GRAYVFM_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("GRAYVFM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"
    else:
        BACKEND = "cython"

choke_partials = _impl.choke_partials
steady_flags = _impl.steady_flags

__all__ = ["BACKEND", "choke_partials", "steady_flags"]
