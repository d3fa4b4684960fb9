"""Kernel backend selection.

The compiled extension ``dgd._kernels`` is used when importable; set
``DGD_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from dgd import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DGD_PURE_PYTHON", "0") not in ("1", "true", "yes"):
    try:
        from dgd import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

nb_logpmf = _impl.nb_logpmf
nb_logpmf_backward = _impl.nb_logpmf_backward
gauss_logdens = _impl.gauss_logdens
gauss_logdens_backward = _impl.gauss_logdens_backward


def get_kernels(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from dgd import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
