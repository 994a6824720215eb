"""Backend selection for the per-cell likelihood kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``ZIGPANEL_PURE=1`` to force the fallback.
"""
import os

from . import _pykernel

BACKEND = "python"
_impl = _pykernel

if not os.environ.get("ZIGPANEL_PURE"):
    try:
        from . import _ckernel as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernel

loglik_grad = _impl.loglik_grad
cell_weights = _impl.cell_weights


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernel
    if name == "cython":
        from . import _ckernel
        return _ckernel
    raise ValueError(f"unknown kernel backend {name!r}")
