"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``PIMRL_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("PIMRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
stencil_periodic = _impl.stencil_periodic


def implementations():
    """Both kernel sets keyed by backend name (compiled only if built)."""
    impls = {"numpy": _fallback}
    try:
        from . import _core

        impls["compiled"] = _core
    except ImportError:
        pass
    return impls
