"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set ``CHARPOSE_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CHARPOSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

unfold3d = _impl.unfold3d
fold3d = _impl.fold3d
box_smooth3d = _impl.box_smooth3d
nms3d = _impl.nms3d
trilinear = _impl.trilinear


def backends():
    """Available kernel modules by name, for benchmarks and cross-checks."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
