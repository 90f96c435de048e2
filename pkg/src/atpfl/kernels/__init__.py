"""Hot kernels, compiled when available.

The Cython extension ``_ckernels`` is preferred; if it was not built, or
``ATPFL_PURE_PYTHON=1`` is set, the NumPy twins in ``_pykernels`` are used.
``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

KERNEL_NAMES = (
    "bn_forward_train",
    "bn_forward_frozen",
    "bn_backward_train",
    "bn_backward_frozen",
    "log_softmax",
    "entropy_grad",
    "ce_grad",
    "segment_dot",
    "scatter_axpy",
)


def _load_compiled():
    if os.environ.get("ATPFL_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def available_backends():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


_impl = _load_compiled()
BACKEND = "cython" if _impl is not None else "python"
if _impl is None:
    _impl = _pykernels

bn_forward_train = _impl.bn_forward_train
bn_forward_frozen = _impl.bn_forward_frozen
bn_backward_train = _impl.bn_backward_train
bn_backward_frozen = _impl.bn_backward_frozen
log_softmax = _impl.log_softmax
entropy_grad = _impl.entropy_grad
ce_grad = _impl.ce_grad
segment_dot = _impl.segment_dot
scatter_axpy = _impl.scatter_axpy
