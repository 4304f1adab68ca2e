"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
reference kernels are used. ``CTNAS_KERNELS=python`` forces the fallback
and ``CTNAS_THREADS`` caps the number of threads the compiled loops use.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_python = _kernels_py
_compiled = None
if os.environ.get("CTNAS_KERNELS", "").lower() != "python":
    try:
        from . import _kernels_ext as _compiled  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        logger.info("compiled kernels unavailable, using numpy fallback")
        _compiled = None

if _compiled is not None:
    try:
        _compiled.set_num_threads(int(os.environ.get("CTNAS_THREADS", os.cpu_count() or 1)))
    except ValueError:
        _compiled.set_num_threads(1)

_active = _compiled if _compiled is not None else _python


def backend_name() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def has_compiled() -> bool:
    return _compiled is not None


def use(name: str) -> None:
    """Switch backend at runtime: ``"compiled"`` or ``"python"``."""
    global _active
    if name == "python":
        _active = _python
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def module(name: str = None):
    if name is None:
        return _active
    return _python if name == "python" else _compiled


def depthwise_forward(x, w, stride, dilation, padding, out_hw):
    return _active.depthwise_forward(x, w, stride, dilation, padding, out_hw)


def depthwise_backward(x, w, grad, stride, dilation, padding, need_input=True, need_weight=True):
    return _active.depthwise_backward(x, w, grad, stride, dilation, padding, need_input, need_weight)


def maxpool_forward(x, kernel, stride, padding, out_hw):
    return _active.maxpool_forward(x, kernel, stride, padding, out_hw)


def maxpool_backward(grad, arg, input_shape, kernel, stride, padding):
    return _active.maxpool_backward(grad, arg, input_shape, kernel, stride, padding)


def elu_forward(x, alpha):
    return _python.elu_forward(x, alpha)


def elu_backward(x, out, grad, alpha):
    return _python.elu_backward(x, out, grad, alpha)


def batchnorm_stats(x):
    return _active.batchnorm_stats(x)


def batchnorm_forward(x, mean, inv_std, gamma, beta):
    return _active.batchnorm_forward(x, mean, inv_std, gamma, beta)


def batchnorm_backward(grad, xhat, inv_std, gamma, training):
    return _active.batchnorm_backward(grad, xhat, inv_std, gamma, training)
