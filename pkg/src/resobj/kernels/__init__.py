"""Convolution kernel backends.

The compiled Cython backend is used when built; otherwise the numpy
fallback. Set RESOBJ_KERNELS=python (or =compiled) to force one.
"""

import os

import numpy as np

from resobj.kernels import convpy


def _load_compiled():
    from resobj.kernels import _convcy

    return _convcy


def get_backend(name):
    if name == "python":
        return convpy
    if name == "compiled":
        return _load_compiled()
    raise ValueError(f"unknown kernel backend {name!r}")


_forced = os.environ.get("RESOBJ_KERNELS", "").lower()
if _forced in ("python", "py"):
    _impl, BACKEND = convpy, "python"
elif _forced in ("compiled", "cy"):
    _impl, BACKEND = _load_compiled(), "compiled"
elif _forced == "":
    try:
        _impl, BACKEND = _load_compiled(), "compiled"
    except ImportError:
        _impl, BACKEND = convpy, "python"
else:
    raise ValueError(f"unknown RESOBJ_KERNELS value {_forced!r}")


def conv2d_forward(x, w):
    return _impl.conv2d_forward(x, w)


def conv2d_backward_w(x, gy):
    return _impl.conv2d_backward_w(x, gy)


def conv2d_backward_x(gy, w):
    # Gradient wrt the input is a 'same' convolution of gy with the
    # spatially flipped kernel, in/out channels swapped.
    wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return _impl.conv2d_forward(np.ascontiguousarray(gy), wf)
