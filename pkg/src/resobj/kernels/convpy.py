"""Pure-numpy 3x3 convolution kernels (fallback backend).

Feature maps are [H, W, Cin] float64, kernels [3, 3, Cin, Cout],
stride 1, zero 'same' padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    # [H, W, Cin, 3, 3]; win[h, w, ci, dh, dw] == xp[h+dh, w+dw, ci]
    return sliding_window_view(xp, (3, 3), axis=(0, 1))


def conv2d_forward(x, w):
    win = _windows(x)
    return np.tensordot(win, w, axes=([3, 4, 2], [0, 1, 2]))


def conv2d_backward_w(x, gy):
    win = _windows(x)
    gw = np.tensordot(win, gy, axes=([0, 1], [0, 1]))  # [Cin, 3, 3, Cout]
    return np.ascontiguousarray(gw.transpose(1, 2, 0, 3))
