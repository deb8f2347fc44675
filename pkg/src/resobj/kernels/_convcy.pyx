# 3x3 convolution kernels, compiled backend. Same contract as convpy:
# x [H, W, Cin] float64 C-contiguous, w [3, 3, Cin, Cout], stride 1,
# zero 'same' padding.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], Cin = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[3]
    y_arr = np.zeros((H, W, Cout), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t h, ww, dh, dw, ih, iw, ci, co
    cdef double xv
    for h in range(H):
        for dh in range(3):
            ih = h + dh - 1
            if ih < 0 or ih >= H:
                continue
            for ww in range(W):
                for dw in range(3):
                    iw = ww + dw - 1
                    if iw < 0 or iw >= W:
                        continue
                    for ci in range(Cin):
                        xv = x[ih, iw, ci]
                        for co in range(Cout):
                            y[h, ww, co] += xv * w[dh, dw, ci, co]
    return y_arr


def conv2d_backward_w(double[:, :, ::1] x, double[:, :, ::1] gy):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], Cin = x.shape[2]
    cdef Py_ssize_t Cout = gy.shape[2]
    gw_arr = np.zeros((3, 3, Cin, Cout), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t h, ww, dh, dw, ih, iw, ci, co
    cdef double xv
    for h in range(H):
        for dh in range(3):
            ih = h + dh - 1
            if ih < 0 or ih >= H:
                continue
            for ww in range(W):
                for dw in range(3):
                    iw = ww + dw - 1
                    if iw < 0 or iw >= W:
                        continue
                    for ci in range(Cin):
                        xv = x[ih, iw, ci]
                        for co in range(Cout):
                            gw[dh, dw, ci, co] += xv * gy[h, ww, co]
    return gw_arr
