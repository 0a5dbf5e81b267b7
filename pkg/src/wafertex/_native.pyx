# Compiled kernels for the convolution / gradient / upsampling hot loops.
# Semantics mirror wafertex._kernels_py: zero padding, cross-correlation,
# replicate-edge gradients, single-threaded deterministic accumulation.

import numpy as np

from libc.math cimport sqrt, sqrtf

ctypedef fused floating:
    float
    double


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] weight,
                   int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t out_c = weight.shape[0], cg = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    cdef Py_ssize_t og = out_c // groups

    if floating is float:
        out_arr = np.empty((out_c, oh, ow), dtype=np.float32)
    else:
        out_arr = np.empty((out_c, oh, ow), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_arr

    # zero-pad once so the accumulation loops stay branch-free
    cdef floating[:, :, ::1] xp
    if padding > 0:
        xp_arr = np.pad(np.asarray(x), ((0, 0), (padding, padding), (padding, padding)))
        xp = xp_arr
    else:
        xp = x

    cdef Py_ssize_t oc, oy, ox, g, ic, ci, ky, kx, sy, sx, yy
    cdef floating acc
    with nogil:
        for oc in range(out_c):
            g = oc // og
            for oy in range(oh):
                sy = oy * stride
                for ox in range(ow):
                    sx = ox * stride
                    acc = 0
                    for ic in range(cg):
                        ci = g * cg + ic
                        for ky in range(kh):
                            yy = sy + ky * dilation
                            for kx in range(kw):
                                acc = acc + weight[oc, ic, ky, kx] * xp[ci, yy, sx + kx * dilation]
                    out[oc, oy, ox] = acc
    return out_arr


def conv2d_input_grad(floating[:, :, ::1] grad, floating[:, :, :, ::1] weight,
                      int stride, int padding, int dilation, int groups,
                      Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t out_c = weight.shape[0], cg = weight.shape[1]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t oh = grad.shape[1], ow = grad.shape[2]
    cdef Py_ssize_t og = out_c // groups
    cdef Py_ssize_t c_in = cg * groups

    if floating is float:
        dx_arr = np.empty((c_in, in_h, in_w), dtype=np.float32)
    else:
        dx_arr = np.empty((c_in, in_h, in_w), dtype=np.float64)
    cdef floating[:, :, ::1] dx = dx_arr

    cdef Py_ssize_t c, g, ic, iy, ix, ky, kx, oy, ox, oc, t, u
    cdef floating acc
    with nogil:
        for c in range(c_in):
            g = c // cg
            ic = c - g * cg
            for iy in range(in_h):
                for ix in range(in_w):
                    acc = 0
                    for ky in range(kh):
                        t = iy + padding - ky * dilation
                        if t < 0 or t % stride != 0:
                            continue
                        oy = t // stride
                        if oy >= oh:
                            continue
                        for kx in range(kw):
                            u = ix + padding - kx * dilation
                            if u < 0 or u % stride != 0:
                                continue
                            ox = u // stride
                            if ox >= ow:
                                continue
                            for oc in range(g * og, (g + 1) * og):
                                acc = acc + weight[oc, ic, ky, kx] * grad[oc, oy, ox]
                    dx[c, iy, ix] = acc
    return dx_arr


def upsample_nearest(floating[:, :, ::1] x, Py_ssize_t factor):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    if floating is float:
        out_arr = np.empty((c, h * factor, w * factor), dtype=np.float32)
    else:
        out_arr = np.empty((c, h * factor, w * factor), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t ch, sy, sx, fy, fx, row
    cdef floating v
    with nogil:
        for ch in range(c):
            for sy in range(h):
                for fy in range(factor):
                    row = sy * factor + fy
                    for sx in range(w):
                        v = x[ch, sy, sx]
                        for fx in range(factor):
                            out[ch, row, sx * factor + fx] = v
    return out_arr


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def grad_magnitude(floating[:, ::1] field, kind):
    cdef Py_ssize_t h = field.shape[0], w = field.shape[1]
    cdef int code
    if kind == "sobel":
        code = 0
    elif kind == "central":
        code = 1
    else:
        raise ValueError(f"unknown gradient kernel {kind!r}")

    if floating is float:
        out_arr = np.empty((h, w), dtype=np.float32)
    else:
        out_arr = np.empty((h, w), dtype=np.float64)
    cdef floating[:, ::1] out = out_arr

    cdef Py_ssize_t y, x, ym, yp, xm, xp
    cdef floating gx, gy
    with nogil:
        for y in range(h):
            ym = _clamp(y - 1, h)
            yp = _clamp(y + 1, h)
            for x in range(w):
                xm = _clamp(x - 1, w)
                xp = _clamp(x + 1, w)
                if code == 0:
                    gx = (field[ym, xp] + 2 * field[y, xp] + field[yp, xp]) \
                        - (field[ym, xm] + 2 * field[y, xm] + field[yp, xm])
                    gy = (field[yp, xm] + 2 * field[yp, x] + field[yp, xp]) \
                        - (field[ym, xm] + 2 * field[ym, x] + field[ym, xp])
                else:
                    gx = (field[y, xp] - field[y, xm]) * <floating> 0.5
                    gy = (field[yp, x] - field[ym, x]) * <floating> 0.5
                if floating is float:
                    out[y, x] = sqrtf(gx * gx + gy * gy)
                else:
                    out[y, x] = sqrt(gx * gx + gy * gy)
    return out_arr
