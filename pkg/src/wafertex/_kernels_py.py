"""Numpy implementations of the hot kernels.

Fallback backend used when the compiled extension (``wafertex._native``) is
unavailable.  Semantics match the compiled kernels exactly: zero padding and
cross-correlation for convolution, replicate-edge padding for the gradient
operator, fixed accumulation structure per call so repeated runs are
bit-identical.  Shapes are validated by the callers in ``wafertex.tensor``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, weight, stride, padding, dilation, groups):
    out_c, cg, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    ext_h = dilation * (kh - 1) + 1
    ext_w = dilation * (kw - 1) + 1
    windows = sliding_window_view(xp, (ext_h, ext_w), axis=(1, 2))
    windows = windows[:, ::stride, ::stride, ::dilation, ::dilation]
    oh, ow = windows.shape[1], windows.shape[2]
    out = np.empty((out_c, oh, ow), dtype=x.dtype)
    og = out_c // groups
    for g in range(groups):
        out[g * og:(g + 1) * og] = np.einsum(
            "cijkl,ockl->oij",
            windows[g * cg:(g + 1) * cg],
            weight[g * og:(g + 1) * og],
        )
    return out


def conv2d_input_grad(grad, weight, stride, padding, dilation, groups, in_h, in_w):
    out_c, cg, kh, kw = weight.shape
    og = out_c // groups
    oh, ow = grad.shape[1], grad.shape[2]
    hp, wp = in_h + 2 * padding, in_w + 2 * padding
    dxp = np.zeros((cg * groups, hp, wp), dtype=grad.dtype)
    for g in range(groups):
        gg = grad[g * og:(g + 1) * og]
        wg = weight[g * og:(g + 1) * og]
        for ky in range(kh):
            for kx in range(kw):
                contrib = np.tensordot(wg[:, :, ky, kx], gg, axes=([0], [0]))
                dxp[g * cg:(g + 1) * cg,
                    ky * dilation:ky * dilation + oh * stride:stride,
                    kx * dilation:kx * dilation + ow * stride:stride] += contrib
    if padding:
        dxp = dxp[:, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(dxp)


def upsample_nearest(x, factor):
    return np.ascontiguousarray(np.repeat(np.repeat(x, factor, axis=1), factor, axis=2))


def grad_magnitude(field, kind):
    f = np.pad(field, 1, mode="edge")
    if kind == "sobel":
        gx = (f[:-2, 2:] + 2 * f[1:-1, 2:] + f[2:, 2:]) \
            - (f[:-2, :-2] + 2 * f[1:-1, :-2] + f[2:, :-2])
        gy = (f[2:, :-2] + 2 * f[2:, 1:-1] + f[2:, 2:]) \
            - (f[:-2, :-2] + 2 * f[:-2, 1:-1] + f[:-2, 2:])
    elif kind == "central":
        gx = (f[1:-1, 2:] - f[1:-1, :-2]) * 0.5
        gy = (f[2:, 1:-1] - f[:-2, 1:-1]) * 0.5
    else:
        raise ValueError(f"unknown gradient kernel {kind!r}")
    return np.sqrt(gx * gx + gy * gy)
