"""Pure numpy implementations of the gather/scatter kernels.

Every kernel works on pre-padded, C-contiguous float64 arrays laid out as
``(N, D, H, W, C)``; 2-D callers pass ``D == 1`` with a depth-1 window.
The compiled module ``_kernels`` exposes the same functions and must
return bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kernel, stride, out_shape):
    """Gather sliding windows into rows.

    Returns an array of shape ``(N, oD, oH, oW, kd, kh, kw, C)``.
    """
    kd, kh, kw = kernel
    sd, sh, sw = stride
    od, oh, ow = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (N, oD, oH, oW, C, kd, kh, kw) -> (N, oD, oH, oW, kd, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))


def col2im(cols, padded_shape, kernel, stride):
    """Scatter-add window rows back onto a zero padded input.

    Contributions are accumulated window offset by window offset.
    """
    kd, kh, kw = kernel
    sd, sh, sw = stride
    _, od, oh, ow = cols.shape[:4]
    out = np.zeros(padded_shape)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out[:, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw, :] += cols[
                    :, :, :, :, a, b, c, :
                ]
    return out


def maxpool_forward(xp, window, stride, out_shape):
    """Window maxima and the flat in-window index of the first maximum."""
    kd, kh, kw = window
    sd, sh, sw = stride
    od, oh, ow = out_shape
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    flat = win.reshape(win.shape[:5] + (kd * kh * kw,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(grad_out, argmax, padded_shape, window, stride):
    """Route each output gradient to its recorded argmax position."""
    kd, kh, kw = window
    sd, sh, sw = stride
    _, od, oh, ow, _ = grad_out.shape
    out = np.zeros(padded_shape)
    idx = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out[:, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw, :] += np.where(
                    argmax == idx, grad_out, 0.0
                )
                idx += 1
    return out
