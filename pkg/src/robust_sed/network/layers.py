"""Channels-last layer primitives with explicit backward passes.

Activations are laid out ``(batch, height, width, channels)``; here height is
time (frames) and width is frequency (bands). Convolution weights are stored
``(out_channels, in_channels, kh, kw)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b):
    """Valid 2-D cross-correlation. Returns the output and the im2col cache."""
    O, C, kh, kw = w.shape
    B, H, W, Cx = x.shape
    if Cx != C:
        raise ValueError(f"conv expects {C} input channels, got {Cx}")
    Ho, Wo = H - kh + 1, W - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    # channels innermost keeps the im2col copy contiguous in the input
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = windows.reshape(B * Ho * Wo, kh * kw * C)
    out = cols @ _wmat(w)
    out += b
    return out.reshape(B, Ho, Wo, O), (cols, x.shape)


def _wmat(w):
    O = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, O)


def conv2d_backward(dout, w, cache, need_dx=True):
    """Gradients ``(dx, dw, db)``; ``dx`` is ``None`` when not needed."""
    cols, xshape = cache
    O, C, kh, kw = w.shape
    d2 = dout.reshape(-1, O)
    dw = (d2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # the input gradient is a full convolution with the flipped kernel
    pad = np.pad(dout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_forward(pad, flipped, np.zeros(C, dtype=dout.dtype))
    return dx, dw, db


def maxpool_forward(x, pool, return_cache=True):
    """Non-overlapping max pooling (stride equals window); remainders are dropped.

    The argmax cache needed for the backward pass is only built on request.
    """
    ph, pw = pool
    B, H, W, C = x.shape
    Ho, Wo = H // ph, W // pw
    if not return_cache:
        return x[:, : Ho * ph, : Wo * pw].reshape(B, Ho, ph, Wo, pw, C).max(axis=(2, 4)), None
    xr = x[:, : Ho * ph, : Wo * pw].reshape(B, Ho, ph, Wo, pw, C)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, ph * pw)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, pool, cache):
    arg, xshape = cache
    ph, pw = pool
    B, H, W, C = xshape
    Ho, Wo = dout.shape[1], dout.shape[2]
    dr = np.zeros((B, Ho, Wo, C, ph * pw), dtype=dout.dtype)
    np.put_along_axis(dr, arg[..., None], dout[..., None], axis=-1)
    dr = dr.reshape(B, Ho, Wo, C, ph, pw).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, : Ho * ph, : Wo * pw] = dr.reshape(B, Ho * ph, Wo * pw, C)
    return dx


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, pre):
    return dout * (pre > 0)
