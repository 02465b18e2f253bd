"""Forward numeric kernels over dense NCHW arrays.

Every function here is pure: it takes numpy arrays and returns a fresh
array, never mutating its inputs.  Image tensors use the
(batch, channel, height, width) layout with width innermost.  float32 is
the working precision; float64 inputs stay float64 so gradient checks can
run in double precision.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced in the output of an operation."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(where)
    return x


def as_tensor(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeError(f"empty extent in shape {arr.shape}")
    return check_finite(np.ascontiguousarray(arr), "as_tensor")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integer output extent")
    return span // stride + 1


def _check_conv_args(x, weight, bias, stride, zero_pad):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if stride < 1 or zero_pad < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    return (conv_output_size(x.shape[2], kh, stride, zero_pad),
            conv_output_size(x.shape[3], kw, stride, zero_pad))


def _to_rows(x: np.ndarray, zero_pad: int = 0) -> np.ndarray:
    """(B, C, H, W) -> zero-padded channels-last copy (B, H+2p, W+2p, C)."""
    b, c, h, w = x.shape
    out = np.zeros((b, h + 2 * zero_pad, w + 2 * zero_pad, c), dtype=x.dtype)
    out[:, zero_pad:zero_pad + h, zero_pad:zero_pad + w] = x.transpose(0, 2, 3, 1)
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, zero_pad: int) -> np.ndarray:
    """Patch matrix of shape (B*H'*W', kh*kw*Cin).

    Rows are ordered (b, h', w') and columns (i, j, c), matching
    :func:`_weight_rows`.
    """
    b, cin = x.shape[:2]
    xp = _to_rows(x, zero_pad)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * cin)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
           zero_pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch entries back onto the input."""
    b, cin, h, w = x_shape
    ho = conv_output_size(h, kh, stride, zero_pad)
    wo = conv_output_size(w, kw, stride, zero_pad)
    patches = cols.reshape(b, ho, wo, kh, kw, cin)
    padded = np.zeros((b, h + 2 * zero_pad, w + 2 * zero_pad, cin), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, :, i, j]
    padded = padded[:, zero_pad:zero_pad + h, zero_pad:zero_pad + w]
    return np.ascontiguousarray(padded.transpose(0, 3, 1, 2))


def _weight_rows(weight: np.ndarray) -> np.ndarray:
    """(Cout, Cin, kh, kw) -> (Cout, kh*kw*Cin)."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _from_rows(rows: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """(B*H*W, C) -> contiguous (B, C, H, W)."""
    return np.ascontiguousarray(rows.reshape(b, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, zero_pad: int = 0) -> np.ndarray:
    """2-d cross-correlation with zero padding (no kernel flip).

    ``x`` is (B, Cin, H, W), ``weight`` is (Cout, Cin, kh, kw).  Output
    extent along each axis is ``(H + 2*zero_pad - kh) / stride + 1`` and
    must be a positive integer.
    """
    out, _ = conv2d_with_cols(x, weight, bias, stride, zero_pad)
    return out


def conv2d_with_cols(x, weight, bias=None, stride=1, zero_pad=0):
    """Forward convolution that also returns the patch matrix for reuse in backward."""
    ho, wo = _check_conv_args(x, weight, bias, stride, zero_pad)
    kh, kw = weight.shape[2:]
    if kh == kw == 1 and stride == 1 and zero_pad == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
    else:
        cols = im2col(x, kh, kw, stride, zero_pad)
    out = cols @ _weight_rows(weight).T
    if bias is not None:
        out += bias
    out = _from_rows(out, x.shape[0], ho, wo).astype(x.dtype, copy=False)
    return check_finite(out, "conv2d"), cols


def conv2d_grads(dout: np.ndarray, x: np.ndarray, cols, weight: np.ndarray,
                 stride: int = 1, zero_pad: int = 0):
    """Gradients (dx, dweight, dbias) of a convolution given the upstream gradient."""
    cout, cin, kh, kw = weight.shape
    g = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    db = g.sum(axis=0)
    dw = (g.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    if stride == 1 and zero_pad <= min(kh, kw) - 1 and kh == kw:
        # stride-1 input gradient is a full correlation with the flipped kernel
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv2d_with_cols(dout, flipped, None, 1, kh - 1 - zero_pad)
    else:
        dx = col2im(g @ _weight_rows(weight), x.shape, kh, kw, stride, zero_pad)
    return dx, np.ascontiguousarray(dw), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (B, C*r*r, H, W) into (B, C, r*H, r*W).

    Input channel ``c*r*r + dy*r + dx`` at (h, w) lands at output channel
    ``c``, position ``(r*h + dy, r*w + dx)``.
    """
    b, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ShapeError(f"{crr} channels not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    y = x.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(b, c, h * r, w * r))


def pixel_unshuffle(y: np.ndarray, r: int) -> np.ndarray:
    b, c, hr, wr = y.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    x = y.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(b, c * r * r, h, w))


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, "add")
    return check_finite(a + b, "add")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, "mul")
    return check_finite(a * b, "mul")


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis (axis 1)."""
    if a.ndim != b.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def soft_threshold(x: np.ndarray, theta) -> np.ndarray:
    """sign(x) * max(|x| - theta, 0), the proximal map of theta*||.||_1.

    ``theta`` may be a scalar or any array broadcastable to ``x``; it must
    be non-negative everywhere.
    """
    theta = np.asarray(theta, dtype=x.dtype)
    if (theta < 0).any():
        raise ValueError("soft_threshold: negative threshold")
    if np.broadcast_shapes(theta.shape, x.shape) != x.shape:
        raise ShapeError(f"threshold shape {theta.shape} does not broadcast to {x.shape}")
    out = np.sign(x) * np.maximum(np.abs(x) - theta, 0)
    return check_finite(out.astype(x.dtype, copy=False), "soft_threshold")
