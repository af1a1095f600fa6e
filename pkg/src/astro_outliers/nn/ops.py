"""Forward/backward kernels on NHWC image tensors.

All images are ``(batch, height, width, channels)`` numpy arrays.  Every
forward op that needs state for its gradient returns it alongside the
output; the matching ``*_backward`` consumes it.
"""

import numpy as np
from scipy.special import expit

from ..exceptions import ShapeError

BCE_EPS = 1e-7


def _check_nhwc(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (batch, height, width, channels), got shape {x.shape}")


def im2col(xp, kh, kw, oh, ow):
    """Gather every kh x kw window of a padded batch into rows.

    Column order is (ky, kx, channel), matching ``kernels.reshape(-1, c_out)``.
    """
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(xp[:, :oh, :ow, :])
    return np.concatenate(
        [xp[:, i:i + oh, j:j + ow, :] for i in range(kh) for j in range(kw)], axis=-1
    )


# Convolutions use a shifted-matmul path: each kernel tap is one matmul over
# a contiguous slice of the flattened padded batch, so no im2col copy is
# made.  Narrow-input, wide-output layers use im2col instead, which gives
# the matmul a useful inner dimension.
SHIFTED_MIN_CHANNELS = 8


def _padded(x, kh, kw, padding):
    b, h, w, _ = x.shape
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
        return xp, h, w, ph, pw
    if padding == "valid":
        oh, ow = h - kh + 1, w - kw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        return x, oh, ow, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d_forward(x, kernels, bias, padding="same"):
    """Stride-1 2-d convolution (cross-correlation) plus bias.

    Returns ``(output, cache)``; the cache holds what the backward pass needs.
    """
    _check_nhwc(x)
    kh, kw, c_in, c_out = kernels.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    b = x.shape[0]
    xp, oh, ow, _, _ = _padded(x, kh, kw, padding)
    if c_in < SHIFTED_MIN_CHANNELS and c_out >= SHIFTED_MIN_CHANNELS:
        cols = im2col(xp, kh, kw, oh, ow)
        out = cols.reshape(-1, kh * kw * c_in) @ kernels.reshape(-1, c_out)
        out += bias
        return out.reshape(b, oh, ow, c_out), ("cols", cols)
    hp, wp = xp.shape[1:3]
    x2 = np.ascontiguousarray(xp).reshape(-1, c_in)
    n = x2.shape[0] - ((kh - 1) * wp + (kw - 1))
    full = np.empty((x2.shape[0], c_out), dtype=np.result_type(x.dtype, kernels.dtype))
    acc = full[:n]
    if c_out < SHIFTED_MIN_CHANNELS <= c_in:
        # narrow output: all taps in one matmul, then shift-and-add the slices
        taps = x2 @ kernels.transpose(2, 0, 1, 3).reshape(c_in, kh * kw * c_out)
        acc[:] = taps[:n, :c_out]
        for t in range(1, kh * kw):
            off = (t // kw) * wp + t % kw
            acc += taps[off:off + n, t * c_out:(t + 1) * c_out]
    else:
        tmp = np.empty_like(acc)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                if i == 0 and j == 0:
                    np.matmul(x2[off:off + n], kernels[i, j], out=acc)
                else:
                    np.matmul(x2[off:off + n], kernels[i, j], out=tmp)
                    acc += tmp
    out = full.reshape(b, hp, wp, c_out)[:, :oh, :ow, :] + bias
    return out, ("shifted", x2)


def _flipped(kernels):
    # kernel of the adjoint convolution: spatially flipped, in/out swapped
    return np.ascontiguousarray(kernels[::-1, ::-1].transpose(0, 1, 3, 2))


def conv2d_backward(dy, cache, x_shape, kernels, padding="same", need_dx=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernels and bias."""
    kh, kw, c_in, c_out = kernels.shape
    b, h, w, _ = x_shape
    oh, ow = dy.shape[1:3]
    db = dy.sum(axis=(0, 1, 2))
    kind, data = cache
    if kind == "cols":
        dk = (data.reshape(-1, kh * kw * c_in).T @ dy.reshape(-1, c_out)).reshape(kernels.shape)
    else:
        x2 = data
        hp, wp = (h + kh - 1, w + kw - 1) if padding == "same" else (h, w)
        max_off = (kh - 1) * wp + (kw - 1)
        n = x2.shape[0] - max_off
        dfull = np.zeros((b, hp, wp, c_out), dtype=dy.dtype)
        dfull[:, :oh, :ow, :] = dy
        d2 = dfull.reshape(-1, c_out)
        if c_out < SHIFTED_MIN_CHANNELS <= c_in:
            # scatter dy to every input row it touches, then one matmul
            dcols = np.zeros((x2.shape[0], kh * kw * c_out), dtype=dy.dtype)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    t = i * kw + j
                    dcols[off:off + n, t * c_out:(t + 1) * c_out] = d2[:n]
            dk = (x2.T @ dcols).reshape(c_in, kh, kw, c_out).transpose(1, 2, 0, 3)
        else:
            dk = np.empty_like(kernels)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dk[i, j] = x2[off:off + n].T @ d2[:n]
    if not need_dx:
        return None, dk, db
    flipped = _flipped(kernels)
    zero = np.zeros(c_in, dtype=dy.dtype)
    if padding == "same":
        dx, _ = conv2d_forward(dy, flipped, zero, "same")
    else:
        dyp = np.pad(dy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        dx, _ = conv2d_forward(dyp, flipped, zero, "valid")
    return dx, dk, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


_POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2(x):
    """2x2 max pooling, stride 2.

    Returns ``(output, pool_indices)`` where indices address the row-major
    window position 0..3; ties resolve to the first occurrence.
    """
    _check_nhwc(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    taps = [x[:, i::2, j::2, :] for i, j in _POOL_TAPS]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
    # first-occurrence index from "not the max" flags: n0 * (1 + n1 * (1 + n2))
    n0, n1, n2 = (np.not_equal(t, out).view(np.uint8) for t in taps[:3])
    return out, n0 * (1 + n1 * (1 + n2))


def maxpool2_backward(dy, idx):
    b, h2, w2, c = dy.shape
    dx = np.empty((b, 2 * h2, 2 * w2, c), dtype=dy.dtype)
    for k, (i, j) in enumerate(_POOL_TAPS):
        np.multiply(dy, idx == k, out=dx[:, i::2, j::2, :])
    return dx


def upsample2(x):
    """Nearest-neighbour 2x upsampling: every value becomes a 2x2 block."""
    _check_nhwc(x)
    b, h, w, c = x.shape
    return np.broadcast_to(x[:, :, None, :, None, :], (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)


def upsample2_backward(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def dense_forward(x, weight, bias):
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-d, got shape {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input width {x.shape[1]} does not match n_in {weight.shape[0]}")
    return x @ weight + bias


def dense_backward(dy, x, weight):
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis (max-shifted)."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_channels_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def sigmoid(x):
    return expit(x)


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def bce_loss(reconstruction, target, eps=BCE_EPS):
    """Mean binary cross-entropy over all samples and elements.

    Returns ``(loss, d loss / d reconstruction)``.  Reconstructions are
    clamped to ``[eps, 1 - eps]``; the gradient is zero where the clamp is
    active.
    """
    if reconstruction.shape != target.shape:
        raise ShapeError(f"reconstruction shape {reconstruction.shape} != target shape {target.shape}")
    y = np.clip(reconstruction, eps, 1 - eps)
    t = target
    n = y.size
    loss = -np.mean(t * np.log(y) + (1 - t) * np.log1p(-y), dtype=np.float64)
    inside = (reconstruction >= eps) & (reconstruction <= 1 - eps)
    grad = (y - t) / (y * (1 - y)) / n
    grad *= inside
    return float(loss), grad.astype(reconstruction.dtype, copy=False)
