"""3D layer primitives with hand-written backward passes.

Tensors are laid out (N, C, D, H, W). Each ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` consumes ``(dout, cache)``. Convolutions are
computed by gathering strided slices per kernel offset (im2col) followed by a
single matmul, which keeps results independent of any thread count.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def _pads(pad):
    if isinstance(pad, int):
        return pad, pad
    lo, hi = pad
    return int(lo), int(hi)


def _out_size(n, k, stride, lo, hi):
    return (n + lo + hi - k) // stride + 1


def _im2col(xp, k, stride, out_shape):
    n, c = xp.shape[:2]
    od, oh, ow = out_shape
    cols = np.empty((n, c, k, k, k, od, oh, ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for d in range(k):
                cols[:, :, a, b, d] = xp[
                    :, :,
                    a:a + stride * (od - 1) + 1:stride,
                    b:b + stride * (oh - 1) + 1:stride,
                    d:d + stride * (ow - 1) + 1:stride,
                ]
    return cols.reshape(n, c * k ** 3, od * oh * ow)


def _col2im(cols, padded_shape, k, stride, out_shape):
    n, c = padded_shape[:2]
    od, oh, ow = out_shape
    cols = cols.reshape(n, c, k, k, k, od, oh, ow)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for d in range(k):
                xp[
                    :, :,
                    a:a + stride * (od - 1) + 1:stride,
                    b:b + stride * (oh - 1) + 1:stride,
                    d:d + stride * (ow - 1) + 1:stride,
                ] += cols[:, :, a, b, d]
    return xp


def conv3d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation. ``w`` has shape (F, C, k, k, k); ``pad`` is int or (lo, hi)."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv3d: bad kernel/bias shapes {w.shape}, {b.shape}")
    lo, hi = _pads(pad)
    out_shape = tuple(_out_size(n, k, stride, lo, hi) for n in x.shape[2:])
    if min(out_shape) < 1:
        raise ShapeMismatch(f"conv3d: input {x.shape} too small for kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi)))
    cols = _im2col(xp, k, stride, out_shape)
    w2 = w.reshape(w.shape[0], -1)
    out = np.matmul(w2, cols) + b[None, :, None]
    out = out.reshape(x.shape[0], w.shape[0], *out_shape)
    return out, (xp.shape, cols, w, stride, (lo, hi), out_shape)


def conv3d_backward(dout, cache):
    xp_shape, cols, w, stride, (lo, hi), out_shape = cache
    n, f = dout.shape[:2]
    if dout.shape[2:] != out_shape:
        raise ShapeMismatch(f"conv3d backward: grad {dout.shape} vs output {out_shape}")
    k = w.shape[2]
    d2 = dout.reshape(n, f, -1)
    db = d2.sum(axis=(0, 2))
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dcols = np.matmul(w.reshape(f, -1).T, d2)
    dxp = _col2im(dcols, xp_shape, k, stride, out_shape)
    dx = dxp[:, :, lo:xp_shape[2] - hi, lo:xp_shape[3] - hi, lo:xp_shape[4] - hi]
    return dx, dw, db


def deconv3d_forward(x, w, b, stride=2, pad=1):
    """Transposed convolution. ``w`` has shape (C_in, C_out, k, k, k).

    Output size per axis is ``(n - 1) * stride + k - lo - hi``.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"deconv3d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"deconv3d: bad kernel/bias shapes {w.shape}, {b.shape}")
    lo, hi = _pads(pad)
    n, cin = x.shape[:2]
    in_shape = x.shape[2:]
    full = tuple((m - 1) * stride + k for m in in_shape)
    cout = w.shape[1]
    x2 = x.reshape(n, cin, -1)
    cols = np.matmul(w.reshape(cin, -1).T, x2)
    yfull = _col2im(cols, (n, cout) + full, k, stride, in_shape)
    out = yfull[:, :, lo:full[0] - hi, lo:full[1] - hi, lo:full[2] - hi] + b[None, :, None, None, None]
    return out, (x2, w, stride, (lo, hi), in_shape, full)


def deconv3d_backward(dout, cache):
    x2, w, stride, (lo, hi), in_shape, full = cache
    n, cout = dout.shape[:2]
    cin = w.shape[0]
    k = w.shape[2]
    expected = tuple(f - lo - hi for f in full)
    if dout.shape[2:] != expected:
        raise ShapeMismatch(f"deconv3d backward: grad {dout.shape} vs output {expected}")
    db = dout.sum(axis=(0, 2, 3, 4))
    dfull = np.pad(dout, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi)))
    cols = _im2col(dfull, k, stride, in_shape)
    dx = np.matmul(w.reshape(cin, -1), cols).reshape((n, cin) + tuple(in_shape))
    dw = np.tensordot(x2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    return dx, dw, db


def norm_forward(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes with affine scale/offset."""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"norm: params {gamma.shape}/{beta.shape} vs channels {x.shape[1]}")
    axes = (2, 3, 4)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    g = gamma[None, :, None, None, None]
    out = g * xhat + beta[None, :, None, None, None]
    return out, (xhat, inv, g)


def norm_backward(dout, cache):
    xhat, inv, g = cache
    axes = (2, 3, 4)
    m = np.prod(xhat.shape[2:])
    dgamma = (dout * xhat).sum(axis=(0,) + axes)
    dbeta = dout.sum(axis=(0,) + axes)
    dxhat = dout * g
    dx = inv / m * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def leaky_relu_forward(x, slope=0.2):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_relu_backward(dout, cache):
    x, slope = cache
    return np.where(x > 0, dout, slope * dout)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1.0 - y)


def dropout_forward(x, rate, rng):
    """Inverted dropout; ``rng`` None or ``rate`` 0 means pass-through."""
    if rng is None or rate <= 0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


def bce(p, label, eps=1e-12):
    """Binary cross-entropy of probability ``p`` against a 0/1 label, and dL/dp."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    loss = -(label * np.log(p) + (1 - label) * np.log(1 - p))
    grad = (p - label) / (p * (1 - p))
    return loss, grad


def bce_with_logit(z, label):
    """BCE evaluated from the logit, stable for large |z|; returns (loss, dL/dz)."""
    z = np.asarray(z, dtype=np.float64)
    loss = np.maximum(z, 0) - z * label + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - label
