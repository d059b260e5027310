"""Dense tensor primitives with hand-written gradients.

Tensors are plain numpy arrays, channel-first (N, C, H, W). Every op that
takes part in training has a matching ``*_backward``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_cols(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation; ``weight`` is (K, C, kh, kw)."""
    xb, squeeze = _as_batch(x)
    weight = np.asarray(weight)
    if weight.ndim != 4 or weight.shape[1] != xb.shape[1]:
        raise ValueError(f"weight shape {weight.shape} incompatible with input channels {xb.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    kh, kw = weight.shape[2:]
    if xb.shape[2] + 2 * padding < kh or xb.shape[3] + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {xb.shape[2:]}")
    cols = _conv_cols(xb, kh, kw, stride, padding)
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, K)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(dout, x, weight, stride: int = 1, padding: int = 0):
    """Returns ``(dx, dweight, dbias)``."""
    xb, squeeze = _as_batch(x)
    dout = np.asarray(dout)
    if squeeze:
        dout = dout[None]
    k, c, kh, kw = weight.shape
    cols = _conv_cols(xb, kh, kw, stride, padding)
    dbias = dout.sum(axis=(0, 2, 3))
    dweight = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (K, C, kh, kw)
    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    n, _, h, w = xb.shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.result_type(dout, weight))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if squeeze else dx), dweight, dbias


def max_pool2d(x, kernel: int = 3, stride: int = 2, padding: int = 0):
    xb, squeeze = _as_batch(x)
    if padding:
        xb = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = sliding_window_view(xb, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.max(axis=(4, 5))
    return out[0] if squeeze else out


def max_pool2d_backward(dout, x, kernel: int = 3, stride: int = 2, padding: int = 0):
    xb, squeeze = _as_batch(x)
    dout = np.asarray(dout)
    if squeeze:
        dout = dout[None]
    n, c, h, w = xb.shape
    if padding:
        xb = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = sliding_window_view(xb, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    arg = win.reshape(n, c, ho, wo, kernel * kernel).argmax(axis=-1)
    di, dj = np.divmod(arg, kernel)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    dxp = np.zeros(xb.shape, dtype=dout.dtype)
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    dx = np.ascontiguousarray(dx)
    return dx[0] if squeeze else dx


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def fc(x, weight, bias=None):
    """Affine map ``weight @ x + bias`` over the last axis; weight is (out, in)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"fc: input dim {x.shape[-1]} vs weight shape {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"fc: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def fc_backward(dout, x, weight):
    """Returns ``(dx, dweight, dbias)``; leading axes of ``x`` are summed."""
    dout = np.asarray(dout)
    x = np.asarray(x)
    dx = dout @ weight
    d2 = dout.reshape(-1, dout.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return dx, d2.T @ x2, d2.sum(axis=0)


def softmax(x, axis: int = -1):
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout, y, axis: int = -1):
    """Gradient through ``y = softmax(x)`` given upstream ``dout``."""
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1):
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def bce_loss(logits, labels):
    """Two-way softmax cross-entropy, averaged over the batch.

    ``logits`` is (2,) or (N, 2) with column 1 the positive class; returns
    ``(loss, dlogits)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    if z.shape[-1] != 2:
        raise ValueError(f"bce_loss expects two-way logits, got shape {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if lab.shape != (z.shape[0],) or np.any((lab != 0) & (lab != 1)):
        raise ValueError("labels must be 0/1 with one label per row")
    n = z.shape[0]
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, lab].mean()
    grad = np.exp(logp)
    grad[rows, lab] -= 1
    grad /= n
    return float(loss), (grad[0] if single else grad)


def instance_embedding_loss(scores, domain_index):
    """``-log softmax(scores)[domain_index]`` over the domain axis.

    ``scores`` holds the positive-class score of each domain head, shape
    (D,) or (N, D); ``domain_index`` is an int or one index per row.
    Returns ``(loss, dscores)``, averaged over rows.
    """
    scores = np.asarray(scores)
    single = scores.ndim == 1
    z = scores[None] if single else scores
    n, d = z.shape
    idx = np.broadcast_to(np.asarray(domain_index, dtype=np.int64), (n,))
    if np.any(idx < 0) or np.any(idx >= d):
        raise IndexError(f"domain index out of range for {d} domains")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, idx].mean()
    grad = np.exp(logp)
    grad[rows, idx] -= 1
    grad /= n
    return float(loss), (grad[0] if single else grad)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: dict | None = None) -> dict:
    """One momentum-SGD step: ``v <- mu*v - lr*(g + wd*p); p <- p + v``.

    ``velocity`` is updated in place when given; the returned dict holds
    new parameter arrays (inputs are not mutated).
    """
    if velocity is None:
        velocity = {}
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name!r}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v - lr * (g + weight_decay * p)
        velocity[name] = v
        out[name] = (p + v).astype(np.asarray(p).dtype, copy=False)
    return out


class SGD:
    """Stateful momentum SGD over a named parameter dict (updated in place)."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, grads: dict) -> None:
        new = sgd_step(self.params, grads, self.lr, self.momentum, self.weight_decay, self.velocity)
        for name in grads:
            self.params[name][...] = new[name]
