"""Differentiable primitives with hand-written backward passes.

All ops accept an optional leading batch axis. Sequence ops take
``lengths`` so that padded batches give the same per-utterance results as
running each utterance alone.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from dysadapt.errors import AlignmentError, ConfigurationError, DimensionError, InputTooShortError
from dysadapt.nn.tensor import Tensor, as_tensor, make_node

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(x.values.sum()), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.values.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    out = x.values @ weight.values
    if bias is not None:
        out = out + bias.values
    n, m = weight.shape

    def backward(g):
        gx = g @ weight.values.T
        gw = x.values.reshape(-1, n).T @ g.reshape(-1, m)
        gb = g.reshape(-1, m).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    out = np.where(mask, x.values, 0.0)

    def backward(g):
        return (g * mask,)

    return make_node(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row over the last axis, then scale and shift."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    mean = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.values + beta.values

    def backward(g):
        dxhat = g * gamma.values
        dx = inv / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).reshape(-1, width).sum(axis=0)
        dbeta = g.reshape(-1, width).sum(axis=0)
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward)


def _key_mask(lengths: Sequence[int] | None, n: int, t: int) -> np.ndarray | None:
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    return np.arange(t)[None, :] < lengths[:, None]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def multi_head_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    n_heads: int,
    lengths: Sequence[int] | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention with per-head Q/K/V and an output projection.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. With ``lengths``
    given, keys past each utterance's length get zero weight.
    """
    x = as_tensor(x)
    h = x.shape[-1]
    if n_heads < 1 or h % n_heads:
        raise ConfigurationError(f"hidden size {h} is not divisible by n_heads={n_heads}")
    squeeze = x.values.ndim == 2
    xv = x.values[None] if squeeze else x.values
    n, t, _ = xv.shape
    dh = h // n_heads
    scale = 1.0 / np.sqrt(dh)
    p = {k: as_tensor(params[k]) for k in ATTENTION_KEYS}

    def heads(z):
        return z.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(z):
        return z.transpose(0, 2, 1, 3).reshape(n, t, h)

    q = heads(xv @ p["wq"].values + p["bq"].values)
    k = heads(xv @ p["wk"].values + p["bk"].values)
    v = heads(xv @ p["wv"].values + p["bv"].values)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    mask = _key_mask(lengths, n, t)
    if mask is not None:
        scores = np.where(mask[:, None, None, :], scores, -np.inf)
    weights = _softmax(scores)
    ctx = merge(weights @ v)
    out = ctx @ p["wo"].values + p["bo"].values

    def backward(g):
        g3 = g[None] if squeeze else g
        flat_g = g3.reshape(-1, h)
        g_wo = ctx.reshape(-1, h).T @ flat_g
        g_bo = flat_g.sum(axis=0)
        g_ctx = heads(g3 @ p["wo"].values.T)
        g_w = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = weights.transpose(0, 1, 3, 2) @ g_ctx
        g_s = weights * (g_w - (g_w * weights).sum(axis=-1, keepdims=True)) * scale
        g_q = g_s @ k
        g_k = g_s.transpose(0, 1, 3, 2) @ q
        g_q, g_k, g_v = merge(g_q), merge(g_k), merge(g_v)
        flat_x = xv.reshape(-1, h)
        grads = {
            "wq": flat_x.T @ g_q.reshape(-1, h),
            "bq": g_q.reshape(-1, h).sum(axis=0),
            "wk": flat_x.T @ g_k.reshape(-1, h),
            "bk": g_k.reshape(-1, h).sum(axis=0),
            "wv": flat_x.T @ g_v.reshape(-1, h),
            "bv": g_v.reshape(-1, h).sum(axis=0),
            "wo": g_wo,
            "bo": g_bo,
        }
        g_x = g_q @ p["wq"].values.T + g_k @ p["wk"].values.T + g_v @ p["wv"].values.T
        if squeeze:
            g_x = g_x[0]
        return (g_x, *(grads[key] for key in ATTENTION_KEYS))

    result = make_node(out[0] if squeeze else out, (x, *(p[key] for key in ATTENTION_KEYS)), backward)
    if return_weights:
        return result, (weights[0] if squeeze else weights)
    return result


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    kernel: int,
    stride: int,
    lengths: Sequence[int] | None = None,
) -> tuple[Tensor, list[int]]:
    """Strided 1-D convolution over the time axis with replicate padding at the end.

    ``weight`` has shape ``(kernel * c_in, c_out)``; output frame ``t`` reads
    input frames ``t*stride .. t*stride+kernel-1``, clamped to the last valid
    frame. Output length per utterance is ``length // stride``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    squeeze = x.values.ndim == 2
    xv = x.values[None] if squeeze else x.values
    n, length, c_in = xv.shape
    if weight.shape[0] != kernel * c_in:
        raise DimensionError(f"conv1d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    in_lengths = np.full(n, length) if lengths is None else np.asarray(lengths)
    out_lengths = in_lengths // stride
    t_out = int(out_lengths.max()) if n else 0
    if t_out < 1:
        raise InputTooShortError(f"conv1d: input length {int(in_lengths.min())} shorter than stride {stride}")
    taps = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    idx = np.minimum(taps[None], (in_lengths - 1)[:, None, None])
    rows = np.arange(n)[:, None, None]
    cols = xv[rows, idx].reshape(n, t_out, kernel * c_in)
    out = cols @ weight.values + bias.values

    def backward(g):
        g3 = g[None] if squeeze else g
        c_out = weight.shape[1]
        g_w = cols.reshape(-1, kernel * c_in).T @ g3.reshape(-1, c_out)
        g_b = g3.reshape(-1, c_out).sum(axis=0)
        g_cols = (g3 @ weight.values.T).reshape(n, t_out, kernel, c_in)
        g_x = np.zeros_like(xv)
        np.add.at(g_x, (rows, idx), g_cols)
        return (g_x[0] if squeeze else g_x), g_w, g_b

    result = make_node(out[0] if squeeze else out, (x, weight, bias), backward)
    return result, [int(v) for v in out_lengths]


def conv_layout(factor: int) -> list[tuple[int, int]]:
    """(kernel, stride) per layer: kernel-3 stride-2 layers for powers of two, else one non-overlapping layer."""
    if factor < 1:
        raise ConfigurationError(f"subsample factor must be positive, got {factor}")
    if factor == 1:
        return [(1, 1)]
    if factor & (factor - 1) == 0:
        return [(3, 2)] * (factor.bit_length() - 1)
    return [(factor, factor)]


def conv_subsample(
    x: Tensor,
    params: Sequence[tuple[Tensor, Tensor]],
    factor: int,
    lengths: Sequence[int] | None = None,
) -> tuple[Tensor, list[int]]:
    """Conv + ReLU stack reducing time length ``L`` to ``floor(L / factor)``."""
    x = as_tensor(x)
    layout = conv_layout(factor)
    if len(params) != len(layout):
        raise ConfigurationError(f"factor {factor} needs {len(layout)} conv layers, got {len(params)}")
    in_lengths = [x.shape[-2]] * (1 if x.values.ndim == 2 else x.shape[0]) if lengths is None else list(lengths)
    if min(in_lengths) < factor:
        raise InputTooShortError(f"input length {min(in_lengths)} is shorter than subsample factor {factor}")
    h, cur = x, in_lengths
    for (w, b), (kernel, stride) in zip(params, layout):
        h, cur = conv1d(h, w, b, kernel, stride, cur)
        h = relu(h)
    return h, cur


def concat_features(a: Tensor | None, b: Tensor) -> Tensor:
    """Append along the feature axis with ``a`` in the leading columns."""
    b = as_tensor(b)
    if a is None:
        return b
    a = as_tensor(a)
    if a.shape[:-1] != b.shape[:-1]:
        raise AlignmentError(
            f"concat_features: time extents differ (a has T={a.shape[-2]}, b has T={b.shape[-2]})"
        )
    if a.shape[-1] == 0:
        return b
    p = a.shape[-1]
    out = np.concatenate([a.values, b.values], axis=-1)

    def backward(g):
        return g[..., :p], g[..., p:]

    return make_node(out, (a, b), backward)


def stats_pool(x: Tensor, lengths: Sequence[int] | None = None, eps: float = 1e-10) -> Tensor:
    """Mean and standard deviation over valid frames, concatenated: ``(N, T, c) -> (N, 2c)``."""
    x = as_tensor(x)
    squeeze = x.values.ndim == 2
    xv = x.values[None] if squeeze else x.values
    n, t, c = xv.shape
    lens = np.full(n, t) if lengths is None else np.asarray(lengths)
    mask = (np.arange(t)[None, :] < lens[:, None])[..., None]
    counts = lens[:, None].astype(np.float64)
    mean = np.where(mask, xv, 0.0).sum(axis=1) / counts
    centered = np.where(mask, xv - mean[:, None, :], 0.0)
    std = np.sqrt((centered**2).sum(axis=1) / counts + eps)
    out = np.concatenate([mean, std], axis=-1)

    def backward(g):
        g2 = g[None] if squeeze else g
        g_mean, g_std = g2[:, :c], g2[:, c:]
        g_x = (g_mean / counts)[:, None, :] + centered * (g_std / (counts * std))[:, None, :]
        g_x = np.where(mask, g_x, 0.0)
        return (g_x[0] if squeeze else g_x,)

    return make_node(out[0] if squeeze else out, (x,), backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax(logits.values)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_node(np.asarray(loss), (logits,), backward)
