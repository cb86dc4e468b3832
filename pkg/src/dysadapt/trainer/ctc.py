"""CTC loss (log-space forward-backward) and greedy decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from dysadapt.errors import InfeasibleTargetError
from dysadapt.nn.ops import log_softmax
from dysadapt.nn.tensor import Tensor, as_tensor, make_node

NEG_INF = -np.inf


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    total = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(total), NEG_INF)


def _shift(row: np.ndarray, k: int) -> np.ndarray:
    """``row`` moved ``k`` states right (k > 0) or left (k < 0), padded with -inf."""
    out = np.full_like(row, NEG_INF)
    if abs(k) < len(row):
        if k > 0:
            out[k:] = row[:-k]
        else:
            out[:k] = row[-k:]
    return out


def ctc_forward_backward(logp: np.ndarray, target: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Return ``(-log p(target | logp), d loss / d logp)`` for one utterance.

    ``logp`` is ``T x V`` log-probabilities. Alphas include the emission at
    ``t``; betas cover frames after ``t`` only, so ``alpha * beta`` is the
    mass of paths through state ``s`` at ``t``.
    """
    t_len, vocab = logp.shape
    target = list(target)
    if t_len < min_frames(target):
        raise InfeasibleTargetError(
            f"target of length {len(target)} needs at least {min_frames(target)} frames, got {t_len}"
        )
    ext = np.full(2 * len(target) + 1, blank, dtype=int)
    ext[1::2] = target
    s_len = len(ext)
    # skip transition s-2 -> s allowed for labels that differ from the label two back
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = logp[:, ext]
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = _shift(prev, 1)
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _logsumexp3(stay, step, jump) + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = _shift(nxt, -1)
        jump = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = _logsumexp3(stay, step, jump)

    ends = alpha[-1, -2:] if s_len > 1 else alpha[-1, -1:]
    log_total = np.logaddexp.reduce(ends)
    if not np.isfinite(log_total):
        raise InfeasibleTargetError("target has zero probability under the given scores")

    occupancy = np.exp(alpha + beta - log_total)
    grad = np.zeros((t_len, vocab))
    for s in range(s_len):
        grad[:, ext[s]] -= occupancy[:, s]
    return float(-log_total), grad


def ctc_loss(
    logits: Tensor,
    targets: Sequence[Sequence[int]] | Sequence[int],
    blank: int,
    lengths: Sequence[int] | None = None,
) -> Tensor:
    """Mean CTC negative log-likelihood over a batch.

    ``logits`` is ``T x V`` (then ``targets`` is one id sequence) or
    ``N x T x V`` with per-utterance ``lengths``.
    """
    logits = as_tensor(logits)
    squeeze = logits.values.ndim == 2
    z = logits.values[None] if squeeze else logits.values
    batch = [targets] if squeeze else list(targets)
    n, t_max, _ = z.shape
    lens = [t_max] * n if lengths is None else list(lengths)
    logp = log_softmax(z)
    grads = np.zeros_like(z)
    total = 0.0
    for i in range(n):
        loss_i, g_logp = ctc_forward_backward(logp[i, : lens[i]], batch[i], blank)
        total += loss_i
        # through log-softmax: dL/dz = softmax * sum(dL/dlogp) - (-dL/dlogp)
        probs = np.exp(logp[i, : lens[i]])
        grads[i, : lens[i]] = g_logp - probs * g_logp.sum(axis=-1, keepdims=True)

    def backward(g):
        out = grads * (g / n)
        return (out[0] if squeeze else out,)

    return make_node(np.asarray(total / n), (logits,), backward)


def greedy_decode(logits: np.ndarray | Tensor, blank: int, length: int | None = None) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks."""
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    best = values[:length].argmax(axis=-1) if length is not None else values.argmax(axis=-1)
    out: list[int] = []
    previous = None
    for token in best.tolist():
        if token != previous and token != blank:
            out.append(token)
        previous = token
    return out
