"""AdamW with linear warmup / linear decay and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dysadapt.errors import ConfigurationError
from dysadapt.nn.params import ParamStore


@dataclass
class TrainConfig:
    # defaults follow the reference wav2vec2 finetuning recipe
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    epochs: int = 30
    seed: int = 0
    stage1_steps: int | None = None
    batch_size: int = 8
    patience: int = 3
    min_delta: float = 1e-3

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )
        if self.grad_clip_norm <= 0:
            raise ConfigurationError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.stage1_steps is None:
            self.stage1_steps = self.total_steps // 10

    def lr(self, step: int) -> float:
        return learning_rate(step, self.peak_lr, self.warmup_steps, self.total_steps)


def learning_rate(step: int, peak: float, warmup: int, total: int) -> float:
    if step <= warmup:
        return peak * step / warmup
    return peak * max(total - step, 0) / (total - warmup)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over the trainable names of a ParamStore."""

    cfg: TrainConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def step(self, store: ParamStore, step: int, grads: dict[str, np.ndarray] | None = None) -> float:
        """Apply one update at schedule position ``step`` (1-based); returns the pre-clip gradient norm.

        ``grads`` defaults to the ``.grad`` slots of the trainable tensors;
        missing gradients count as zero. Clipping uses the norm over
        trainable parameters only.
        """
        if step < 1:
            raise ConfigurationError(f"optimizer step must be >= 1, got {step}")
        cfg = self.cfg
        names = store.trainable()
        if grads is None:
            grads = {n: store[n].grad for n in names if store[n].grad is not None}
        else:
            grads = {n: g for n, g in grads.items() if n in names}
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
        lr = cfg.lr(step)
        for name in names:
            p = store[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.values)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
                self.t[name] = 0
            self.t[name] += 1
            k = self.t[name]
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - cfg.beta1**k)
            v_hat = v / (1 - cfg.beta2**k)
            update = m_hat / (np.sqrt(v_hat) + cfg.epsilon)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.values
            p.values = p.values - lr * update
        return norm
