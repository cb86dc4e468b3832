"""A small x-vector extractor: frame layers, mean+std pooling, embedding layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dysadapt.encoder import pad_batch
from dysadapt.errors import InsufficientFramesError
from dysadapt.nn import ParamStore, cross_entropy, linear, no_grad, relu, stats_pool, uniform_init


@dataclass
class SpeakerEmbedding:
    key: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding {self.key!r} has non-finite values")


@dataclass
class XVectorExtractor:
    input_dim: int
    frame_widths: tuple[int, ...] = (64, 64)
    embedding_dim: int = 32
    n_speakers: int = 1
    params: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def create(cls, input_dim: int, n_speakers: int, embedding_dim: int = 32, frame_widths=(64, 64), seed: int = 0):
        ext = cls(input_dim, tuple(frame_widths), embedding_dim, n_speakers)
        rng = np.random.default_rng(seed)
        width = input_dim
        for i, out in enumerate(ext.frame_widths):
            ext.params.add(f"frame.{i}.w", uniform_init(rng, width, (width, out)))
            ext.params.add(f"frame.{i}.b", uniform_init(rng, width, (out,)))
            width = out
        ext.params.add("segment.w", uniform_init(rng, 2 * width, (2 * width, embedding_dim)))
        ext.params.add("segment.b", uniform_init(rng, 2 * width, (embedding_dim,)))
        ext.params.add("classifier.w", uniform_init(rng, embedding_dim, (embedding_dim, n_speakers)))
        ext.params.add("classifier.b", uniform_init(rng, embedding_dim, (n_speakers,)))
        return ext

    def _embed(self, x, lengths=None):
        h = x
        for i in range(len(self.frame_widths)):
            h = relu(linear(h, self.params[f"frame.{i}.w"], self.params[f"frame.{i}.b"]))
        pooled = stats_pool(h, lengths)
        return linear(pooled, self.params["segment.w"], self.params["segment.b"])

    def extract(self, features: np.ndarray, key: str = "") -> SpeakerEmbedding:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[0] < 2:
            raise InsufficientFramesError(f"x-vector extraction needs at least 2 frames, got {x.shape[0]}")
        with no_grad():
            return SpeakerEmbedding(key, self._embed(x).values.copy())

    def fit(
        self,
        utterances: Sequence[np.ndarray],
        speaker_labels: Sequence[int],
        steps: int = 300,
        batch_size: int = 32,
        peak_lr: float = 3e-3,
        seed: int = 0,
    ) -> list[float]:
        """Train on speaker classification; returns the per-step loss."""
        from dysadapt.trainer.optim import AdamW, TrainConfig

        cfg = TrainConfig(peak_lr=peak_lr, warmup_steps=max(1, steps // 10), total_steps=steps + 1, seed=seed)
        opt = AdamW(cfg)
        rng = np.random.default_rng(seed)
        labels = np.asarray(speaker_labels)
        losses = []
        for step in range(1, steps + 1):
            idx = rng.choice(len(utterances), size=min(batch_size, len(utterances)), replace=False)
            x, lengths = pad_batch([utterances[i] for i in idx])
            self.params.zero_grad()
            emb = self._embed(x, lengths)
            logits = linear(relu(emb), self.params["classifier.w"], self.params["classifier.b"])
            loss = cross_entropy(logits, labels[idx])
            loss.backward()
            opt.step(self.params, step)
            losses.append(float(loss.values))
        return losses
