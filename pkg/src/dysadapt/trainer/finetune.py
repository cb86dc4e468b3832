"""Batched CTC training, evaluation and the two-stage adapter schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from dysadapt.adapter import is_adapter_param
from dysadapt.corpus.synth import UtteranceRecord, to_waveform
from dysadapt.corpus.wer import SEVERITIES, WerResult, word_error_rate
from dysadapt.encoder import EncoderModel, pad_batch
from dysadapt.errors import ConfigurationError, DataError
from dysadapt.nn import no_grad
from dysadapt.trainer.ctc import ctc_loss, greedy_decode
from dysadapt.trainer.optim import AdamW, TrainConfig

LOG_HEADER = ("epoch", "stage", "steps", "train_loss", "dev_loss", "dev_wer") + tuple(f"wer_{s}" for s in SEVERITIES)


@dataclass
class AuxFeatures:
    """Auxiliary inputs keyed by utterance id.

    ``fmllr`` holds ``T x p`` frame sequences; ``xvector`` holds one vector
    per utterance (or per speaker, looked up as a fallback).
    """

    fmllr: dict[str, np.ndarray] = field(default_factory=dict)
    xvector: dict[str, np.ndarray] = field(default_factory=dict)

    def for_record(self, model: EncoderModel, rec: UtteranceRecord, n_frames: int) -> dict[int, np.ndarray]:
        out = {}
        for block, spec in model.adapters.items():
            if spec.aux_kind == "fmllr":
                if rec.utt_id not in self.fmllr:
                    raise DataError(f"no fMLLR features for utterance {rec.utt_id!r} (adapter at block {block})")
                out[block] = self.fmllr[rec.utt_id]
            elif spec.aux_kind == "xvector":
                vec = self.xvector.get(rec.utt_id, self.xvector.get(rec.speaker))
                if vec is None:
                    raise DataError(f"no x-vector for utterance {rec.utt_id!r} (adapter at block {block})")
                out[block] = np.repeat(np.asarray(vec, dtype=np.float64).reshape(1, -1), n_frames, axis=0)
        return out


@dataclass
class Batch:
    waveform: np.ndarray
    lengths: list[int]
    targets: list[list[int]]
    aux: dict[int, np.ndarray]


def make_batch(model: EncoderModel, records: Sequence[UtteranceRecord], aux: AuxFeatures | None) -> Batch:
    from dysadapt.adapter import resample_frames

    factor = model.config.subsample_factor
    waves = [to_waveform(r.features, factor) for r in records]
    x, lengths = pad_batch(waves)
    frames = [length // factor for length in lengths]
    t_max = max(frames)
    aux = aux or AuxFeatures()
    per_block: dict[int, list[np.ndarray]] = {b: [] for b in model.adapters}
    for rec, t in zip(records, frames):
        found = aux.for_record(model, rec, t)
        for b in model.adapters:
            if b in found:
                per_block[b].append(resample_frames(found[b], t))
    aux_arrays = {}
    for b, seqs in per_block.items():
        if seqs:
            arr = np.zeros((len(seqs), t_max, seqs[0].shape[1]))
            for i, s in enumerate(seqs):
                arr[i, : s.shape[0]] = s
            aux_arrays[b] = arr
    return Batch(x, lengths, [list(r.transcript) for r in records], aux_arrays)


def batch_loss(model: EncoderModel, batch: Batch, blank: int):
    logits, out_lengths = model.logits(batch.waveform, batch.aux, batch.lengths)
    return ctc_loss(logits, batch.targets, blank, out_lengths)


@dataclass
class Evaluation:
    loss: float
    wer: WerResult
    hyps: list[list[int]]


def evaluate(
    model: EncoderModel,
    records: Sequence[UtteranceRecord],
    blank: int,
    aux: AuxFeatures | None = None,
    batch_size: int = 64,
) -> Evaluation:
    """Mean CTC loss and greedy-decoding WER over ``records``."""
    hyps: list[list[int]] = []
    total = 0.0
    with no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i : i + batch_size]
            batch = make_batch(model, chunk, aux)
            logits, out_lengths = model.logits(batch.waveform, batch.aux, batch.lengths)
            total += float(ctc_loss(logits, batch.targets, blank, out_lengths).values) * len(chunk)
            hyps.extend(greedy_decode(logits.values[j], blank, out_lengths[j]) for j in range(len(chunk)))
    refs = [r.transcript for r in records]
    wer = word_error_rate(refs, hyps, [r.severity for r in records])
    return Evaluation(total / len(records), wer, hyps)


def decode(model: EncoderModel, records: Sequence[UtteranceRecord], blank: int, aux: AuxFeatures | None = None) -> list[list[int]]:
    return evaluate(model, records, blank, aux).hyps


def make_train_config(
    n_train: int,
    epochs: int,
    batch_size: int,
    peak_lr: float = 1e-4,
    warmup_steps: int = 500,
    seed: int = 0,
    stage1_fraction: float = 0.1,
    **kwargs,
) -> TrainConfig:
    """Size the step schedule from the corpus: ``total_steps = epochs * ceil(n_train / batch_size)``."""
    total = epochs * math.ceil(n_train / batch_size)
    warmup = min(warmup_steps, max(1, total - 1))
    return TrainConfig(
        peak_lr=peak_lr,
        warmup_steps=warmup,
        total_steps=total,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        stage1_steps=int(stage1_fraction * total),
        **kwargs,
    )


@dataclass
class TrainResult:
    log: list[dict]
    steps: int
    stage1_steps_run: int
    losses: list[float]


def format_log_line(entry: Mapping) -> str:
    cells = []
    for key in LOG_HEADER:
        v = entry.get(key)
        if v is None:
            cells.append("NA")
        elif isinstance(v, float):
            cells.append(f"{v:.6f}")
        else:
            cells.append(str(v))
    return "\t".join(cells)


def write_log(path: str | Path, log: Sequence[Mapping]) -> None:
    lines = ["\t".join(LOG_HEADER)] + [format_log_line(e) for e in log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    model: EncoderModel,
    train_records: Sequence[UtteranceRecord],
    dev_records: Sequence[UtteranceRecord],
    blank: int,
    cfg: TrainConfig,
    aux: AuxFeatures | None = None,
    two_stage: bool = True,
    early_stopping: bool = True,
    eval_every_epoch: bool = True,
) -> TrainResult:
    """Train ``model`` in place for up to ``cfg.epochs`` epochs / ``cfg.total_steps`` steps.

    With adapters mounted and ``two_stage`` set, the first
    ``cfg.stage1_steps`` steps update only adapter and auxiliary-net
    parameters; everything else is frozen. Afterwards all parameters train.
    Early stopping applies to the second stage only.
    """
    if not train_records:
        raise ConfigurationError("no training utterances")
    use_stages = two_stage and bool(model.adapters) and cfg.stage1_steps > 0
    stage1_steps = cfg.stage1_steps if use_stages else 0
    if use_stages and not model.params.count(is_adapter_param):
        raise ConfigurationError("two-stage finetuning needs mounted adapters")
    opt = AdamW(cfg)
    n = len(train_records)
    step = 0
    log: list[dict] = []
    losses: list[float] = []
    best_dev = math.inf
    stale = 0
    current_stage = None
    for epoch in range(1, cfg.epochs + 1):
        if step >= cfg.total_steps:
            break
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        stage_losses: dict[int, list[float]] = {}
        for start in range(0, n, cfg.batch_size):
            if step >= cfg.total_steps:
                break
            step += 1
            stage = 1 if step <= stage1_steps else 2
            if stage != current_stage:
                model.params.unfreeze()
                if stage == 1:
                    model.params.freeze(lambda name: not is_adapter_param(name))
                current_stage = stage
            batch = make_batch(model, [train_records[i] for i in order[start : start + cfg.batch_size]], aux)
            model.params.zero_grad()
            loss = batch_loss(model, batch, blank)
            loss.backward()
            opt.step(model.params, step)
            value = float(loss.values)
            losses.append(value)
            stage_losses.setdefault(stage, []).append(value)
        ev = evaluate(model, dev_records, blank, aux) if (eval_every_epoch and dev_records) else None
        for stage, vals in sorted(stage_losses.items()):
            entry = {
                "epoch": epoch,
                "stage": stage,
                "steps": len(vals),
                "train_loss": float(np.mean(vals)),
                "dev_loss": ev.loss if ev else None,
                "dev_wer": ev.wer.wer if ev else None,
            }
            for tier in SEVERITIES:
                entry[f"wer_{tier}"] = ev.wer.severity_wer(tier) if ev else None
            log.append(entry)
        if early_stopping and ev is not None and current_stage == 2 and cfg.patience > 0:
            if ev.loss < best_dev - cfg.min_delta:
                best_dev, stale = ev.loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    model.params.unfreeze()
    return TrainResult(log, step, min(step, stage1_steps), losses)
