"""End-to-end experiment steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from dysadapt.adapter import AdapterSpec, mount, mount_dual
from dysadapt.corpus.synth import SynthConfig, UtteranceRecord, generate_corpus, split, to_waveform
from dysadapt.corpus.vocab import Vocabulary, phone_names
from dysadapt.encoder import EncoderConfig, EncoderModel
from dysadapt.errors import ConfigurationError, DataError, EstimationError
from dysadapt.speaker.fmllr import SpeakerTransform, fmllr_apply, fmllr_estimate
from dysadapt.speaker.gmm import GaussianMixture, gmm_fit
from dysadapt.speaker.lda import lda_fit
from dysadapt.speaker.xvector import XVectorExtractor
from dysadapt.trainer.finetune import AuxFeatures, Evaluation, TrainResult, evaluate, make_train_config, train

log = logging.getLogger(__name__)

AUX_CHOICES = ("none", "fmllr", "xvector", "both")


@dataclass
class CorpusSettings:
    n_tokens: int = 12
    severity_counts: dict[str, int] = field(default_factory=lambda: {"VL": 2, "L": 2, "M": 2, "H": 2})
    utts_per_speaker: int = 150
    pretrain_speakers: int = 16
    pretrain_utts: int = 60
    pretrain_scale: float = 0.05
    language: str = "EN"
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class TrainSettings:
    epochs: int = 8
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 50
    stage1_fraction: float = 0.1
    early_stopping: bool = True


@dataclass
class ExtractSettings:
    fmllr_dim: int = 8
    gmm_components: int = 24
    gmm_iters: int = 20
    fmllr_iters: int = 10
    xvector_dim: int = 32
    xvector_steps: int = 300


@dataclass
class AdapterSettings:
    bottleneck_dim: int | None = None  # default h // 16
    aux_proj_dim: int = 64
    xvector_block: int = 2
    fmllr_block: int | None = None  # default: last block
    relu_after_up: bool = False


def build_corpus(settings: CorpusSettings, seed: int) -> tuple[list[UtteranceRecord], list[UtteranceRecord], Vocabulary]:
    """Return ``(pretrain_records, dysarthric_records, vocab)``."""
    vocab = Vocabulary.from_names(phone_names(settings.n_tokens), settings.language)
    dys, _ = generate_corpus(
        settings.severity_counts, vocab, settings.utts_per_speaker, seed=seed, cfg=settings.synth, language=settings.language
    )
    pre, _ = generate_corpus(
        {"VL": settings.pretrain_speakers},
        vocab,
        settings.pretrain_utts,
        seed=seed + 10_000,
        cfg=settings.synth,
        language=settings.language,
        speaker_prefix="C",
        scale_override=settings.pretrain_scale,
    )
    return pre, dys, vocab


def pretrain(
    records: Sequence[UtteranceRecord],
    dev: Sequence[UtteranceRecord],
    vocab: Vocabulary,
    enc_cfg: EncoderConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[EncoderModel, TrainResult]:
    """Plain CTC training of a fresh encoder; stands in for the public pretrained checkpoint."""
    model = EncoderModel.create(enc_cfg, vocab.output_size, seed=seed)
    model.metadata["vocab"] = [list(t) for t in vocab.tokens]
    train_recs = split(records, "train") or list(records)
    cfg = make_train_config(
        len(train_recs), settings.epochs, settings.batch_size, settings.peak_lr, settings.warmup_steps, seed=seed
    )
    result = train(model, train_recs, dev, vocab.blank, cfg, early_stopping=settings.early_stopping)
    return model, result


@dataclass
class FmllrPipeline:
    projection: np.ndarray
    gmm: GaussianMixture
    transforms: dict[str, SpeakerTransform]
    features: dict[str, np.ndarray]


def extract_final_block(model: EncoderModel, records: Sequence[UtteranceRecord]) -> dict[str, np.ndarray]:
    factor = model.config.subsample_factor
    return {r.utt_id: model.extract_features(to_waveform(r.features, factor)) for r in records}


def extract_fmllr(model: EncoderModel, records: Sequence[UtteranceRecord], settings: ExtractSettings, seed: int = 0) -> FmllrPipeline:
    """Final-block features -> LDA (phone labels) -> flat GMM -> per-speaker fMLLR.

    LDA and the GMM see training-split frames only; each speaker's
    transform is estimated from all of that speaker's frames.
    """
    hidden = extract_final_block(model, records)
    train_recs = [r for r in records if r.split == "train"]
    labelled = [r for r in train_recs if r.phone_labels is not None]
    if not labelled:
        raise DataError("LDA needs frame-level phone labels on the training split")
    for r in labelled:
        if len(r.phone_labels) != hidden[r.utt_id].shape[0]:
            raise DataError(
                f"utterance {r.utt_id}: {len(r.phone_labels)} frame labels for {hidden[r.utt_id].shape[0]} encoder frames"
            )
    x_train = np.concatenate([hidden[r.utt_id] for r in labelled])
    y_train = np.concatenate([r.phone_labels for r in labelled])
    projection = lda_fit(x_train, y_train, settings.fmllr_dim)
    projected = {k: v @ projection for k, v in hidden.items()}
    gmm = gmm_fit(np.concatenate([projected[r.utt_id] for r in train_recs]), settings.gmm_components, settings.gmm_iters, seed=seed)
    transforms: dict[str, SpeakerTransform] = {}
    features: dict[str, np.ndarray] = {}
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for r in records:
        by_speaker.setdefault(r.speaker, []).append(r)
    for spk in sorted(by_speaker):
        frames = np.concatenate([projected[r.utt_id] for r in by_speaker[spk]])
        if frames.shape[0] < settings.fmllr_dim + 1:
            raise EstimationError(f"speaker {spk!r} has only {frames.shape[0]} frames; need {settings.fmllr_dim + 1}")
        tr = fmllr_estimate(frames, gmm, settings.fmllr_iters, speaker=spk)
        transforms[spk] = tr
        for r in by_speaker[spk]:
            features[r.utt_id] = fmllr_apply(projected[r.utt_id], tr)
    return FmllrPipeline(projection, gmm, transforms, features)


def extract_xvectors(records: Sequence[UtteranceRecord], settings: ExtractSettings, seed: int = 0) -> tuple[XVectorExtractor, dict[str, np.ndarray]]:
    """Train the toy extractor on training-split speakers; embed every utterance."""
    train_recs = [r for r in records if r.split == "train"]
    speakers = sorted({r.speaker for r in train_recs})
    index = {s: i for i, s in enumerate(speakers)}
    ext = XVectorExtractor.create(records[0].features.shape[1], len(speakers), settings.xvector_dim, seed=seed)
    ext.fit([r.features for r in train_recs], [index[r.speaker] for r in train_recs], steps=settings.xvector_steps, seed=seed)
    return ext, {r.utt_id: ext.extract(r.features, r.utt_id).vector for r in records}


def adapter_specs(
    aux: str,
    enc_cfg: EncoderConfig,
    settings: AdapterSettings,
    fmllr_dim: int,
    xvector_dim: int,
    xvector_block: int | None = None,
) -> list[AdapterSpec]:
    if aux not in AUX_CHOICES:
        raise ConfigurationError(f"aux must be one of {AUX_CHOICES}, got {aux!r}")
    d = settings.bottleneck_dim or max(1, enc_cfg.hidden_size // 16)
    common = dict(bottleneck_dim=d, aux_proj_dim=settings.aux_proj_dim, relu_after_up=settings.relu_after_up)
    f_block = settings.fmllr_block or enc_cfg.n_blocks
    x_block = xvector_block or settings.xvector_block
    specs = []
    if aux in ("xvector", "both"):
        specs.append(AdapterSpec(x_block, aux_kind="xvector", aux_dim=xvector_dim, **common))
    if aux in ("fmllr", "both"):
        specs.append(AdapterSpec(f_block, aux_kind="fmllr", aux_dim=fmllr_dim, **common))
    if aux == "both" and specs[0].block_index == specs[1].block_index:
        raise ConfigurationError("aux 'both' needs two distinct adapter blocks")
    return specs


def finetune(
    base: EncoderModel,
    train_records: Sequence[UtteranceRecord],
    dev_records: Sequence[UtteranceRecord],
    vocab: Vocabulary,
    specs: Sequence[AdapterSpec],
    aux: AuxFeatures,
    settings: TrainSettings,
    seed: int,
) -> tuple[EncoderModel, TrainResult]:
    """Copy ``base``, mount ``specs`` and run the two-stage schedule (one stage without adapters)."""
    model = clone(base)
    known = model.metadata.get("vocab")
    if model.vocab_size != vocab.output_size or (known is not None and known != [list(t) for t in vocab.tokens]):
        model.init_head(vocab.output_size, np.random.default_rng([seed, 7]))
    model.metadata["vocab"] = [list(t) for t in vocab.tokens]
    specs = list(specs)
    if len(specs) == 2 and {s.aux_kind for s in specs} == {"xvector", "fmllr"}:
        x_spec = next(s for s in specs if s.aux_kind == "xvector")
        f_spec = next(s for s in specs if s.aux_kind == "fmllr")
        mount_dual(model, x_spec, f_spec, seed)
    else:
        for spec in specs:
            mount(model, spec, seed)
    cfg = make_train_config(
        len(train_records),
        settings.epochs,
        settings.batch_size,
        settings.peak_lr,
        settings.warmup_steps,
        seed=seed,
        stage1_fraction=settings.stage1_fraction,
    )
    result = train(model, train_records, dev_records, vocab.blank, cfg, aux, early_stopping=settings.early_stopping)
    return model, result


def clone(model: EncoderModel) -> EncoderModel:
    out = EncoderModel(model.config, model.vocab_size, metadata=dict(model.metadata))
    for name, t in model.params.items():
        out.params.add(name, t.values.copy())
    out.adapters = dict(model.adapters)
    return out


def score(model: EncoderModel, records: Sequence[UtteranceRecord], vocab: Vocabulary, aux: AuxFeatures | None = None) -> Evaluation:
    return evaluate(model, list(records), vocab.blank, aux)


@dataclass
class SeedRun:
    seed: int
    wers: dict[str, float]
    rows: dict[str, dict]


def run_comparison(
    seed: int,
    variants: Sequence[str] = ("none", "fmllr", "xvector", "both"),
    enc_cfg: EncoderConfig | None = None,
    corpus: CorpusSettings | None = None,
    pre_settings: TrainSettings | None = None,
    ft_settings: TrainSettings | None = None,
    extract: ExtractSettings | None = None,
    adapters: AdapterSettings | None = None,
    xvector_blocks: Sequence[int] = (),
) -> SeedRun:
    """Generate, pretrain, extract and finetune every variant for one seed; test-split WERs.

    ``xvector_blocks`` adds ``xvector@<b>`` variants with the x-vector
    adapter at block ``b`` (the block sweep).
    """
    corpus = corpus or CorpusSettings()
    enc_cfg = enc_cfg or EncoderConfig(input_channels=corpus.synth.feat_dim)
    pre_settings = pre_settings or TrainSettings(epochs=6)
    ft_settings = ft_settings or TrainSettings()
    extract = extract or ExtractSettings()
    adapters = adapters or AdapterSettings()

    pre, dys, vocab = build_corpus(corpus, seed)
    train_recs, test_recs = split(dys, "train"), split(dys, "test")
    base, _ = pretrain(pre, [], vocab, enc_cfg, replace(pre_settings, early_stopping=False), seed)
    aux = AuxFeatures()
    needs_f = any(v in ("fmllr", "both") for v in variants)
    needs_x = any(v in ("xvector", "both") for v in variants) or bool(xvector_blocks)
    if needs_f:
        aux.fmllr = extract_fmllr(base, dys, extract, seed).features
    if needs_x:
        _, aux.xvector = extract_xvectors(dys, extract, seed)
    jobs = [(v, adapter_specs(v, enc_cfg, adapters, extract.fmllr_dim, extract.xvector_dim)) for v in variants]
    jobs += [
        (f"xvector@{b}", adapter_specs("xvector", enc_cfg, adapters, extract.fmllr_dim, extract.xvector_dim, xvector_block=b))
        for b in xvector_blocks
    ]
    wers, rows = {}, {}
    for name, specs in jobs:
        model, _ = finetune(base, train_recs, [], vocab, specs, aux, ft_settings, seed)
        ev = score(model, test_recs, vocab, aux)
        wers[name] = ev.wer.wer
        rows[name] = ev.wer.row()
        log.info("seed %d %s: WER %.4f %s", seed, name, ev.wer.wer, rows[name])
    return SeedRun(seed, wers, rows)
