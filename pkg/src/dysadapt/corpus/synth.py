"""Synthetic dysarthric-style corpora.

Each token has a canonical Gaussian feature template. An utterance renders
its token sequence as template frames with per-speaker duration jitter
(the clean twin), then applies the speaker's invertible affine distortion
and additive noise. Severity tiers scale distortion, jitter and noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from dysadapt.corpus.vocab import Vocabulary
from dysadapt.corpus.wer import SEVERITIES
from dysadapt.errors import ConfigurationError

SEVERITY_SCALES = {"VL": 0.1, "L": 0.3, "M": 0.6, "H": 1.0}


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    severity: str
    language: str
    features: np.ndarray
    words: list[str]
    transcript: list[int]
    phone_labels: list[int] | None = None
    clean: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self) -> None:
        if self.severity not in SEVERITIES:
            raise ConfigurationError(f"utterance {self.utt_id}: unknown severity {self.severity!r}")
        if not self.transcript:
            raise ConfigurationError(f"utterance {self.utt_id}: empty transcript")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SpeakerProfile:
    speaker: str
    severity: str
    A: np.ndarray
    b: np.ndarray
    jitter: float
    noise: float
    language: str = "EN"

    def distort(self, clean: np.ndarray) -> np.ndarray:
        return clean @ self.A.T + self.b

    def undistort(self, feats: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.A, (feats - self.b).T).T

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.A - np.eye(len(self.b))))

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker,
            "severity": self.severity,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "jitter": self.jitter,
            "noise": self.noise,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpeakerProfile":
        return cls(d["speaker"], d["severity"], np.array(d["A"]), np.array(d["b"]), d["jitter"], d["noise"], d["language"])


@dataclass
class SynthConfig:
    feat_dim: int = 8
    template_spread: float = 1.0
    phone_std: float = 0.35
    base_duration: int = 4
    silence_frames: int = 2
    tokens_per_utt: tuple[int, int] = (2, 4)
    distortion: float = 0.85  # Frobenius norm of A - I at scale 1
    offset: float = 1.5  # norm of b at scale 1
    jitter: float = 0.5  # duration jitter as a fraction of base duration at scale 1
    noise: float = 0.35  # additive noise std at scale 1
    test_fraction: float = 0.2
    template_seed: int = 1234


@dataclass
class PhoneInventory:
    templates: np.ndarray  # (n_tokens + 1) x d, last row is silence
    phone_std: float

    @property
    def silence(self) -> int:
        return self.templates.shape[0] - 1


def make_inventory(n_tokens: int, cfg: SynthConfig, language: str = "EN") -> PhoneInventory:
    """Canonical templates depend only on the language and ``cfg.template_seed``."""
    lang_key = sum(ord(c) * 31**i for i, c in enumerate(language)) % (2**31)
    rng = np.random.default_rng([cfg.template_seed, lang_key, n_tokens, cfg.feat_dim])
    templates = rng.normal(scale=cfg.template_spread, size=(n_tokens + 1, cfg.feat_dim))
    templates[-1] = 0.0
    return PhoneInventory(templates, cfg.phone_std)


def make_profile(speaker: str, severity: str, cfg: SynthConfig, rng: np.random.Generator, language: str = "EN", scale: float | None = None) -> SpeakerProfile:
    s = SEVERITY_SCALES[severity] if scale is None else scale
    d = cfg.feat_dim
    r = rng.normal(size=(d, d))
    u = rng.normal(size=d)
    # spectral norm of s*distortion*R/|R|_F stays below 1, so A is invertible
    A = np.eye(d) + s * cfg.distortion * r / np.linalg.norm(r)
    b = s * cfg.offset * u / np.linalg.norm(u)
    return SpeakerProfile(speaker, severity, A, b, s * cfg.jitter, s * cfg.noise, language)


def render(tokens: list[int], inventory: PhoneInventory, profile: SpeakerProfile, cfg: SynthConfig, rng: np.random.Generator):
    """Return ``(features, clean, frame_labels)`` for one token sequence."""
    labels: list[int] = [inventory.silence] * cfg.silence_frames
    spread = int(round(profile.jitter * cfg.base_duration))
    for tok in tokens:
        dur = cfg.base_duration + (int(rng.integers(-spread, spread + 1)) if spread else 0)
        labels.extend([tok] * max(dur, 2))
    labels.extend([inventory.silence] * cfg.silence_frames)
    lab = np.array(labels)
    clean = inventory.templates[lab] + inventory.phone_std * rng.standard_normal((len(lab), cfg.feat_dim))
    feats = profile.distort(clean)
    if profile.noise > 0:
        feats = feats + profile.noise * rng.standard_normal(feats.shape)
    return feats, clean, labels


def sample_tokens(n_tokens: int, cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    lo, hi = cfg.tokens_per_utt
    length = int(rng.integers(lo, hi + 1))
    out: list[int] = []
    while len(out) < length:
        tok = int(rng.integers(n_tokens))
        if not out or tok != out[-1]:
            out.append(tok)
    return out


def generate_corpus(
    severity_counts: Mapping[str, int],
    vocab: Vocabulary,
    utts_per_speaker: int,
    seed: int = 0,
    cfg: SynthConfig | None = None,
    language: str = "EN",
    speaker_prefix: str = "S",
    scale_override: float | None = None,
) -> tuple[list[UtteranceRecord], dict[str, SpeakerProfile]]:
    """Generate speakers per severity tier and their utterances.

    Speaker ``k`` draws from ``SeedSequence([seed, k])`` so the corpus is
    identical regardless of generation order. The last ``test_fraction`` of
    each speaker's utterances form the test split.
    """
    cfg = cfg or SynthConfig()
    if len(vocab) == 0:
        raise ConfigurationError("cannot generate a corpus from an empty vocabulary")
    if utts_per_speaker < 1:
        raise ConfigurationError("utts_per_speaker must be at least 1")
    for tier, count in severity_counts.items():
        if tier not in SEVERITIES:
            raise ConfigurationError(f"unknown severity tier {tier!r}")
        if count < 1:
            raise ConfigurationError(f"tier {tier} needs at least one speaker, got {count}")
    lang_tokens = [name for name, lang in vocab.tokens if lang == language]
    if not lang_tokens:
        raise ConfigurationError(f"vocabulary has no {language} tokens")
    inventory = make_inventory(len(lang_tokens), cfg, language)
    token_ids = vocab.encode(lang_tokens, language)

    records: list[UtteranceRecord] = []
    profiles: dict[str, SpeakerProfile] = {}
    k = 0
    n_test = int(round(cfg.test_fraction * utts_per_speaker))
    for tier in SEVERITIES:
        for _ in range(severity_counts.get(tier, 0)):
            spk = f"{speaker_prefix}{k:03d}{tier}"
            rng = np.random.default_rng([seed, k])
            profile = make_profile(spk, tier, cfg, rng, language, scale_override)
            profiles[spk] = profile
            for u in range(utts_per_speaker):
                local = sample_tokens(len(lang_tokens), cfg, rng)
                feats, clean, labels = render(local, inventory, profile, cfg, rng)
                records.append(
                    UtteranceRecord(
                        utt_id=f"{spk}_U{u:04d}",
                        speaker=spk,
                        severity=tier,
                        language=language,
                        features=feats,
                        words=[lang_tokens[t] for t in local],
                        transcript=[token_ids[t] for t in local],
                        phone_labels=labels,
                        clean=clean,
                        split="test" if u >= utts_per_speaker - n_test else "train",
                    )
                )
            k += 1
    return records, profiles


def to_waveform(features: np.ndarray, factor: int) -> np.ndarray:
    """Pseudo-waveform: each feature frame held for ``factor`` samples."""
    return np.repeat(features, factor, axis=0)


def split(records: list[UtteranceRecord], name: str) -> list[UtteranceRecord]:
    return [r for r in records if r.split == name]
