"""Synthetic corpora, manifests, vocabularies and WER scoring."""

from dysadapt.corpus.manifest import load_corpus, load_manifest, load_profiles, write_corpus
from dysadapt.corpus.synth import SEVERITY_SCALES, SpeakerProfile, SynthConfig, UtteranceRecord, generate_corpus
from dysadapt.corpus.vocab import Vocabulary, merge_vocabularies, phone_names
from dysadapt.corpus.wer import SEVERITIES, WerResult, edit_distance, word_error_rate

__all__ = [
    "SEVERITIES",
    "SEVERITY_SCALES",
    "SpeakerProfile",
    "SynthConfig",
    "UtteranceRecord",
    "Vocabulary",
    "WerResult",
    "edit_distance",
    "generate_corpus",
    "load_corpus",
    "load_manifest",
    "load_profiles",
    "merge_vocabularies",
    "phone_names",
    "word_error_rate",
    "write_corpus",
]
