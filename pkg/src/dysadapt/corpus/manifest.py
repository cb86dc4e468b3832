"""On-disk corpus layout and manifest parsing.

A corpus directory holds::

    vocab.txt            token<TAB>language per line
    speakers.json        speaker profiles (synthetic corpora only)
    train.tsv, test.tsv  manifests
    feats/<spk>.ark      feature archives, one per speaker
    clean/<spk>.ark      undistorted twins (synthetic only)
    alignments.txt       frame-level phone labels (synthetic only)

Manifest lines are tab-separated:
``utt_id  spk_id  severity  language  feature_path  transcript``, where
``feature_path`` is relative to the manifest and ``transcript`` is
space-separated token names.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from dysadapt.corpus.synth import SpeakerProfile, UtteranceRecord
from dysadapt.corpus.vocab import Vocabulary
from dysadapt.corpus.wer import SEVERITIES
from dysadapt.errors import DataError
from dysadapt.speaker.io import read_feature_archive, read_int_archive, write_feature_archive, write_int_archive

MANIFEST_FIELDS = ("utt_id", "spk_id", "severity", "language", "feature_path", "transcript")


def write_corpus(
    out_dir: str | Path,
    records: Iterable[UtteranceRecord],
    vocab: Vocabulary,
    profiles: Mapping[str, SpeakerProfile] | None = None,
) -> None:
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    records = list(records)
    vocab.save(out / "vocab.txt")
    if profiles is not None:
        payload = {spk: p.to_dict() for spk, p in profiles.items()}
        (out / "speakers.json").write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for r in records:
        by_speaker.setdefault(r.speaker, []).append(r)
    for spk, recs in by_speaker.items():
        write_feature_archive(out / "feats" / f"{spk}.ark", {r.utt_id: r.features for r in recs})
        if all(r.clean is not None for r in recs):
            (out / "clean").mkdir(exist_ok=True)
            write_feature_archive(out / "clean" / f"{spk}.ark", {r.utt_id: r.clean for r in recs})
    labelled = {r.utt_id: r.phone_labels for r in records if r.phone_labels is not None}
    if labelled:
        write_int_archive(out / "alignments.txt", labelled)
    for split in ("train", "test"):
        lines = [
            "\t".join([r.utt_id, r.speaker, r.severity, r.language, f"feats/{r.speaker}.ark", " ".join(r.words)])
            for r in records
            if r.split == split
        ]
        (out / f"{split}.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path: str | Path, vocab: Vocabulary | None = None, split: str | None = None) -> list[UtteranceRecord]:
    """Parse a manifest and load the referenced features.

    ``vocab`` defaults to ``vocab.txt`` beside the manifest. Raises
    ``DataError`` for unknown severities, missing files or utterances, and
    duplicate utterance ids (reporting both line numbers).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    root = path.parent
    if vocab is None and (root / "vocab.txt").exists():
        vocab = Vocabulary.load(root / "vocab.txt")
    split = split or path.stem
    alignments = read_int_archive(root / "alignments.txt") if (root / "alignments.txt").exists() else {}
    archives: dict[Path, dict] = {}
    seen: dict[str, int] = {}
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_FIELDS):
            raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} tab-separated fields, got {len(fields)}")
        utt, spk, severity, language, feat_path, transcript = fields
        if utt in seen:
            raise DataError(f"{path}: duplicate utterance id {utt!r} on lines {seen[utt]} and {lineno}")
        seen[utt] = lineno
        if severity not in SEVERITIES:
            raise DataError(f"{path}:{lineno}: unknown severity {severity!r} (expected one of {', '.join(SEVERITIES)})")
        feat_file = (root / feat_path).resolve()
        if not feat_file.exists():
            raise DataError(f"{path}:{lineno}: feature file {feat_path} not found")
        rows.append((lineno, utt, spk, severity, language, feat_file, transcript.split()))
    if vocab is None:
        names = sorted({(w, r[4]) for r in rows for w in r[6]})
        vocab = Vocabulary(tuple(names))

    records = []
    for lineno, utt, spk, severity, language, feat_file, words in rows:
        if feat_file not in archives:
            archives[feat_file] = read_feature_archive(feat_file)
        if utt not in archives[feat_file]:
            raise DataError(f"{path}:{lineno}: utterance {utt!r} missing from {feat_file.name}")
        clean_file = root / "clean" / feat_file.name
        clean = None
        if clean_file.exists():
            if clean_file not in archives:
                archives[clean_file] = read_feature_archive(clean_file)
            clean = archives[clean_file].get(utt)
        if not words:
            raise DataError(f"{path}:{lineno}: empty transcript for {utt!r}")
        try:
            ids = vocab.encode(words, language)
        except Exception as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        records.append(
            UtteranceRecord(
                utt_id=utt,
                speaker=spk,
                severity=severity,
                language=language,
                features=archives[feat_file][utt],
                words=words,
                transcript=ids,
                phone_labels=alignments.get(utt),
                clean=clean,
                split=split,
            )
        )
    return records


def load_corpus(corpus_dir: str | Path) -> tuple[list[UtteranceRecord], Vocabulary]:
    root = Path(corpus_dir)
    vocab = Vocabulary.load(root / "vocab.txt")
    records = []
    for split in ("train", "test"):
        if (root / f"{split}.tsv").exists():
            records.extend(load_manifest(root / f"{split}.tsv", vocab, split))
    return records, vocab


def load_profiles(corpus_dir: str | Path) -> dict[str, SpeakerProfile]:
    path = Path(corpus_dir) / "speakers.json"
    if not path.exists():
        return {}
    return {k: SpeakerProfile.from_dict(v) for k, v in json.loads(path.read_text(encoding="utf-8")).items()}
