"""Text formats for feature archives, speaker embeddings and fMLLR transforms.

Numbers are written with 17 significant digits so every float64 survives a
write/read round trip exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from dysadapt.errors import FormatError
from dysadapt.speaker.fmllr import SpeakerTransform
from dysadapt.speaker.xvector import SpeakerEmbedding


def _fmt(row: Iterable[float]) -> str:
    return " ".join(format(float(v), ".17g") for v in row)


def write_feature_archive(path: str | Path, feats: Mapping[str, np.ndarray]) -> None:
    """Each entry: ``<utt-id> <T> <d>`` followed by ``T`` lines of ``d`` values."""
    lines = []
    for key, mat in feats.items():
        mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
        lines.append(f"{key} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(_fmt(row) for row in mat)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_feature_archive(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) != 3:
            raise FormatError(f"{path}:{i + 1}: expected '<id> <T> <d>', got {lines[i]!r}")
        key, t, d = head[0], int(head[1]), int(head[2])
        if key in out:
            raise FormatError(f"{path}:{i + 1}: duplicate entry {key!r}")
        rows = lines[i + 1 : i + 1 + t]
        if len(rows) != t:
            raise FormatError(f"{path}: entry {key!r} is truncated")
        mat = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64).reshape(t, d)
        out[key] = mat
        i += 1 + t
    return out


def write_int_archive(path: str | Path, seqs: Mapping[str, Iterable[int]]) -> None:
    Path(path).write_text("".join(f"{k} {' '.join(str(int(v)) for v in s)}\n" for k, s in seqs.items()), encoding="utf-8")


def read_int_archive(path: str | Path) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if parts:
            out[parts[0]] = [int(v) for v in parts[1:]]
    return out


def write_embeddings(path: str | Path, embeddings: Mapping[str, SpeakerEmbedding | np.ndarray]) -> None:
    lines = []
    for key, emb in embeddings.items():
        vec = emb.vector if isinstance(emb, SpeakerEmbedding) else np.asarray(emb)
        lines.append(f"{key} {_fmt(vec)}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_external_embeddings(path: str | Path) -> dict[str, SpeakerEmbedding]:
    """Read ``id v1 v2 ... vk`` lines; all records must share one width."""
    out: dict[str, SpeakerEmbedding] = {}
    width = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: embedding {key!r} has a non-numeric value") from exc
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise FormatError(f"{path}:{lineno}: embedding {key!r} has width {len(vec)}, expected {width}")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate embedding id {key!r}")
        out[key] = SpeakerEmbedding(key, vec)
    return out


def write_transforms(path: str | Path, transforms: Iterable[SpeakerTransform]) -> None:
    lines = []
    for tr in transforms:
        lines.append(f"{tr.speaker} {tr.dim}")
        lines.extend(_fmt(row) for row in tr.W)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_transforms(path: str | Path) -> dict[str, SpeakerTransform]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    out = {}
    i = 0
    while i < len(lines):
        spk, d = lines[i].split()
        d = int(d)
        rows = [[float(v) for v in ln.split()] for ln in lines[i + 1 : i + 1 + d]]
        out[spk] = SpeakerTransform(spk, np.array(rows))
        i += 1 + d
    return out
