"""Token inventories with language tags and a reserved CTC blank."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from dysadapt.errors import ConfigurationError, FormatError

BLANK = "<blank>"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered ``(name, language)`` units; the blank sits after them at index ``len(tokens)``."""

    tokens: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary tokens must be unique under (name, language)")
        if any(name == BLANK for name, _ in self.tokens):
            raise ConfigurationError(f"{BLANK} is reserved")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @classmethod
    def from_names(cls, names: Iterable[str], language: str = "EN") -> "Vocabulary":
        return cls(tuple((n, language) for n in names))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return len(self.tokens)

    @property
    def output_size(self) -> int:
        """Units in the output layer, blank included."""
        return len(self.tokens) + 1

    @property
    def languages(self) -> list[str]:
        return sorted({lang for _, lang in self.tokens})

    def index(self, name: str, language: str) -> int:
        try:
            return self._index[(name, language)]
        except KeyError:
            raise ConfigurationError(f"token {name!r} ({language}) is not in the vocabulary") from None

    def encode(self, names: Sequence[str], language: str) -> list[int]:
        return [self.index(n, language) for n in names]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i][0] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{n}\t{lang}\n" for n, lang in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected '<token>\\t<language>'")
            tokens.append((parts[0], parts[1]))
        return cls(tuple(tokens))


def merge_vocabularies(*vocabs: Vocabulary) -> Vocabulary:
    """Concatenate language-tagged inventories; shared names stay distinct through their tags."""
    merged: list[tuple[str, str]] = []
    for v in vocabs:
        merged.extend(v.tokens)
    return Vocabulary(tuple(merged))


def phone_names(n: int, prefix: str = "p") -> list[str]:
    return [f"{prefix}{i:02d}" for i in range(n)]
