"""Word error rate via minimum edit distance, with a per-severity breakdown."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

from dysadapt.errors import UndefinedRateError

SEVERITIES = ("VL", "L", "M", "H")


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit substitution, deletion and insertion costs."""
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h))
        previous = current
    return previous[-1]


@dataclass
class WerResult:
    errors: int
    words: int
    by_severity: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def wer(self) -> float:
        return self.errors / self.words

    def severity_wer(self, tier: str) -> float | None:
        """WER for one tier, or ``None`` when the tier is absent."""
        if tier not in self.by_severity:
            return None
        e, n = self.by_severity[tier]
        return e / n

    def row(self) -> dict[str, float | None]:
        return {tier: self.severity_wer(tier) for tier in SEVERITIES}


def word_error_rate(
    refs: Sequence[Sequence[Hashable]],
    hyps: Sequence[Sequence[Hashable]],
    severities: Sequence[str] | None = None,
) -> WerResult:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    words = sum(len(r) for r in refs)
    if words == 0:
        raise UndefinedRateError("WER is undefined for an empty reference corpus")
    result = WerResult(0, words)
    for i, (r, h) in enumerate(zip(refs, hyps)):
        e = edit_distance(r, h)
        result.errors += e
        if severities is not None:
            tier = severities[i]
            old_e, old_n = result.by_severity.get(tier, (0, 0))
            result.by_severity[tier] = (old_e + e, old_n + len(r))
    return result
