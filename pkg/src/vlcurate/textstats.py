"""Textual complexity metrics: response length, type-token ratio, perplexity."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

from .errors import MetricError, MissingAnnotationError
from .manifest import DatasetManifest, Sample

logger = logging.getLogger(__name__)

# Word characters with inner apostrophes ("don't") kept together.
_WORD_RE = re.compile(r"\w+(?:['’]\w+)*")


def tokenize(text: str) -> list[str]:
    """Split on word boundaries, dropping whitespace and punctuation-only runs.

    >>> tokenize("a, a; A")
    ['a', 'a', 'A']
    """
    return _WORD_RE.findall(text)


class PerplexityOracle(Protocol):
    def perplexity(self, prompt: str, response: str) -> float: ...


class UnigramPerplexityOracle:
    """Add-one smoothed unigram model over a response corpus.

    Stand-in for a neural LM when no perplexity annotations exist.  The
    vocabulary is the set of fitted tokens; unseen tokens get the smoothed
    mass 1 / (N + V).  The prompt is ignored.
    """

    def __init__(self, counts: Counter):
        self.counts = counts
        self.total = sum(counts.values())
        self.vocab = len(counts)

    @classmethod
    def fit(cls, dataset: DatasetManifest) -> "UnigramPerplexityOracle":
        counts: Counter = Counter()
        for s in dataset.samples:
            counts.update(tokenize(s.response))
        return cls(counts)

    def perplexity(self, prompt: str, response: str) -> float:
        tokens = tokenize(response)
        if not tokens:
            return 1.0
        denom = self.total + self.vocab
        nll = 0.0
        for t in tokens:
            nll -= math.log((self.counts.get(t, 0) + 1) / denom)
        return math.exp(nll / len(tokens))


@dataclass(frozen=True)
class TextMetrics:
    avg_token_length: float
    avg_ttr: float
    avg_perplexity: float
    n: int
    ttr_skipped: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n < 1:
            raise MetricError("text metrics need at least one sample")
        if not 0 < self.avg_ttr <= 1:
            raise MetricError(f"avg_ttr out of (0, 1]: {self.avg_ttr}")
        if self.avg_token_length < 0 or self.avg_perplexity < 1:
            raise MetricError("avg_token_length must be >= 0 and avg_perplexity >= 1")


def _require_samples(dataset: DatasetManifest):
    if not dataset.samples:
        raise MetricError(f"dataset {dataset.name!r} has no samples")


def avg_token_length(dataset: DatasetManifest) -> float:
    _require_samples(dataset)
    return sum(len(tokenize(s.response)) for s in dataset.samples) / len(dataset.samples)


def sample_ttr(sample: Sample) -> float | None:
    tokens = tokenize(sample.prompt + " " + sample.response)
    if not tokens:
        return None
    return len(set(tokens)) / len(tokens)


def avg_ttr(dataset: DatasetManifest, skipped: list[str] | None = None) -> float:
    """Mean type-token ratio of prompt+response; empty samples are skipped.

    Skipped ids are appended to ``skipped`` when given.
    """
    _require_samples(dataset)
    values = []
    for s in dataset.samples:
        v = sample_ttr(s)
        if v is None:
            logger.warning("dataset %r: sample %r has no tokens, skipped for TTR", dataset.name, s.id)
            if skipped is not None:
                skipped.append(s.id)
            continue
        values.append(v)
    if not values:
        raise MetricError(f"TTR undefined for dataset {dataset.name!r}: every sample is empty")
    return sum(values) / len(values)


def sample_perplexity(sample: Sample, lm: PerplexityOracle | None) -> float:
    if sample.annotations.perplexity is not None:
        return sample.annotations.perplexity
    if lm is None:
        raise MissingAnnotationError(sample.id, "perplexity", "no annotation and no oracle")
    return lm.perplexity(sample.prompt, sample.response)


def avg_perplexity(dataset: DatasetManifest, lm: PerplexityOracle | None = None) -> float:
    """Mean PPL(response | prompt); annotations take precedence over ``lm``."""
    _require_samples(dataset)
    return sum(sample_perplexity(s, lm) for s in dataset.samples) / len(dataset.samples)


def text_score(l_hat: float, t_hat: float, p_hat: float) -> float:
    for name, v in (("L", l_hat), ("T", t_hat), ("P", p_hat)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"normalized {name} must lie in [0, 1], got {v}")
    return (l_hat + t_hat + p_hat) / 3.0


def text_metrics(dataset: DatasetManifest, lm: PerplexityOracle | None = None) -> TextMetrics:
    skipped: list[str] = []
    ttr = avg_ttr(dataset, skipped)
    return TextMetrics(
        avg_token_length=avg_token_length(dataset),
        avg_ttr=ttr,
        avg_perplexity=avg_perplexity(dataset, lm),
        n=len(dataset.samples),
        ttr_skipped=tuple(skipped),
    )
