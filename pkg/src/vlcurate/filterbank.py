"""Per-sample data filters: heuristic rules, repetition detection, judge verdicts."""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError, MissingAnnotationError
from .manifest import DatasetManifest, Sample
from .textstats import tokenize

ABNORMAL_CATEGORIES = frozenset({"Cc", "Cf", "Co", "Cs", "Cn"})

RULE_ABNORMAL = "abnormal_chars"
RULE_KEYWORD = "blocklist_keyword"
RULE_REPEAT = "repeated_segment"
RULE_PHRASE = "frequent_phrase"
RULE_INCOHERENT = "incoherent"
RULE_HALLUCINATION = "hallucination"
RULES = (RULE_ABNORMAL, RULE_KEYWORD, RULE_REPEAT, RULE_PHRASE, RULE_INCOHERENT, RULE_HALLUCINATION)

_HASH_BASE = 1_000_003
_HASH_MOD = (1 << 61) - 1


@dataclass(frozen=True)
class FilterConfig:
    max_abnormal_char_ratio: float = 0.1
    keyword_blocklist: tuple[str, ...] = ()
    min_repeat_segment_chars: int = 20
    min_segment_occurrences: int = 3
    phrase_ngram_range: tuple[int, int] = (1, 4)
    max_phrase_token_share: float = 0.3
    # The share rule only applies once a response has this many n-grams of a given order.
    min_phrase_ngrams: int = 8
    judge_required: bool = False

    def __post_init__(self):
        object.__setattr__(self, "keyword_blocklist", tuple(self.keyword_blocklist))
        object.__setattr__(self, "phrase_ngram_range", tuple(self.phrase_ngram_range))
        if not 0.0 <= self.max_abnormal_char_ratio <= 1.0:
            raise ConfigError("max_abnormal_char_ratio must lie in [0, 1]")
        if self.min_repeat_segment_chars < 2:
            raise ConfigError("min_repeat_segment_chars must be >= 2")
        if self.min_segment_occurrences < 2:
            raise ConfigError("min_segment_occurrences must be >= 2")
        lo, hi = self.phrase_ngram_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid phrase_ngram_range {self.phrase_ngram_range}")
        if not 0.0 < self.max_phrase_token_share <= 1.0:
            raise ConfigError("max_phrase_token_share must lie in (0, 1]")
        if self.min_phrase_ngrams < 1:
            raise ConfigError("min_phrase_ngrams must be >= 1")
        if any(not k for k in self.keyword_blocklist):
            raise ConfigError("blocklist keywords must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["keyword_blocklist"] = list(self.keyword_blocklist)
        d["phrase_ngram_range"] = list(self.phrase_ngram_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "FilterConfig":
        d = dict(d)
        blocklist_file = d.pop("blocklist_file", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown filter config key(s): {', '.join(sorted(unknown))}")
        if blocklist_file is not None:
            p = Path(blocklist_file)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            d["keyword_blocklist"] = list(d.get("keyword_blocklist", ())) + load_blocklist(p)
        return cls(**d)


def load_blocklist(path) -> list[str]:
    """One keyword per line; blank lines and ``#`` comments are ignored."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read blocklist {path}: {e}") from e
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


@dataclass(frozen=True)
class Reason:
    rule: str
    evidence: str
    value: float


@dataclass(frozen=True)
class FilterVerdict:
    sample_id: str
    keep: bool
    reasons: tuple[Reason, ...] = ()
    notes: tuple[str, ...] = ()

    @property
    def decision(self) -> str:
        return "keep" if self.keep else "reject"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.sample_id,
            "decision": self.decision,
            "reasons": [asdict(r) for r in self.reasons],
            "notes": list(self.notes),
        }


def _keep(sample: Sample, *notes: str) -> FilterVerdict:
    return FilterVerdict(sample.id, True, (), tuple(notes))


def _reject(sample: Sample, *reasons: Reason) -> FilterVerdict:
    return FilterVerdict(sample.id, False, tuple(reasons))


def is_abnormal_char(ch: str) -> bool:
    if ch.isspace():
        return False
    return unicodedata.category(ch) in ABNORMAL_CATEGORIES


def abnormal_char_ratio(text: str) -> tuple[float, int]:
    """(fraction of abnormal characters, index of the first one or -1)."""
    if not text:
        return 0.0, -1
    first = -1
    bad = 0
    for i, ch in enumerate(text):
        if is_abnormal_char(ch):
            bad += 1
            if first < 0:
                first = i
    return bad / len(text), first


def abnormal_char_filter(sample: Sample, cfg: FilterConfig) -> FilterVerdict:
    """Reject on too many control/format/private/unassigned chars or a blocklisted keyword."""
    reasons = []
    for text in (sample.prompt, sample.response):
        for kw in cfg.keyword_blocklist:
            m = re.search(re.escape(kw), text, flags=re.IGNORECASE)
            if m:
                reasons.append(Reason(RULE_KEYWORD, m.group(0), 1.0))
                break
        if reasons:
            break
    joined = sample.prompt + sample.response
    ratio, first = abnormal_char_ratio(joined)
    if ratio > cfg.max_abnormal_char_ratio:
        if first < len(sample.prompt):
            evidence = sample.prompt[first : first + 16]
        else:
            j = first - len(sample.prompt)
            evidence = sample.response[j : j + 16]
        reasons.insert(0, Reason(RULE_ABNORMAL, evidence, ratio))
    return _reject(sample, *reasons) if reasons else _keep(sample)


def _window_hashes(text: str, k: int) -> list[int]:
    n = len(text)
    if n < k:
        return []
    codes = [ord(c) for c in text]
    top = pow(_HASH_BASE, k - 1, _HASH_MOD)
    h = 0
    for c in codes[:k]:
        h = (h * _HASH_BASE + c) % _HASH_MOD
    out = [h]
    for i in range(k, n):
        h = ((h - codes[i - k] * top) * _HASH_BASE + codes[i]) % _HASH_MOD
        out.append(h)
    return out


def _non_overlapping(positions: Sequence[int], length: int) -> list[int]:
    picked = []
    nxt = -1
    for p in positions:
        if p >= nxt:
            picked.append(p)
            nxt = p + length
    return picked


def find_repeated_segment(text: str, min_len: int, min_count: int) -> tuple[str, int] | None:
    """Find a substring of length >= ``min_len`` with >= ``min_count`` non-overlapping occurrences.

    Only windows of exactly ``min_len`` need checking: any longer repeat
    contains one.  Candidates come from a rolling hash and are confirmed by
    exact comparison; the reported segment is the earliest qualifying window
    extended as far as all its occurrences agree without overlapping.
    Returns (segment, occurrences) or None.
    """
    by_hash: dict[int, list[int]] = {}
    for i, h in enumerate(_window_hashes(text, min_len)):
        by_hash.setdefault(h, []).append(i)
    best: tuple[int, list[int]] | None = None
    for positions in by_hash.values():
        if len(positions) < min_count:
            continue
        exact: dict[str, list[int]] = {}
        for p in positions:
            exact.setdefault(text[p : p + min_len], []).append(p)
        for occ in exact.values():
            picked = _non_overlapping(occ, min_len)
            if len(picked) >= min_count and (best is None or picked[0] < best[0]):
                best = (picked[0], picked)
    if best is None:
        return None
    picked = best[1]
    length = min_len
    while True:
        ends = [p + length for p in picked]
        if ends[-1] >= len(text):
            break
        if any(ends[i] >= picked[i + 1] for i in range(len(picked) - 1)):
            break
        if len({text[e] for e in ends}) != 1:
            break
        length += 1
    return text[picked[0] : picked[0] + length], len(picked)


def repeated_segment_filter(sample: Sample, cfg: FilterConfig) -> FilterVerdict:
    found = find_repeated_segment(sample.response, cfg.min_repeat_segment_chars, cfg.min_segment_occurrences)
    if found is None:
        return _keep(sample)
    segment, count = found
    return _reject(sample, Reason(RULE_REPEAT, segment, float(count)))


def _top_ngram(tokens: list[str], n: int) -> tuple[tuple[str, ...], int, int] | None:
    """Most frequent n-gram (earliest on ties), its count, and the n-gram total."""
    total = len(tokens) - n + 1
    if total <= 0:
        return None
    counts: Counter = Counter()
    first: dict[tuple[str, ...], int] = {}
    for i in range(total):
        g = tuple(tokens[i : i + n])
        counts[g] += 1
        first.setdefault(g, i)
    gram = max(counts, key=lambda g: (counts[g], -first[g]))
    return gram, counts[gram], total


def _evidence_for(text: str, gram: tuple[str, ...]) -> str:
    pattern = r"\W+".join(re.escape(t) for t in gram)
    m = re.search(pattern, text)
    return m.group(0) if m else gram[0]


def frequent_phrase_filter(sample: Sample, cfg: FilterConfig) -> FilterVerdict:
    """Reject when one word n-gram dominates the response's n-grams of that order."""
    tokens = tokenize(sample.response)
    lo, hi = cfg.phrase_ngram_range
    for n in range(lo, hi + 1):
        top = _top_ngram(tokens, n)
        if top is None:
            break
        gram, count, total = top
        if total < cfg.min_phrase_ngrams:
            continue
        share = count / total
        if share > cfg.max_phrase_token_share:
            return _reject(sample, Reason(RULE_PHRASE, _evidence_for(sample.response, gram), share))
    return _keep(sample)


def judge_filter(sample: Sample, cfg: FilterConfig) -> FilterVerdict:
    verdict = sample.annotations.judge_verdict
    if verdict is None:
        if cfg.judge_required:
            raise MissingAnnotationError(sample.id, "judge verdict", "judge_required is set")
        return _keep(sample, "judge-skipped")
    reasons = []
    if not verdict.coherent:
        reasons.append(Reason(RULE_INCOHERENT, "", 0.0))
    if verdict.hallucination:
        reasons.append(Reason(RULE_HALLUCINATION, "", 1.0))
    return _reject(sample, *reasons) if reasons else _keep(sample)


FILTER_STAGES = (abnormal_char_filter, repeated_segment_filter, frequent_phrase_filter, judge_filter)


def filter_sample(sample: Sample, cfg: FilterConfig) -> FilterVerdict:
    """Run the stages in order, stopping at the first rejection."""
    notes: list[str] = []
    for stage in FILTER_STAGES:
        v = stage(sample, cfg)
        if not v.keep:
            return v
        notes.extend(v.notes)
    return FilterVerdict(sample.id, True, (), tuple(notes))


@dataclass
class FilterReport:
    dataset: str
    total: int
    kept: int
    rejected: int
    rule_counts: dict[str, int]
    verdicts: list[FilterVerdict] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "total": self.total,
            "kept": self.kept,
            "rejected": self.rejected,
            "rule_counts": self.rule_counts,
            "rejections": [v.to_dict() for v in self.verdicts if not v.keep],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def run_pipeline(manifest: DatasetManifest, cfg: FilterConfig) -> tuple[DatasetManifest, FilterReport]:
    """Filter every sample; each rejection is attributed to the first rule that fired."""
    verdicts = [filter_sample(s, cfg) for s in manifest.samples]
    counts = {rule: 0 for rule in RULES}
    for v in verdicts:
        if not v.keep:
            counts[v.reasons[0].rule] += 1
    kept = [s for s, v in zip(manifest.samples, verdicts) if v.keep]
    report = FilterReport(
        dataset=manifest.name,
        total=len(verdicts),
        kept=len(kept),
        rejected=len(verdicts) - len(kept),
        rule_counts=counts,
        verdicts=verdicts,
        config=cfg.to_dict(),
    )
    return manifest.with_samples(kept), report
