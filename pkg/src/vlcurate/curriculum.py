"""Four-stage curriculum construction and token/image-bounded batch packing."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError, VlcurateError
from .manifest import DatasetManifest, Sample, TaskCategory
from .scoring import ComplexityReport
from .textstats import tokenize
from .tileplan import ResolutionConfig, plan as plan_tiles

logger = logging.getLogger(__name__)

COMPONENTS = ("visual_encoder", "projector", "llm")
PLAN_FORMAT = "vlcurate.curriculum"
PLAN_VERSION = 1

MAX_PACK_TOKENS = 16_384
MAX_PACK_IMAGES = 48
MAX_TILES = 24


@dataclass(frozen=True)
class _StageTemplate:
    index: int
    name: str
    trainable: tuple[str, ...]
    tier: str
    caption_only: bool
    budget: int
    learning_rate: float
    warmup_steps: int | None
    warmup_ratio: float | None
    train_steps: int


STAGE_TEMPLATES = (
    _StageTemplate(1, "projector_alignment", ("projector",), "low", True,
                   10_000_000, 2e-4, 100, None, 65_000),
    _StageTemplate(2, "encoder_tuning", ("visual_encoder", "projector"), "high", True,
                   23_000_000, 1e-5, 100, None, 90_000),
    _StageTemplate(3, "full_tuning_low", COMPONENTS, "low", False,
                   54_000_000, 4e-5, None, 0.03, 140_000),
    _StageTemplate(4, "full_tuning_high", COMPONENTS, "high", False,
                   66_000_000, 4e-5, None, 0.03, 250_000),
)


@dataclass(frozen=True)
class DatasetAllocation:
    name: str
    size: int
    quota: int


@dataclass(frozen=True)
class StageSpec:
    index: int
    name: str
    trainable: tuple[str, ...]
    tier: str
    categories: tuple[str, ...]  # empty means every category
    datasets: tuple[DatasetAllocation, ...]
    sample_budget: int
    learning_rate: float
    warmup_steps: int | None
    warmup_ratio: float | None
    train_steps: int

    def __post_init__(self):
        if self.sample_budget <= 0 or self.learning_rate <= 0 or self.train_steps <= 0:
            raise ConfigError(f"stage {self.index}: budget, learning rate and steps must be positive")
        if (self.warmup_steps is None) == (self.warmup_ratio is None):
            raise ConfigError(f"stage {self.index}: give exactly one of warmup_steps / warmup_ratio")

    def frozen(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENTS if c not in self.trainable)


@dataclass(frozen=True)
class CurriculumPlan:
    stages: tuple[StageSpec, ...]
    scale_factor: float
    split_policy: str
    split_threshold: float | None
    seed: int = 0
    max_pack_tokens: int = MAX_PACK_TOKENS
    max_pack_images: int = MAX_PACK_IMAGES
    max_tiles: int = MAX_TILES
    optimizer: str = "AdamW"
    schedule: str = "cosine decay"
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if [s.index for s in self.stages] != [1, 2, 3, 4]:
            raise ConfigError("a curriculum has stages 1..4 in order")
        if min(self.max_pack_tokens, self.max_pack_images, self.max_tiles) <= 0:
            raise ConfigError("shared limits must be positive")


@dataclass(frozen=True)
class PackItem:
    id: str
    text_tokens: int
    image_tokens: tuple[int, ...] = ()

    @property
    def cost(self) -> int:
        return self.text_tokens + sum(self.image_tokens)


@dataclass(frozen=True)
class Pack:
    ids: tuple[str, ...]
    total_tokens: int
    total_images: int


# --------------------------------------------------------------------------
# complexity split
# --------------------------------------------------------------------------


def split_by_complexity(
    reports: Sequence[ComplexityReport], policy: str = "median", threshold: float | None = None
) -> tuple[list[ComplexityReport], list[ComplexityReport]]:
    """Partition reports into (low, high) complexity tiers, preserving input order.

    ``median`` compares each dataset against the median S of its own
    category; ``threshold`` compares against a fixed cut.  Ties go low.
    """
    if not reports:
        raise VlcurateError("no reports to split")
    for r in reports:
        if not 0.0 <= r.score <= 1.0:
            raise VlcurateError(f"report {r.name!r} has S outside [0, 1]")
    if policy == "threshold":
        if threshold is None:
            raise ConfigError("threshold policy needs a threshold")
        cut = {id(r): threshold for r in reports}
    elif policy == "median":
        by_cat: dict[Any, list[float]] = {}
        for r in reports:
            by_cat.setdefault(r.category, []).append(r.score)
        medians = {c: statistics.median(v) for c, v in by_cat.items()}
        cut = {id(r): medians[r.category] for r in reports}
    else:
        raise ConfigError(f"unknown split policy {policy!r}")
    low = [r for r in reports if r.score <= cut[id(r)]]
    high = [r for r in reports if r.score > cut[id(r)]]
    return low, high


# --------------------------------------------------------------------------
# plan construction
# --------------------------------------------------------------------------


def scaled(value: int, scale: float) -> int:
    """ceil(value * scale), at least 1, without binary-float overshoot."""
    return max(1, math.ceil(value * Fraction(repr(scale))))


def allocate(budget: int, sizes: Sequence[tuple[str, int]]) -> tuple[DatasetAllocation, ...]:
    """Split ``budget`` across datasets in proportion to size (largest remainder)."""
    total = sum(n for _, n in sizes)
    if total == 0:
        return tuple(DatasetAllocation(name, n, 0) for name, n in sizes)
    shares = [Fraction(budget * n, total) for _, n in sizes]
    quotas = [math.floor(s) for s in shares]
    left = budget - sum(quotas)
    order = sorted(range(len(sizes)), key=lambda i: (-(shares[i] - quotas[i]), i))
    for i in order[:left]:
        quotas[i] += 1
    return tuple(DatasetAllocation(name, n, q) for (name, n), q in zip(sizes, quotas))


def build_plan(
    caption_reports: Sequence[ComplexityReport],
    all_reports: Sequence[ComplexityReport],
    scale_factor: float = 1.0,
    policy: str = "median",
    threshold: float | None = None,
    seed: int = 0,
    metadata: Mapping[str, Any] | None = None,
) -> CurriculumPlan:
    """Assemble the four stages from scored datasets.

    Stages 1-2 draw on low/high-complexity caption datasets, stages 3-4 on
    low/high-complexity datasets of every category.  Budgets and step counts
    are multiplied by ``scale_factor`` and rounded up.
    """
    if not caption_reports:
        raise VlcurateError("stages 1-2 need at least one caption dataset")
    if not (0 < scale_factor <= 1) or not math.isfinite(scale_factor):
        raise ConfigError(f"scale_factor must lie in (0, 1], got {scale_factor}")
    cap_low, cap_high = split_by_complexity(caption_reports, policy, threshold)
    all_low, all_high = split_by_complexity(all_reports or caption_reports, policy, threshold)
    pools = {(True, "low"): cap_low, (True, "high"): cap_high, (False, "low"): all_low, (False, "high"): all_high}

    stages = []
    for t in STAGE_TEMPLATES:
        pool = pools[(t.caption_only, t.tier)]
        if not pool:
            logger.warning("stage %d (%s): no %s-complexity datasets available", t.index, t.name, t.tier)
        budget = scaled(t.budget, scale_factor)
        stages.append(
            StageSpec(
                index=t.index,
                name=t.name,
                trainable=t.trainable,
                tier=t.tier,
                categories=(TaskCategory.CAPTION.value,) if t.caption_only else (),
                datasets=allocate(budget, [(r.name, r.n_samples) for r in pool]),
                sample_budget=budget,
                learning_rate=t.learning_rate,
                warmup_steps=scaled(t.warmup_steps, scale_factor) if t.warmup_steps is not None else None,
                warmup_ratio=t.warmup_ratio,
                train_steps=scaled(t.train_steps, scale_factor),
            )
        )
    return CurriculumPlan(
        stages=tuple(stages),
        scale_factor=scale_factor,
        split_policy=policy,
        split_threshold=threshold,
        seed=seed,
        metadata=dict(metadata or {}),
    )


# --------------------------------------------------------------------------
# packing
# --------------------------------------------------------------------------


def sample_pack_item(sample: Sample, width_height: tuple[int, int] | None, res: ResolutionConfig) -> PackItem:
    """Token cost of a sample: prompt+response tokens plus retained visual tokens."""
    text = len(tokenize(sample.prompt)) + len(tokenize(sample.response))
    images = (plan_tiles(*width_height, res).retained_tokens,) if width_height is not None else ()
    return PackItem(sample.id, text, images)


def pack_batches(
    items: Sequence[PackItem], max_tokens: int = MAX_PACK_TOKENS, max_images: int = MAX_PACK_IMAGES
) -> list[Pack]:
    """First-fit-decreasing packing under a token cap and an image cap.

    Items are taken in decreasing token cost (input order on ties) and go to
    the first open pack with room on both caps.
    """
    for it in items:
        if it.cost > max_tokens or len(it.image_tokens) > max_images:
            raise VlcurateError(
                f"sample {it.id!r} alone exceeds the pack limits "
                f"({it.cost} tokens / {len(it.image_tokens)} images; caps {max_tokens} / {max_images})"
            )
    order = sorted(range(len(items)), key=lambda i: (-items[i].cost, i))
    n = len(items)
    rem_tok = np.empty(n, dtype=np.int64)
    rem_img = np.empty(n, dtype=np.int64)
    members: list[list[int]] = []
    for i in order:
        cost, nimg = items[i].cost, len(items[i].image_tokens)
        k = len(members)
        hit = np.flatnonzero((rem_tok[:k] >= cost) & (rem_img[:k] >= nimg)) if k else ()
        if len(hit):
            j = int(hit[0])
        else:
            j = k
            members.append([])
            rem_tok[j] = max_tokens
            rem_img[j] = max_images
        members[j].append(i)
        rem_tok[j] -= cost
        rem_img[j] -= nimg
    return [
        Pack(
            ids=tuple(items[i].id for i in m),
            total_tokens=sum(items[i].cost for i in m),
            total_images=sum(len(items[i].image_tokens) for i in m),
        )
        for m in members
    ]


def stage_samples(
    stage: StageSpec, manifests: Mapping[str, DatasetManifest], seed: int
) -> list[tuple[DatasetManifest, Sample]]:
    """One pass over a stage's data: per dataset, min(quota, size) samples in seeded-shuffle order."""
    out = []
    for alloc in stage.datasets:
        ds = manifests.get(alloc.name)
        if ds is None:
            raise VlcurateError(f"stage {stage.index}: manifest {alloc.name!r} not loaded")
        idx = list(range(len(ds.samples)))
        random.Random(f"{seed}:{stage.index}:{alloc.name}").shuffle(idx)
        out.extend((ds, ds.samples[i]) for i in idx[: min(alloc.quota, len(idx))])
    return out


# --------------------------------------------------------------------------
# training-config document
# --------------------------------------------------------------------------


def _plan_body(plan: CurriculumPlan) -> dict[str, Any]:
    return {
        "format": PLAN_FORMAT,
        "version": PLAN_VERSION,
        "scale_factor": plan.scale_factor,
        "seed": plan.seed,
        "split": {"policy": plan.split_policy, "threshold": plan.split_threshold},
        "shared": {
            "max_pack_tokens": plan.max_pack_tokens,
            "max_pack_images": plan.max_pack_images,
            "max_tiles": plan.max_tiles,
            "optimizer": plan.optimizer,
            "schedule": plan.schedule,
        },
        "stages": [
            {
                "index": s.index,
                "name": s.name,
                "trainable": list(s.trainable),
                "frozen": list(s.frozen()),
                "tier": s.tier,
                "categories": list(s.categories),
                "datasets": [{"name": a.name, "size": a.size, "quota": a.quota} for a in s.datasets],
                "sample_budget": s.sample_budget,
                "learning_rate": s.learning_rate,
                "warmup_steps": s.warmup_steps,
                "warmup_ratio": s.warmup_ratio,
                "train_steps": s.train_steps,
            }
            for s in plan.stages
        ],
        "metadata": dict(plan.metadata),
    }


def _canonical(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False)


def emit_config(plan: CurriculumPlan) -> str:
    """Serialize a plan as a deterministic JSON document carrying a sha256 config hash."""
    body = _plan_body(plan)
    body["config_hash"] = hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()
    return _canonical(body) + "\n"


def load_config(text: str) -> CurriculumPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid training config: {e}") from e
    if doc.get("format") != PLAN_FORMAT or doc.get("version") != PLAN_VERSION:
        raise ConfigError("not a vlcurate curriculum document of a supported version")
    claimed = doc.pop("config_hash", None)
    if claimed != hashlib.sha256(_canonical(doc).encode("utf-8")).hexdigest():
        raise ConfigError("config hash mismatch")
    try:
        shared = doc["shared"]
        stages = tuple(
            StageSpec(
                index=s["index"],
                name=s["name"],
                trainable=tuple(s["trainable"]),
                tier=s["tier"],
                categories=tuple(s["categories"]),
                datasets=tuple(DatasetAllocation(a["name"], a["size"], a["quota"]) for a in s["datasets"]),
                sample_budget=s["sample_budget"],
                learning_rate=s["learning_rate"],
                warmup_steps=s["warmup_steps"],
                warmup_ratio=s["warmup_ratio"],
                train_steps=s["train_steps"],
            )
            for s in doc["stages"]
        )
        return CurriculumPlan(
            stages=stages,
            scale_factor=doc["scale_factor"],
            split_policy=doc["split"]["policy"],
            split_threshold=doc["split"]["threshold"],
            seed=doc["seed"],
            max_pack_tokens=shared["max_pack_tokens"],
            max_pack_images=shared["max_pack_images"],
            max_tiles=shared["max_tiles"],
            optimizer=shared["optimizer"],
            schedule=shared["schedule"],
            metadata=doc["metadata"],
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed training config: {e}") from e
