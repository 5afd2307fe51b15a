"""Data model, manifest/sidecar IO and task categorization.

A manifest file holds one JSON object per line.  An optional first line of
the form ``{"manifest": {"name": ..., "category": ..., "source_note": ...}}``
carries dataset-level metadata; every other line is a sample record::

    {"id": "a", "image_path": "img/a.png", "prompt": "...", "response": "..."}
    {"id": "b", "image": {"width": 16, "height": 16, "pixels_path": "b.raw"},
     "prompt": "...", "response": "..."}

Sidecar files use the same one-object-per-line layout, keyed by ``id``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ManifestError

logger = logging.getLogger(__name__)

MODEL_TIERS = ("small", "mid", "large")

_SIDECAR_FIELDS = {
    "id",
    "perplexity",
    "ocr_token_count",
    "object_count",
    "loss_small",
    "loss_mid",
    "loss_large",
    "coherent",
    "hallucination",
    "category",
}


class TaskCategory(str, enum.Enum):
    REASONING = "reasoning"
    GUI = "gui"
    OCR = "ocr"
    TEXT_ONLY = "text_only"
    CHART = "chart"
    CAPTION = "caption"
    VQA = "vqa"
    GROUNDING = "grounding"

    @classmethod
    def parse(cls, label) -> "TaskCategory":
        if isinstance(label, TaskCategory):
            return label
        try:
            return cls(str(label).strip().lower())
        except ValueError:
            known = ", ".join(c.value for c in cls)
            raise ManifestError(f"unknown task category {label!r} (known: {known})") from None


@dataclass(frozen=True)
class JudgeVerdict:
    coherent: bool
    hallucination: bool


@dataclass(frozen=True)
class AnnotationSet:
    perplexity: float | None = None
    ocr_token_count: int | None = None
    object_count: int | None = None
    model_losses: Mapping[str, float] = field(default_factory=dict)
    judge_verdict: JudgeVerdict | None = None
    category: TaskCategory | None = None

    def is_empty(self) -> bool:
        return self == AnnotationSet()

    def to_record(self) -> dict[str, Any]:
        """Flatten to sidecar field names; absent values are left out."""
        rec: dict[str, Any] = {}
        if self.perplexity is not None:
            rec["perplexity"] = self.perplexity
        if self.ocr_token_count is not None:
            rec["ocr_token_count"] = self.ocr_token_count
        if self.object_count is not None:
            rec["object_count"] = self.object_count
        for tier in MODEL_TIERS:
            if tier in self.model_losses:
                rec[f"loss_{tier}"] = self.model_losses[tier]
        if self.judge_verdict is not None:
            rec["coherent"] = self.judge_verdict.coherent
            rec["hallucination"] = self.judge_verdict.hallucination
        if self.category is not None:
            rec["category"] = self.category.value
        return rec

    def merged(self, updates: Mapping[str, Any]) -> "AnnotationSet":
        """Return a copy with validated sidecar fields from ``updates`` applied."""
        return _annotations_from_fields({**self.to_record(), **updates})


@dataclass(frozen=True)
class InlineImage:
    """Image given by explicit dimensions plus a raw row-major 8-bit buffer.

    ``pixels`` holds an in-memory array (H, W) or (H, W, 3) for synthetic data;
    ``pixels_path`` names a raw file with W*H (gray) or W*H*3 (RGB) bytes.
    """

    width: int
    height: int
    pixels_path: str | None = None
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Sample:
    id: str
    prompt: str = ""
    response: str = ""
    image_path: str | None = None
    image: InlineImage | None = None
    annotations: AnnotationSet = field(default_factory=AnnotationSet)

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ManifestError("sample id must be a non-empty string")
        if not self.prompt and not self.response:
            raise ManifestError(f"sample {self.id!r}: prompt and response are both empty")
        if self.image_path is not None and self.image is not None:
            raise ManifestError(f"sample {self.id!r}: give image_path or image, not both")
        if self.image_path is not None and not self.image_path:
            raise ManifestError(f"sample {self.id!r}: empty image_path")
        if self.image is not None and (self.image.width < 1 or self.image.height < 1):
            raise ManifestError(f"sample {self.id!r}: inline image must have positive size")

    @property
    def has_image(self) -> bool:
        return self.image_path is not None or self.image is not None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: tuple[Sample, ...]
    category: TaskCategory | None = None
    source_note: str = ""
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r} in manifest {self.name!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def with_samples(self, samples: Iterable[Sample], **changes) -> "DatasetManifest":
        return dataclasses.replace(self, samples=tuple(samples), **changes)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p


# --------------------------------------------------------------------------
# record parsing
# --------------------------------------------------------------------------


def _nonneg_number(name: str, value, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ManifestError(f"{name} must be finite, got {value!r}")
    if value < 0:
        raise ManifestError(f"{name} must be >= 0, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ManifestError(f"{name} must be an integer, got {value!r}")
        return int(value)
    return float(value)


def _annotations_from_fields(rec: Mapping[str, Any]) -> AnnotationSet:
    unknown = set(rec) - _SIDECAR_FIELDS
    if unknown:
        raise ManifestError(f"unknown annotation field(s): {', '.join(sorted(unknown))}")
    ppl = rec.get("perplexity")
    if ppl is not None:
        ppl = _nonneg_number("perplexity", ppl)
        if ppl < 1:
            raise ManifestError(f"perplexity must be >= 1, got {ppl!r}")
    ocr = rec.get("ocr_token_count")
    if ocr is not None:
        ocr = _nonneg_number("ocr_token_count", ocr, integer=True)
    obj = rec.get("object_count")
    if obj is not None:
        obj = _nonneg_number("object_count", obj, integer=True)
    losses = {}
    for tier in MODEL_TIERS:
        v = rec.get(f"loss_{tier}")
        if v is not None:
            losses[tier] = _nonneg_number(f"loss_{tier}", v)
    verdict = None
    coherent, halluc = rec.get("coherent"), rec.get("hallucination")
    if coherent is not None or halluc is not None:
        if not isinstance(coherent, bool) or not isinstance(halluc, bool):
            raise ManifestError("judge verdict needs both boolean fields 'coherent' and 'hallucination'")
        verdict = JudgeVerdict(coherent=coherent, hallucination=halluc)
    cat = rec.get("category")
    if cat is not None:
        cat = TaskCategory.parse(cat)
    return AnnotationSet(
        perplexity=ppl,
        ocr_token_count=ocr,
        object_count=obj,
        model_losses=losses,
        judge_verdict=verdict,
        category=cat,
    )


def _parse_sample(rec: Any) -> Sample:
    if not isinstance(rec, dict):
        raise ManifestError("record must be a JSON object")
    allowed = {"id", "image_path", "image", "prompt", "response", "annotations"}
    unknown = set(rec) - allowed
    if unknown:
        raise ManifestError(f"unknown field(s): {', '.join(sorted(unknown))}")
    sid = rec.get("id")
    if not isinstance(sid, str) or not sid:
        raise ManifestError("missing or empty 'id'")
    prompt = rec.get("prompt", "")
    response = rec.get("response", "")
    if not isinstance(prompt, str) or not isinstance(response, str):
        raise ManifestError("'prompt' and 'response' must be strings")
    image_path = rec.get("image_path")
    if image_path is not None and not isinstance(image_path, str):
        raise ManifestError("'image_path' must be a string")
    image = None
    if rec.get("image") is not None:
        img = rec["image"]
        if not isinstance(img, dict) or set(img) - {"width", "height", "pixels_path"}:
            raise ManifestError("'image' must be {width, height, pixels_path}")
        w, h = img.get("width"), img.get("height")
        if not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in (w, h)):
            raise ManifestError("inline image width/height must be positive integers")
        pp = img.get("pixels_path")
        if pp is not None and (not isinstance(pp, str) or not pp):
            raise ManifestError("inline image pixels_path must be a non-empty string")
        image = InlineImage(width=w, height=h, pixels_path=pp)
    ann = AnnotationSet()
    if rec.get("annotations") is not None:
        if not isinstance(rec["annotations"], dict):
            raise ManifestError("'annotations' must be an object")
        ann = _annotations_from_fields(rec["annotations"])
    return Sample(
        id=sid,
        prompt=prompt,
        response=response,
        image_path=image_path,
        image=image,
        annotations=ann,
    )


def _sample_record(s: Sample) -> dict[str, Any]:
    rec: dict[str, Any] = {"id": s.id}
    if s.image_path is not None:
        rec["image_path"] = s.image_path
    if s.image is not None:
        if s.image.pixels_path is None and s.image.pixels is not None:
            raise ManifestError(f"sample {s.id!r}: in-memory pixel buffer cannot be written to a manifest")
        img: dict[str, Any] = {"width": s.image.width, "height": s.image.height}
        if s.image.pixels_path is not None:
            img["pixels_path"] = s.image.pixels_path
        rec["image"] = img
    rec["prompt"] = s.prompt
    rec["response"] = s.response
    if not s.annotations.is_empty():
        rec["annotations"] = s.annotations.to_record()
    return rec


def _iter_json_lines(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read: {e.strerror or e}", path=path) from e
    except UnicodeDecodeError as e:
        raise ManifestError(f"not valid UTF-8: {e}", path=path) from e
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid JSON: {e.msg}", path=path, line=lineno) from None


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def load_manifest(path) -> DatasetManifest:
    """Load a manifest file, preserving sample order."""
    path = Path(path)
    name, category, note = path.stem, None, ""
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, rec in _iter_json_lines(path):
        if isinstance(rec, dict) and "manifest" in rec:
            if samples or len(rec) != 1 or not isinstance(rec["manifest"], dict):
                raise ManifestError("manifest header must be the first record", path=path, line=lineno)
            meta = rec["manifest"]
            name = meta.get("name", name)
            if not isinstance(name, str) or not name:
                raise ManifestError("manifest name must be a non-empty string", path=path, line=lineno)
            try:
                category = TaskCategory.parse(meta["category"]) if meta.get("category") is not None else None
            except ManifestError as e:
                raise ManifestError(str(e), path=path, line=lineno) from None
            note = meta.get("source_note", "")
            continue
        try:
            sample = _parse_sample(rec)
        except ManifestError as e:
            raise ManifestError(str(e), path=path, line=lineno) from None
        if sample.id in seen:
            raise ManifestError(
                f"duplicate id {sample.id!r} (first seen on line {seen[sample.id]})", path=path, line=lineno
            )
        seen[sample.id] = lineno
        samples.append(sample)
    if not samples:
        raise ManifestError("manifest is empty", path=path)
    return DatasetManifest(
        name=name, samples=tuple(samples), category=category, source_note=note, base_dir=path.parent
    )


def manifest_lines(manifest: DatasetManifest) -> list[str]:
    header: dict[str, Any] = {"name": manifest.name}
    if manifest.category is not None:
        header["category"] = manifest.category.value
    if manifest.source_note:
        header["source_note"] = manifest.source_note
    lines = [json.dumps({"manifest": header}, ensure_ascii=False)]
    lines.extend(json.dumps(_sample_record(s), ensure_ascii=False) for s in manifest.samples)
    return lines


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text("\n".join(manifest_lines(manifest)) + "\n", encoding="utf-8")


def load_sidecar(path) -> list[tuple[str, dict[str, Any]]]:
    """Read and validate sidecar records; returns (id, fields) pairs in file order."""
    path = Path(path)
    out = []
    for lineno, rec in _iter_json_lines(path):
        if not isinstance(rec, dict):
            raise ManifestError("record must be a JSON object", path=path, line=lineno)
        sid = rec.get("id")
        if not isinstance(sid, str) or not sid:
            raise ManifestError("missing or empty 'id'", path=path, line=lineno)
        fields = {k: v for k, v in rec.items() if k != "id"}
        try:
            _annotations_from_fields(fields)
        except ManifestError as e:
            raise ManifestError(f"id {sid!r}: {e}", path=path, line=lineno) from None
        out.append((sid, fields))
    return out


def merge_annotations(
    manifest: DatasetManifest, records: Iterable[tuple[str, Mapping[str, Any]]]
) -> tuple[DatasetManifest, list[str]]:
    """Merge sidecar records into a manifest.

    Returns the new manifest and the ids that matched no sample.
    """
    index = {s.id: i for i, s in enumerate(manifest.samples)}
    samples = list(manifest.samples)
    unmatched: list[str] = []
    for sid, fields in records:
        i = index.get(sid)
        if i is None:
            unmatched.append(sid)
            continue
        try:
            ann = samples[i].annotations.merged(fields)
        except ManifestError as e:
            raise ManifestError(f"sample {sid!r}: {e}") from None
        samples[i] = dataclasses.replace(samples[i], annotations=ann)
    return manifest.with_samples(samples), unmatched


def attach_annotations(manifest: DatasetManifest, sidecar) -> DatasetManifest:
    """Merge a sidecar file into ``manifest``; unknown ids are logged as warnings."""
    records = load_sidecar(sidecar)
    merged, unmatched = merge_annotations(manifest, records)
    for sid in unmatched:
        logger.warning("sidecar %s: id %r not in manifest %r", sidecar, sid, manifest.name)
    return merged


def categorize(
    manifest: DatasetManifest,
    label_map: Mapping[str, Any] | None = None,
    per_sample_labels: Mapping[str, Any] | None = None,
) -> list[DatasetManifest]:
    """Assign task categories, splitting heterogeneous manifests per sample.

    Sources in priority order: the manifest's own category, ``label_map``
    keyed by manifest name, then per-sample labels (explicit mapping, or the
    ``category`` annotation carried by every sample).  Split subsets are named
    ``<name>/<category>`` and keep input order; subsets are returned in order
    of first appearance.
    """
    if manifest.category is not None:
        return [manifest]
    if label_map and manifest.name in label_map:
        return [dataclasses.replace(manifest, category=TaskCategory.parse(label_map[manifest.name]))]
    if per_sample_labels is None:
        cats = [s.annotations.category for s in manifest.samples]
        if all(c is not None for c in cats):
            per_sample_labels = {s.id: c for s, c in zip(manifest.samples, cats)}
    if per_sample_labels is None:
        raise ManifestError(f"no category source for manifest {manifest.name!r}")
    groups: dict[TaskCategory, list[Sample]] = {}
    for s in manifest.samples:
        if s.id not in per_sample_labels:
            raise ManifestError(f"no category label for sample {s.id!r} in manifest {manifest.name!r}")
        groups.setdefault(TaskCategory.parse(per_sample_labels[s.id]), []).append(s)
    if len(groups) == 1:
        (cat,) = groups
        return [dataclasses.replace(manifest, category=cat)]
    return [
        dataclasses.replace(manifest, name=f"{manifest.name}/{cat.value}", category=cat, samples=tuple(ss))
        for cat, ss in groups.items()
    ]


def inspection_sample(manifest: DatasetManifest, k: int, seed: int = 0) -> list[Sample]:
    """Draw ``k`` samples (without replacement) for manual category inspection."""
    if k < 0:
        raise ValueError("k must be >= 0")
    rng = random.Random(seed)
    idx = sorted(rng.sample(range(len(manifest.samples)), min(k, len(manifest.samples))))
    return [manifest.samples[i] for i in idx]


def relocate(manifest: DatasetManifest, new_dir) -> DatasetManifest:
    """Rewrite relative file references so they resolve from ``new_dir``."""
    new_dir = Path(new_dir)

    def rel(p: str) -> str:
        if Path(p).is_absolute():
            return p
        return Path(os.path.relpath(manifest.resolve(p).resolve(), new_dir.resolve())).as_posix()

    samples = []
    for s in manifest.samples:
        if s.image_path is not None:
            s = dataclasses.replace(s, image_path=rel(s.image_path))
        elif s.image is not None and s.image.pixels_path is not None:
            s = dataclasses.replace(s, image=dataclasses.replace(s.image, pixels_path=rel(s.image.pixels_path)))
        samples.append(s)
    return dataclasses.replace(manifest, samples=tuple(samples), base_dir=new_dir)
