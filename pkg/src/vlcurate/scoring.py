"""Batch normalization, composite complexity score and weight calibration."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import imagestats, taskgap, textstats
from .errors import ConfigError, MetricError, VlcurateError
from .manifest import DatasetManifest, TaskCategory
from .taskgap import GapConfig

logger = logging.getLogger(__name__)

ENTROPY_CONSTANT = imagestats.ENTROPY_MAX_BITS

# fixed_cap defaults (toolkit choices); T is already a ratio in (0, 1].
DEFAULT_CAPS = {"L": 1024.0, "T": 1.0, "P": 100.0, "D_text": 0.01, "D_obj": 0.001}

RAW_KEYS = ("L", "T", "P", "E", "D_text", "D_obj", "C_small_mid", "C_mid_large")
AXES = {
    "text": ("L", "T", "P"),
    "image": ("E", "D_text", "D_obj"),
    "task": ("C_small_mid", "C_mid_large"),
}
NORM_MODES = ("minmax", "fixed")

_TIE_EPS = 1e-12


def normalize_batch(values: Sequence[float], mode: str = "minmax", cap: float | None = None) -> list[float]:
    """Map a batch of raw values into [0, 1].

    ``minmax`` rescales by the batch range (a degenerate range maps to 0.5);
    ``fixed_cap`` (alias ``fixed``) divides by ``cap`` and clips at 1.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise MetricError("cannot normalize an empty batch")
    if not all(math.isfinite(v) for v in vals):
        raise MetricError("cannot normalize non-finite values")
    if mode == "minmax":
        lo, hi = min(vals), max(vals)
        if hi == lo:
            return [0.5] * len(vals)
        return [(v - lo) / (hi - lo) for v in vals]
    if mode in ("fixed_cap", "fixed"):
        if cap is None or not cap > 0:
            raise ConfigError(f"fixed_cap normalization needs cap > 0, got {cap}")
        return [min(max(v / cap, 0.0), 1.0) for v in vals]
    raise ConfigError(f"unknown normalization mode {mode!r}")


@dataclass(frozen=True)
class WeightVector:
    lambda_text: float
    lambda_image: float
    lambda_task: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ConfigError(f"weights must be finite and >= 0, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ConfigError(f"weights must sum to 1, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_text, self.lambda_image, self.lambda_task)

    def for_axis(self, axis: str) -> float:
        return {"text": self.lambda_text, "image": self.lambda_image, "task": self.lambda_task}[axis]

    def to_dict(self) -> dict[str, float]:
        return {"lambda_text": self.lambda_text, "lambda_image": self.lambda_image, "lambda_task": self.lambda_task}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WeightVector":
        try:
            return cls(float(d["lambda_text"]), float(d["lambda_image"]), float(d["lambda_task"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed weight entry {dict(d)!r}") from e


EQUAL_WEIGHTS = WeightVector(1 / 3, 1 / 3, 1 / 3)


def composite_score(s_text: float, s_image: float, s_task: float, w: WeightVector) -> float:
    if not isinstance(w, WeightVector):
        raise ConfigError("weights must be a WeightVector")
    for name, v in (("S_text", s_text), ("S_image", s_image), ("S_task", s_task)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{name} must lie in [0, 1], got {v}")
    return w.lambda_text * s_text + w.lambda_image * s_image + w.lambda_task * s_task


# --------------------------------------------------------------------------
# weights table
# --------------------------------------------------------------------------


def load_weights_table(path) -> dict[TaskCategory, WeightVector]:
    """Read a per-category weights file ``{category: {lambda_text, ...}}``.

    Extra keys (calibration diagnostics) are ignored.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read weights file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"weights file {path} must hold an object keyed by category")
    return {TaskCategory.parse(k): WeightVector.from_dict(v) for k, v in doc.items()}


def weights_for(category: TaskCategory | None, table) -> WeightVector:
    if isinstance(table, WeightVector):
        return table
    if table and category in table:
        return table[category]
    logger.warning("no weights for category %s; using equal weights", category.value if category else None)
    return EQUAL_WEIGHTS


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Oracles:
    """Model-derived value providers consulted when annotations are missing.

    With ``unigram_fallback`` a unigram perplexity model is fitted per
    dataset whenever ``perplexity`` is not given.
    """

    perplexity: textstats.PerplexityOracle | None = None
    ocr: imagestats.CountOracle | None = None
    detector: imagestats.CountOracle | None = None
    unigram_fallback: bool = False


@dataclass
class ComplexityReport:
    name: str
    category: TaskCategory | None
    n_samples: int
    raw: dict[str, float | None]
    normalized: dict[str, float | None]
    axis_scores: dict[str, float | None]
    weights: WeightVector
    score: float
    omitted: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def check(self) -> None:
        vals = [v for v in list(self.normalized.values()) + list(self.axis_scores.values()) if v is not None]
        if not all(0.0 <= v <= 1.0 for v in vals) or not 0.0 <= self.score <= 1.0:
            raise MetricError(f"report {self.name!r}: values outside [0, 1]")
        expect = sum(self.weights.for_axis(a) * (self.axis_scores[f"S_{a}"] or 0.0) for a in AXES)
        if abs(expect - self.score) > 1e-9:
            raise MetricError(f"report {self.name!r}: S inconsistent with weights")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "category": self.category.value if self.category else None,
            "n_samples": self.n_samples,
            "raw": self.raw,
            "normalized": self.normalized,
            "axis_scores": self.axis_scores,
            "weights": self.weights.to_dict(),
            "S": self.score,
            "omitted": self.omitted,
            "notes": self.notes,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ComplexityReport":
        try:
            return cls(
                name=d["name"],
                category=TaskCategory.parse(d["category"]) if d.get("category") else None,
                n_samples=int(d["n_samples"]),
                raw=dict(d["raw"]),
                normalized=dict(d["normalized"]),
                axis_scores=dict(d["axis_scores"]),
                weights=WeightVector.from_dict(d["weights"]),
                score=float(d["S"]),
                omitted=dict(d.get("omitted", {})),
                notes=list(d.get("notes", [])),
                config=dict(d.get("config", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MetricError(f"malformed complexity report: {e}") from e


def _axis_raw(axis: str, ds: DatasetManifest, oracles: Oracles, gap_cfg: GapConfig, notes: list[str]):
    if axis == "text":
        lm = oracles.perplexity
        if lm is None and oracles.unigram_fallback:
            lm = textstats.UnigramPerplexityOracle.fit(ds)
        skipped: list[str] = []
        out = {
            "L": textstats.avg_token_length(ds),
            "T": textstats.avg_ttr(ds, skipped),
            "P": textstats.avg_perplexity(ds, lm),
        }
        if skipped:
            notes.append(f"TTR skipped empty samples: {', '.join(skipped)}")
        return out
    if axis == "image":
        return {
            "E": imagestats.avg_entropy(ds),
            "D_text": imagestats.text_density(ds, oracles.ocr),
            "D_obj": imagestats.object_density(ds, oracles.detector),
        }
    c_sm, c_ml = taskgap.task_complexities(ds, gap_cfg)
    return {"C_small_mid": c_sm, "C_mid_large": c_ml}


def score_batch(
    manifests: Sequence[DatasetManifest],
    weights=None,
    gap_cfg: GapConfig | None = None,
    norm: str = "minmax",
    oracles: Oracles | None = None,
    caps: Mapping[str, float] | None = None,
) -> list[ComplexityReport]:
    """Score manifests together; min-max normalization spans the whole batch.

    ``weights`` is a WeightVector for every dataset or a per-category table.
    An axis whose metrics cannot be computed is omitted when its weight is 0
    and is an error otherwise.
    """
    if norm not in NORM_MODES:
        raise ConfigError(f"normalization must be one of {NORM_MODES}, got {norm!r}")
    if not manifests:
        raise MetricError("nothing to score")
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        raise MetricError("dataset names in one scoring batch must be unique")
    gap_cfg = gap_cfg or GapConfig()
    oracles = oracles or Oracles()
    caps = {**DEFAULT_CAPS, **(caps or {})}

    raws: list[dict[str, float | None]] = []
    omitted_all: list[dict[str, str]] = []
    notes_all: list[list[str]] = []
    wvecs: list[WeightVector] = []
    resolved: dict[TaskCategory | None, WeightVector] = {}
    for ds in manifests:
        if not ds.samples:
            raise MetricError(f"dataset {ds.name!r} has no samples")
        if ds.category not in resolved:
            resolved[ds.category] = weights_for(ds.category, weights) if weights is not None else EQUAL_WEIGHTS
        w = resolved[ds.category]
        raw: dict[str, float | None] = {k: None for k in RAW_KEYS}
        omitted: dict[str, str] = {}
        notes: list[str] = []
        for axis in AXES:
            try:
                raw.update(_axis_raw(axis, ds, oracles, gap_cfg, notes))
            except VlcurateError as e:
                if w.for_axis(axis) > 0:
                    raise MetricError(
                        f"dataset {ds.name!r}: {axis} axis has weight {w.for_axis(axis):g} but cannot be computed: {e}"
                    ) from e
                omitted[axis] = str(e)
        raws.append(raw)
        omitted_all.append(omitted)
        notes_all.append(notes)
        wvecs.append(w)

    normalized: list[dict[str, float | None]] = [
        {k: None for k in ("L", "T", "P", "E", "D_text", "D_obj")} for _ in manifests
    ]
    for key in ("L", "T", "P", "D_text", "D_obj"):
        idx = [i for i, r in enumerate(raws) if r[key] is not None]
        if not idx:
            continue
        if norm == "minmax":
            out = normalize_batch([raws[i][key] for i in idx], "minmax")
        else:
            out = normalize_batch([raws[i][key] for i in idx], "fixed_cap", caps[key])
        for i, v in zip(idx, out):
            normalized[i][key] = v
    for i, r in enumerate(raws):
        if r["E"] is not None:
            normalized[i]["E"] = min(r["E"] / ENTROPY_CONSTANT, 1.0)

    config = {
        "beta": gap_cfg.beta,
        "delta": gap_cfg.delta,
        "delta_on_raw_large_loss": gap_cfg.delta_on_raw_large_loss,
        "normalization": norm,
        "entropy_constant": ENTROPY_CONSTANT,
    }
    if norm == "fixed":
        config["caps"] = dict(sorted(caps.items()))

    reports = []
    for ds, raw, nrm, omitted, notes, w in zip(manifests, raws, normalized, omitted_all, notes_all, wvecs):
        axis_scores: dict[str, float | None] = {"S_text": None, "S_image": None, "S_task": None}
        if "text" not in omitted:
            axis_scores["S_text"] = textstats.text_score(nrm["L"], nrm["T"], nrm["P"])
        if "image" not in omitted:
            axis_scores["S_image"] = imagestats.image_score(nrm["E"], nrm["D_text"], nrm["D_obj"])
        if "task" not in omitted:
            axis_scores["S_task"] = taskgap.task_score(raw["C_small_mid"], raw["C_mid_large"])
        score = composite_score(
            axis_scores["S_text"] or 0.0, axis_scores["S_image"] or 0.0, axis_scores["S_task"] or 0.0, w
        )
        rep = ComplexityReport(
            name=ds.name,
            category=ds.category,
            n_samples=len(ds.samples),
            raw=raw,
            normalized=nrm,
            axis_scores=axis_scores,
            weights=w,
            score=score,
            omitted=omitted,
            notes=notes,
            config=dict(config),
        )
        rep.check()
        reports.append(rep)
    return reports


def score_dataset(
    manifest: DatasetManifest,
    oracles: Oracles | None = None,
    weights=None,
    gap_cfg: GapConfig | None = None,
    norm: str = "minmax",
    caps: Mapping[str, float] | None = None,
) -> ComplexityReport:
    """Score a single dataset (a batch of one)."""
    return score_batch([manifest], weights=weights, gap_cfg=gap_cfg, norm=norm, oracles=oracles, caps=caps)[0]


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RankedSubsets:
    """Five reference datasets of one category with human difficulty ranks (1 = easiest)."""

    category: TaskCategory | None
    refs: tuple[str, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "refs", tuple(self.refs))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if len(self.refs) != 5 or len(self.ranks) != 5:
            raise ConfigError(f"calibration needs exactly 5 ranked subsets, got {len(self.refs)}")
        if sorted(self.ranks) != [1, 2, 3, 4, 5]:
            raise ConfigError(f"ranks must be a permutation of 1..5, got {self.ranks}")
        if len(set(self.refs)) != 5:
            raise ConfigError("subset references must be distinct")

    @classmethod
    def in_order(cls, category, refs: Sequence[str]) -> "RankedSubsets":
        return cls(category, tuple(refs), tuple(range(1, len(refs) + 1)))


@dataclass(frozen=True)
class CalibrationResult:
    weights: WeightVector
    min_margin: float
    feasible: bool
    kendall_tau: float
    grid_step: float
    meets_threshold: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.weights.to_dict(),
            "min_margin": self.min_margin,
            "feasible": self.feasible,
            "kendall_tau": self.kendall_tau,
            "grid_step": self.grid_step,
            "meets_threshold": self.meets_threshold,
        }


def simplex_grid(step: float) -> list[tuple[int, int, int, int]]:
    """Integer simplex points (i, j, k, m) with i + j + k = m = 1/step."""
    m = round(1.0 / step)
    if not step > 0 or m < 1 or abs(m * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step must divide 1 evenly, got {step}")
    return [(i, j, m - i - j, m) for i in range(m + 1) for j in range(m + 1 - i)]


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b; 0 when either sequence is constant."""
    n = len(x)
    conc = disc = tx = ty = 0
    for a, b in itertools.combinations(range(n), 2):
        dx = x[a] - x[b]
        dy = y[a] - y[b]
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif (dx > 0) == (dy > 0):
            conc += 1
        else:
            disc += 1
    denom = math.sqrt((conc + disc + tx) * (conc + disc + ty))
    return (conc - disc) / denom if denom else 0.0


def calibrate_weights(
    ranked: RankedSubsets,
    axis_scores: Mapping[str, Sequence[float]] | Sequence[Sequence[float]],
    grid_step: float = 0.05,
    margin_threshold: float = 0.0,
) -> CalibrationResult:
    """Grid-search simplex weights so S strictly increases with human rank.

    Among strictly monotone weightings the one with the largest minimum
    consecutive margin wins (ties: larger lambda_task, then lambda_image).
    If none is monotone, the weighting with the best Kendall tau is returned
    with ``feasible=False`` (ties: margin, then the same order).
    ``axis_scores`` maps each subset ref to (S_text, S_image, S_task), or is a
    list aligned with ``ranked.refs``.
    """
    if isinstance(axis_scores, Mapping):
        try:
            rows = [tuple(axis_scores[r]) for r in ranked.refs]
        except KeyError as e:
            raise ConfigError(f"no axis scores for subset {e.args[0]!r}") from None
    else:
        rows = [tuple(r) for r in axis_scores]
    if len(rows) != 5 or any(len(r) != 3 for r in rows):
        raise ConfigError("axis scores must be five (S_text, S_image, S_task) triples")
    A = np.array(rows, dtype=float)
    if not np.all((A >= 0) & (A <= 1)):
        raise ConfigError("axis scores must lie in [0, 1]")
    order = np.argsort(np.array(ranked.ranks), kind="stable")
    A = A[order]

    grid = simplex_grid(grid_step)
    G = np.array(grid, dtype=float)
    lam = G[:, :3] / G[:, 3:4]
    S = lam @ A.T
    margins = np.diff(S, axis=1).min(axis=1)
    feasible_mask = margins > _TIE_EPS

    def pick(cands: list[int], primary) -> int:
        best = max(primary(c) for c in cands)
        tied = [c for c in cands if primary(c) >= best - _TIE_EPS]
        return max(tied, key=lambda c: (grid[c][2], grid[c][1]))

    if feasible_mask.any():
        idx = pick([int(i) for i in np.flatnonzero(feasible_mask)], lambda c: margins[c])
        tau = kendall_tau_b(S[idx].tolist(), [1, 2, 3, 4, 5])
        feasible = True
    else:
        taus = [kendall_tau_b(S[c].tolist(), [1, 2, 3, 4, 5]) for c in range(len(grid))]
        best_tau = max(taus)
        tied = [c for c in range(len(grid)) if taus[c] >= best_tau - _TIE_EPS]
        idx = pick(tied, lambda c: margins[c])
        tau = taus[idx]
        feasible = False
    i, j, k, m = grid[idx]
    weights = WeightVector(i / m, j / m, k / m)
    min_margin = float(margins[idx])
    return CalibrationResult(
        weights=weights,
        min_margin=min_margin,
        feasible=feasible,
        kendall_tau=float(tau),
        grid_step=grid_step,
        meets_threshold=feasible and min_margin >= margin_threshold - _TIE_EPS,
    )
