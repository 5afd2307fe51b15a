"""Cross-modal task complexity from small/large model loss gaps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, MetricError, MissingAnnotationError
from .manifest import DatasetManifest

# Toolkit defaults; tune per corpus.
DEFAULT_BETA = 1.2
DEFAULT_DELTA = 0.5


@dataclass(frozen=True)
class GapConfig:
    beta: float = DEFAULT_BETA
    delta: float = DEFAULT_DELTA
    # Apply the floor to the raw large-model loss instead of beta * loss.
    delta_on_raw_large_loss: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError(f"beta must be finite and > 0, got {self.beta}")
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ConfigError(f"delta must be finite and >= 0, got {self.delta}")


@dataclass(frozen=True)
class LossPairSeries:
    loss_small: tuple[float, ...]
    loss_large: tuple[float, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "loss_small", tuple(float(x) for x in self.loss_small))
        object.__setattr__(self, "loss_large", tuple(float(x) for x in self.loss_large))
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.loss_small) != len(self.loss_large):
            raise MetricError("loss series must have equal length")
        if self.ids and len(self.ids) != len(self.loss_small):
            raise MetricError("ids must align with the loss series")
        for v in self.loss_small + self.loss_large:
            if not (math.isfinite(v) and v >= 0):
                raise MetricError(f"losses must be finite and >= 0, got {v}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, float]]) -> "LossPairSeries":
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @classmethod
    def from_manifest(cls, dataset: DatasetManifest, smaller: str, larger: str) -> "LossPairSeries":
        small, large = [], []
        for s in dataset.samples:
            losses = s.annotations.model_losses
            for tier in (smaller, larger):
                if tier not in losses:
                    raise MissingAnnotationError(s.id, f"loss_{tier}")
            small.append(losses[smaller])
            large.append(losses[larger])
        return cls(tuple(small), tuple(large), tuple(dataset.ids))

    def __len__(self) -> int:
        return len(self.loss_small)


def gap_indicator(loss_small: float, loss_large: float, cfg: GapConfig) -> bool:
    """True when loss_small > beta * loss_large > delta."""
    scaled = cfg.beta * loss_large
    floor_term = loss_large if cfg.delta_on_raw_large_loss else scaled
    return loss_small > scaled and floor_term > cfg.delta


def pair_complexity(series: LossPairSeries, cfg: GapConfig) -> float:
    """Fraction of samples whose loss gap passes the indicator."""
    if len(series) == 0:
        raise MetricError("loss series is empty")
    hits = sum(gap_indicator(s, l, cfg) for s, l in zip(series.loss_small, series.loss_large))
    return hits / len(series)


def task_score(c_small_mid: float, c_mid_large: float) -> float:
    for name, v in (("C(small, mid)", c_small_mid), ("C(mid, large)", c_mid_large)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{name} must lie in [0, 1], got {v}")
    return (c_small_mid + c_mid_large) / 2.0


def task_complexities(dataset: DatasetManifest, cfg: GapConfig) -> tuple[float, float]:
    """(C(small, mid), C(mid, large)) from sidecar losses."""
    c_sm = pair_complexity(LossPairSeries.from_manifest(dataset, "small", "mid"), cfg)
    c_ml = pair_complexity(LossPairSeries.from_manifest(dataset, "mid", "large"), cfg)
    return c_sm, c_ml
