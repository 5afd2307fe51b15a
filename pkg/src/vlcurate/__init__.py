"""Complexity scoring, filtering, tile planning and curriculum planning for vision-language corpora."""

__version__ = "0.1.0"

from .errors import ConfigError, ManifestError, MetricError, MissingAnnotationError, VlcurateError
from .manifest import (
    AnnotationSet,
    DatasetManifest,
    InlineImage,
    JudgeVerdict,
    Sample,
    TaskCategory,
    attach_annotations,
    categorize,
    load_manifest,
    write_manifest,
)
from .scoring import ComplexityReport, Oracles, WeightVector, calibrate_weights, score_batch, score_dataset
from .taskgap import GapConfig
from .tileplan import ResolutionConfig, compare_schemes, plan, snap_dims
