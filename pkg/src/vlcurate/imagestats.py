"""Visual complexity metrics: histogram entropy, OCR text density, object density."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import MetricError, MissingAnnotationError
from .manifest import DatasetManifest, Sample

ENTROPY_MAX_BITS = 8.0


class CountOracle(Protocol):
    def count(self, sample: Sample) -> int: ...


@dataclass(frozen=True)
class ImageMetrics:
    avg_entropy: float
    avg_text_density: float
    avg_object_density: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.avg_entropy <= ENTROPY_MAX_BITS:
            raise MetricError(f"avg_entropy out of [0, 8]: {self.avg_entropy}")
        for v in (self.avg_text_density, self.avg_object_density):
            if not (v >= 0 and np.isfinite(v)):
                raise MetricError(f"density must be finite and >= 0, got {v}")


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Integer luma, round(0.299 R + 0.587 G + 0.114 B), computed exactly."""
    rgb = rgb.astype(np.int64)
    return ((299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000).astype(np.uint8)


def _as_gray(arr: np.ndarray, sample_id: str) -> np.ndarray:
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return rgb_to_luma(arr[..., :3])
    raise MetricError(f"sample {sample_id!r}: unsupported pixel array shape {arr.shape}")


def image_size(sample: Sample, dataset: DatasetManifest | None = None) -> tuple[int, int]:
    """(width, height) of the original image, without decoding pixels."""
    if sample.image is not None:
        return sample.image.width, sample.image.height
    if sample.image_path is None:
        raise MissingAnnotationError(sample.id, "image")
    path = dataset.resolve(sample.image_path) if dataset is not None else sample.image_path
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, UnidentifiedImageError) as e:
        raise MetricError(f"sample {sample.id!r}: cannot open image {path}: {e}") from e


def load_gray(sample: Sample, dataset: DatasetManifest | None = None) -> np.ndarray:
    """Decode a sample's image to an (H, W) uint8 luma array."""
    if sample.image is not None:
        img = sample.image
        if img.pixels is not None:
            arr = np.asarray(img.pixels)
        elif img.pixels_path is not None:
            path = dataset.resolve(img.pixels_path) if dataset is not None else img.pixels_path
            try:
                raw = np.fromfile(path, dtype=np.uint8)
            except OSError as e:
                raise MetricError(f"sample {sample.id!r}: cannot read {path}: {e}") from e
            n = img.width * img.height
            if raw.size == n:
                arr = raw.reshape(img.height, img.width)
            elif raw.size == 3 * n:
                arr = raw.reshape(img.height, img.width, 3)
            else:
                raise MetricError(
                    f"sample {sample.id!r}: pixel buffer has {raw.size} bytes, expected {n} or {3 * n}"
                )
        else:
            raise MetricError(f"sample {sample.id!r}: inline image has no pixel data")
        if arr.shape[:2] != (img.height, img.width):
            raise MetricError(f"sample {sample.id!r}: pixel array shape {arr.shape} does not match {img.width}x{img.height}")
        return _as_gray(arr, sample.id)
    if sample.image_path is None:
        raise MissingAnnotationError(sample.id, "image")
    path = dataset.resolve(sample.image_path) if dataset is not None else sample.image_path
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im)
            else:
                if im.mode not in ("RGB",):
                    im = im.convert("RGB")
                arr = np.asarray(im)
    except (OSError, UnidentifiedImageError) as e:
        raise MetricError(f"sample {sample.id!r}: cannot decode image {path}: {e}") from e
    return _as_gray(arr, sample.id)


def image_entropy(pixels, levels: int = 256) -> float:
    """Shannon entropy in bits of the intensity histogram with ``levels`` bins."""
    arr = np.asarray(pixels)
    if arr.size == 0:
        raise MetricError("entropy of an empty image is undefined")
    flat = arr.ravel()
    if not np.issubdtype(flat.dtype, np.integer):
        if not np.all(flat == np.floor(flat)):
            raise MetricError("pixel intensities must be integers")
        flat = flat.astype(np.int64)
    if flat.min() < 0 or flat.max() >= levels:
        raise MetricError(f"pixel intensities must lie in [0, {levels})")
    counts = np.bincount(flat.astype(np.int64), minlength=levels)
    q = counts[counts > 0] / flat.size
    h = float(-(q * np.log2(q)).sum())
    return h if h > 0 else 0.0


def avg_entropy(dataset: DatasetManifest) -> float:
    if not dataset.samples:
        raise MetricError(f"dataset {dataset.name!r} has no samples")
    values = [image_entropy(load_gray(s, dataset)) for s in dataset.samples]
    return sum(values) / len(values)


def sample_count(sample: Sample, field: str, oracle: CountOracle | None) -> int:
    value = getattr(sample.annotations, field)
    if value is not None:
        return value
    if oracle is None:
        raise MissingAnnotationError(sample.id, field, "no annotation and no oracle")
    value = oracle.count(sample)
    if value is None or value < 0:
        raise MissingAnnotationError(sample.id, field, f"oracle returned {value!r}")
    return value


def _avg_density(dataset: DatasetManifest, field: str, oracle: CountOracle | None) -> float:
    if not dataset.samples:
        raise MetricError(f"dataset {dataset.name!r} has no samples")
    total = 0.0
    for s in dataset.samples:
        count = sample_count(s, field, oracle)
        w, h = image_size(s, dataset)
        if w * h <= 0:
            raise MetricError(f"sample {s.id!r}: zero-area image")
        total += count / (w * h)
    return total / len(dataset.samples)


def text_density(dataset: DatasetManifest, ocr: CountOracle | None = None) -> float:
    """Mean OCR tokens per pixel of the original image."""
    return _avg_density(dataset, "ocr_token_count", ocr)


def object_density(dataset: DatasetManifest, detector: CountOracle | None = None) -> float:
    """Mean detected objects per pixel of the original image."""
    return _avg_density(dataset, "object_count", detector)


def image_score(e_hat: float, d_text_hat: float, d_obj_hat: float) -> float:
    for name, v in (("E", e_hat), ("D_text", d_text_hat), ("D_obj", d_obj_hat)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"normalized {name} must lie in [0, 1], got {v}")
    return (e_hat + d_text_hat + d_obj_hat) / 3.0


def image_metrics(
    dataset: DatasetManifest, ocr: CountOracle | None = None, detector: CountOracle | None = None
) -> ImageMetrics:
    return ImageMetrics(
        avg_entropy=avg_entropy(dataset),
        avg_text_density=text_density(dataset, ocr),
        avg_object_density=object_density(dataset, detector),
        n=len(dataset.samples),
    )
