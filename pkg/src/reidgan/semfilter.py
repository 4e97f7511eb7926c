"""Face-presence filter: pluggable keypoint detectors and sample filtering.

A detector is any object with ``detect(image) -> KeypointDetection`` taking an
H x W x 3 array in [-1, 1], plus a ``thread_safe`` attribute. The toy oracle
locates the face glyph rendered by :func:`reidgan.data.synth_toy_corpus`; an
external detector (for instance a real keypoint network) is plugged in by
import path ``package.module:factory``.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .data import SKIN, Sample


class DetectorError(Exception):
    """Raised when no usable detector is available or a detector misbehaves."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        for name in ("x", "y", "confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"keypoint {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class KeypointDetection:
    keypoints: tuple[Keypoint, ...] = ()

    @classmethod
    def from_tuples(cls, items: Iterable[tuple[float, float, float]]) -> "KeypointDetection":
        return cls(tuple(Keypoint(*t) for t in items))


@dataclass(frozen=True)
class FilterVerdict:
    present: int
    detection: KeypointDetection


class Detector(Protocol):
    thread_safe: bool

    def detect(self, image: np.ndarray) -> KeypointDetection: ...


class OracleDetector:
    """Exact face-glyph finder for toy-corpus patches.

    Reports one keypoint (the glyph's centroid, confidence 1.0) when at least
    ``min_fraction`` of a glyph's area is skin-coloured; toy renders never put
    skin-coloured pixels anywhere else.
    """

    thread_safe = True

    def __init__(self, tolerance: float = 0.2, min_fraction: float = 0.5):
        self.tolerance = tolerance
        self.min_fraction = min_fraction

    def detect(self, image: np.ndarray) -> KeypointDetection:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 16:
            raise DetectorError(f"oracle expects an HxWx3 patch with H >= 16, got {image.shape}")
        s = image.shape[0]
        head = max(3, int(round(6 * s / 32)))
        skin = np.abs(image - SKIN).max(axis=2) <= self.tolerance
        if skin.sum() < self.min_fraction * (head * head - 2):
            return KeypointDetection()
        ys, xs = np.nonzero(skin)
        return KeypointDetection(
            (Keypoint(float(xs.mean() / (s - 1)), float(ys.mean() / (image.shape[0] - 1)), 1.0),)
        )


class CallableDetector:
    """Adapts a plain function ``image -> [(x, y, confidence), ...]``."""

    def __init__(self, fn: Callable[[np.ndarray], Sequence[tuple[float, float, float]]], thread_safe: bool = False):
        self.fn = fn
        self.thread_safe = thread_safe

    def detect(self, image: np.ndarray) -> KeypointDetection:
        result = self.fn(image)
        if isinstance(result, KeypointDetection):
            return result
        return KeypointDetection.from_tuples(result)


def load_external_detector(spec: str) -> Detector:
    """Import ``module:attr``; ``attr`` is a detector, a factory, or a plain function."""
    if not spec or ":" not in spec:
        raise DetectorError(f"external detector must be given as module:attr, got {spec!r}")
    mod_name, attr = spec.split(":", 1)
    try:
        obj = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise DetectorError(f"cannot load external detector {spec!r}: {exc}") from exc
    if isinstance(obj, type):
        return obj()
    if hasattr(obj, "detect"):
        return obj
    return CallableDetector(obj)


def make_detector(kind: str, spec: str | None = None) -> Detector | None:
    """Detector selection used by the CLI: ``oracle``, ``external`` or ``none``."""
    if kind == "oracle":
        return OracleDetector()
    if kind == "external":
        return load_external_detector(spec or "")
    if kind == "none":
        return None
    raise DetectorError(f"unknown detector kind {kind!r}")


def detect_keypoints(image: np.ndarray, detector: Detector | None) -> KeypointDetection:
    if detector is None:
        raise DetectorError("no face detector configured; refusing to skip filtering")
    det = detector.detect(image)
    if not isinstance(det, KeypointDetection):
        raise DetectorError(f"detector returned {type(det).__name__}, expected KeypointDetection")
    return det


def face_present(detection: KeypointDetection, confidence_threshold: float = 0.0) -> FilterVerdict:
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError(f"confidence_threshold must be in [0, 1], got {confidence_threshold}")
    hit = any(k.confidence >= confidence_threshold for k in detection.keypoints)
    return FilterVerdict(int(hit), detection)


def verdict(image: np.ndarray, detector: Detector | None, threshold: float = 0.0) -> FilterVerdict:
    return face_present(detect_keypoints(image, detector), threshold)


@dataclass
class FilterStats:
    kept: dict[int, int] = field(default_factory=dict)
    total: dict[int, int] = field(default_factory=dict)

    @property
    def n_kept(self) -> int:
        return sum(self.kept.values())

    @property
    def n_total(self) -> int:
        return sum(self.total.values())

    @property
    def retention(self) -> float:
        """Kept fraction of the input; 0.0 for empty input."""
        return self.n_kept / self.n_total if self.n_total else 0.0

    def per_class_retention(self) -> dict[int, float]:
        return {c: self.kept.get(c, 0) / t for c, t in sorted(self.total.items())}

    def as_dict(self) -> dict:
        return {
            "kept": self.n_kept,
            "total": self.n_total,
            "retention": self.retention,
            "per_class": {
                str(c): {"kept": self.kept.get(c, 0), "total": t} for c, t in sorted(self.total.items())
            },
        }


def filter_samples(
    samples: Sequence[Sample], detector: Detector | None, threshold: float = 0.0
) -> tuple[list[Sample], FilterStats]:
    """Keep samples where a face is detected, preserving order."""
    kept = []
    stats = FilterStats()
    for s in samples:
        stats.total[s.label] = stats.total.get(s.label, 0) + 1
        if verdict(s.image, detector, threshold).present:
            kept.append(s)
            stats.kept[s.label] = stats.kept.get(s.label, 0) + 1
    stats.kept = dict(sorted(stats.kept.items()))
    stats.total = dict(sorted(stats.total.items()))
    return kept, stats
