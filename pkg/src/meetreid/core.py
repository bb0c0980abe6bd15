"""Shared vocabulary: boxes, detections, frames and embedding helpers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

DEFAULT_EMBEDDING_DIM = 128
NORM_EPS = 1e-6


@dataclass(frozen=True, slots=True)
class BBox:
    """Axis-aligned box in integer pixels, anchored at the top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    def within(self, canvas_w: int, canvas_h: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= canvas_w and self.y2 <= canvas_h


def area(box: BBox) -> int:
    return box.w * box.h


def intersection_area(a: BBox, b: BBox) -> int:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    if iw <= 0:
        return 0
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ih <= 0:
        return 0
    return iw * ih


def contains(outer: BBox, inner: BBox, min_frac: float = 0.9) -> bool:
    """True when at least ``min_frac`` of ``inner``'s area lies inside ``outer``."""
    # integer compare avoids float rounding at the boundary
    return intersection_area(outer, inner) >= min_frac * (inner.w * inner.h)


def normalize(vec, eps: float = NORM_EPS) -> np.ndarray:
    """L2-normalize a vector.

    Vectors whose norm is already within ``eps`` of 1 are returned unchanged, which
    makes normalization a true fixpoint under serialize/parse round trips.
    Raises ``ValueError`` for zero or non-finite input.
    """
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.sqrt(np.dot(v, v)))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    if abs(n - 1.0) <= eps:
        return v
    return v / n


def is_normalized(vec, eps: float = NORM_EPS) -> bool:
    v = np.asarray(vec, dtype=np.float64)
    return bool(np.all(np.isfinite(v))) and abs(float(np.sqrt(np.dot(v, v))) - 1.0) <= eps


def timestamp_s(index: int, sampling_rate_fps: float) -> float:
    """Seconds from meeting start of a sampled frame."""
    return index / sampling_rate_fps


@dataclass(frozen=True, slots=True)
class PersonDetection:
    track_id: int
    box: BBox


@dataclass(frozen=True, eq=False, slots=True)
class FaceDetection:
    """A face box, optionally carrying an embedding and the upstream track it was logged under."""

    box: BBox
    embedding: Optional[np.ndarray] = None
    track_id: Optional[int] = None

    def __eq__(self, other):
        if not isinstance(other, FaceDetection):
            return NotImplemented
        if self.box != other.box or self.track_id != other.track_id:
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    def __hash__(self):
        return hash((self.box, self.track_id))


@dataclass(frozen=True, slots=True)
class DetectionFrame:
    """Everything observed at one sampled timestamp.

    ``faces`` is the candidate list as logged; ``faces_by_track`` is filled in once
    faces have been gated and associated with person boxes.
    """

    index: int
    persons: tuple[PersonDetection, ...] = ()
    faces: tuple[FaceDetection, ...] = ()
    faces_by_track: Mapping[int, FaceDetection] = field(default_factory=dict)

    @property
    def track_ids(self) -> frozenset[int]:
        return frozenset(p.track_id for p in self.persons)

    def person(self, track_id: int) -> Optional[PersonDetection]:
        for p in self.persons:
            if p.track_id == track_id:
                return p
        return None
