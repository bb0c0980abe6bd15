"""Face-quality heuristics: minimum size, one (largest) face per person box."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from .core import DetectionFrame, FaceDetection, PersonDetection, area, contains, intersection_area

MIN_FACE_PX = 40


@dataclass(frozen=True)
class GateConfig:
    min_face_w: int = MIN_FACE_PX
    min_face_h: int = MIN_FACE_PX
    containment_frac: float = 0.9

    def __post_init__(self):
        if self.min_face_w <= 0 or self.min_face_h <= 0:
            raise ValueError("minimum face size must be positive")
        if not 0.0 <= self.containment_frac <= 1.0:
            raise ValueError("containment_frac must lie in [0, 1]")

    @classmethod
    def square(cls, min_face_px: int = MIN_FACE_PX, containment_frac: float = 0.9) -> "GateConfig":
        return cls(min_face_px, min_face_px, containment_frac)


def filter_min_size(faces: Iterable[FaceDetection], cfg: GateConfig = GateConfig()) -> list[FaceDetection]:
    # inclusive: a face of exactly the minimum size passes
    return [f for f in faces if f.box.w >= cfg.min_face_w and f.box.h >= cfg.min_face_h]


def _face_key(face: FaceDetection):
    # larger area first, then lower x, then lower y
    return (-area(face.box), face.box.x, face.box.y, face.box.w)


def associate_faces(persons: Iterable[PersonDetection], faces: Iterable[FaceDetection],
                    cfg: GateConfig = GateConfig()) -> dict[int, FaceDetection]:
    """Assign each face to the person box containing it and keep one face per person.

    A face contained in several person boxes goes to the one with the largest
    intersection (lower track id on ties). Among faces landing in the same box the
    largest wins. Faces outside every box are dropped.
    """
    persons = list(persons)
    candidates: dict[int, list[FaceDetection]] = {}
    for face in faces:
        best = None
        best_key = None
        for p in persons:
            if not contains(p.box, face.box, cfg.containment_frac):
                continue
            key = (-intersection_area(p.box, face.box), p.track_id)
            if best_key is None or key < best_key:
                best, best_key = p, key
        if best is not None:
            candidates.setdefault(best.track_id, []).append(face)
    out = {}
    for p in persons:
        group = candidates.get(p.track_id)
        if group:
            first = min(_face_key(f) for f in group)
            tied = [f for f in group if _face_key(f) == first]
            # identical boxes: fall back to embedding bytes so input order never matters
            chosen = min(tied, key=lambda f: b"" if f.embedding is None else b"\x01" + f.embedding.tobytes())
            if chosen.track_id != p.track_id:
                chosen = replace(chosen, track_id=p.track_id)
            out[p.track_id] = chosen
    return out


def gate_frame(frame: DetectionFrame, cfg: GateConfig = GateConfig()) -> DetectionFrame:
    """Apply size filter then association; the surviving faces replace the candidate list."""
    kept = associate_faces(frame.persons, filter_min_size(frame.faces, cfg), cfg)
    return DetectionFrame(frame.index, frame.persons, tuple(kept.values()), kept)
