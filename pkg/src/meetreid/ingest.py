"""Detection-log format: sampling, JSONL parsing, canonical serialization, validation.

One header line, then one line per sampled frame::

    {"type":"header","meeting_id":"m0","source_fps":30,"sampling_rate_fps":2,"canvas":[1280,720],"embedding_dim":128}
    {"type":"frame","index":0,"persons":[{"track_id":1,"box":[x,y,w,h]}],"faces":[{"track_id":1,"box":[...],"embedding":[...]}]}
"""
from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Iterable, Iterator, Union

import numpy as np

from .core import DEFAULT_EMBEDDING_DIM, BBox, DetectionFrame, FaceDetection, PersonDetection, contains, is_normalized, normalize
from .errors import DimensionMismatch, DuplicateTrackInFrame, MalformedRecord, NonMonotoneFrameIndex

logger = logging.getLogger(__name__)

DEFAULT_SAMPLING_FPS = 2.0

_HEADER_KEYS = {"type", "meeting_id", "source_fps", "sampling_rate_fps", "canvas", "embedding_dim"}
_FRAME_KEYS = {"type", "index", "persons", "faces"}
_PERSON_KEYS = {"track_id", "box"}
_FACE_KEYS = {"track_id", "box", "embedding"}


@dataclass(frozen=True)
class StreamHeader:
    meeting_id: str
    source_fps: float
    sampling_rate_fps: float = DEFAULT_SAMPLING_FPS
    canvas: tuple[int, int] = (1280, 720)
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    def __post_init__(self):
        if self.source_fps <= 0 or self.sampling_rate_fps <= 0:
            raise ValueError("frame rates must be positive")
        if self.sampling_rate_fps > self.source_fps:
            raise ValueError("sampling rate exceeds source frame rate")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")


@dataclass(frozen=True)
class FrameStream:
    header: StreamHeader
    frames: tuple[DetectionFrame, ...] = ()

    @property
    def fps(self) -> float:
        return self.header.sampling_rate_fps

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class Violation:
    frame: int
    rule: str
    detail: str = ""
    severity: str = "error"

    def __str__(self):
        return f"[{self.severity}] frame {self.frame}: {self.rule} {self.detail}".rstrip()


def sample_indices(source_frame_count: int, source_fps: float, target_fps: float) -> list[int]:
    """Source frame numbers nearest to timestamps k / target_fps, k = 0, 1, ...

    The number of samples is floor(duration * target_fps); ties between two source
    frames resolve to the lower one.
    """
    if target_fps <= 0 or source_fps <= 0:
        raise ValueError("frame rates must be positive")
    if target_fps > source_fps:
        raise ValueError(f"target rate {target_fps} exceeds source rate {source_fps}")
    src = Fraction(source_fps)
    tgt = Fraction(target_fps)
    count = math.floor(Fraction(source_frame_count) / src * tgt)
    step = src / tgt
    last = source_frame_count - 1
    # nearest integer with ties rounding down: ceil(x - 1/2)
    return [min(math.ceil(k * step - Fraction(1, 2)), last) for k in range(count)]


def _read_lines(source) -> Iterator[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
        return
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for line in source:
        yield line.decode("utf-8") if isinstance(line, (bytes, bytearray)) else line


def _check_keys(obj: dict, allowed: set, line_no: int, strict: bool, what: str):
    extra = set(obj) - allowed
    if extra:
        if strict:
            raise MalformedRecord(line_no, f"unknown {what} field(s) {sorted(extra)}")
        logger.warning("line %d: ignoring unknown %s field(s) %s", line_no, what, sorted(extra))


def _int(value, line_no: int, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedRecord(line_no, f"{what} must be an integer")
    return value


def _box(value, line_no: int) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise MalformedRecord(line_no, "box must be [x, y, w, h]")
    x, y, w, h = (_int(v, line_no, "box coordinate") for v in value)
    if w <= 0 or h <= 0:
        raise MalformedRecord(line_no, "box width and height must be positive")
    return BBox(x, y, w, h)


def _embedding(value, dim: int, line_no: int) -> np.ndarray:
    if not isinstance(value, list):
        raise MalformedRecord(line_no, "embedding must be a list")
    if len(value) != dim:
        raise DimensionMismatch(line_no, dim, len(value))
    try:
        v = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise MalformedRecord(line_no, "embedding entries must be numbers") from None
    if not np.all(np.isfinite(v)):
        raise MalformedRecord(line_no, "embedding has non-finite entries")
    try:
        v = normalize(v)
    except ValueError:
        raise MalformedRecord(line_no, "embedding is a zero vector") from None
    v.setflags(write=False)
    return v


def _parse_header(obj: dict, line_no: int, strict: bool) -> StreamHeader:
    if obj.get("type") != "header":
        raise MalformedRecord(line_no, "first record must be the header")
    _check_keys(obj, _HEADER_KEYS, line_no, strict, "header")
    try:
        canvas = obj["canvas"]
        if not isinstance(canvas, list) or len(canvas) != 2:
            raise MalformedRecord(line_no, "canvas must be [w, h]")
        return StreamHeader(
            meeting_id=str(obj["meeting_id"]),
            source_fps=float(obj["source_fps"]),
            sampling_rate_fps=float(obj.get("sampling_rate_fps", DEFAULT_SAMPLING_FPS)),
            canvas=(_int(canvas[0], line_no, "canvas"), _int(canvas[1], line_no, "canvas")),
            embedding_dim=_int(obj.get("embedding_dim", DEFAULT_EMBEDDING_DIM), line_no, "embedding_dim"),
        )
    except KeyError as exc:
        raise MalformedRecord(line_no, f"header missing {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, MalformedRecord):
            raise
        raise MalformedRecord(line_no, str(exc)) from None


def _parse_frame(obj: dict, header: StreamHeader, line_no: int, strict: bool) -> DetectionFrame:
    if obj.get("type") != "frame":
        raise MalformedRecord(line_no, f"unexpected record type {obj.get('type')!r}")
    _check_keys(obj, _FRAME_KEYS, line_no, strict, "frame")
    if "index" not in obj:
        raise MalformedRecord(line_no, "frame missing 'index'")
    index = _int(obj["index"], line_no, "index")
    if index < 0:
        raise MalformedRecord(line_no, "frame index must be non-negative")
    persons = []
    seen = set()
    for rec in obj.get("persons", []):
        if not isinstance(rec, dict) or "track_id" not in rec or "box" not in rec:
            raise MalformedRecord(line_no, "person needs track_id and box")
        _check_keys(rec, _PERSON_KEYS, line_no, strict, "person")
        tid = _int(rec["track_id"], line_no, "track_id")
        if tid in seen:
            raise DuplicateTrackInFrame(index, tid)
        seen.add(tid)
        persons.append(PersonDetection(tid, _box(rec["box"], line_no)))
    faces = []
    for rec in obj.get("faces", []):
        if not isinstance(rec, dict) or "box" not in rec:
            raise MalformedRecord(line_no, "face needs a box")
        _check_keys(rec, _FACE_KEYS, line_no, strict, "face")
        tid = rec.get("track_id")
        if tid is not None:
            tid = _int(tid, line_no, "track_id")
        emb = rec.get("embedding")
        if emb is not None:
            emb = _embedding(emb, header.embedding_dim, line_no)
        faces.append(FaceDetection(_box(rec["box"], line_no), emb, tid))
    return DetectionFrame(index, tuple(persons), tuple(faces))


def iter_frames(source, strict: bool = True) -> tuple[StreamHeader, Iterator[DetectionFrame]]:
    """Lazily parse a log; returns the header and an iterator over frames."""
    lines = enumerate(_read_lines(source), start=1)

    def load(line_no, text):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise MalformedRecord(line_no, "record must be a JSON object")
        return obj

    header = None
    for line_no, text in lines:
        if text.strip():
            header = _parse_header(load(line_no, text), line_no, strict)
            break
    if header is None:
        raise MalformedRecord(1, "missing header")

    def frames():
        previous = -1
        for line_no, text in lines:
            if not text.strip():
                continue
            frame = _parse_frame(load(line_no, text), header, line_no, strict)
            if frame.index <= previous:
                raise NonMonotoneFrameIndex(line_no, previous, frame.index)
            previous = frame.index
            yield frame

    return header, frames()


def parse_stream(source, strict: bool = True) -> FrameStream:
    """Parse a detection log from a path, bytes, or an open (text or binary) file."""
    header, frames = iter_frames(source, strict=strict)
    return FrameStream(header, tuple(frames))


def header_record(header: StreamHeader) -> dict:
    return {
        "type": "header",
        "meeting_id": header.meeting_id,
        "source_fps": header.source_fps,
        "sampling_rate_fps": header.sampling_rate_fps,
        "canvas": list(header.canvas),
        "embedding_dim": header.embedding_dim,
    }


def frame_record(frame: DetectionFrame) -> dict:
    faces = []
    for f in frame.faces:
        rec = {}
        if f.track_id is not None:
            rec["track_id"] = f.track_id
        rec["box"] = f.box.as_list()
        if f.embedding is not None:
            rec["embedding"] = f.embedding.tolist()
        faces.append(rec)
    return {
        "type": "frame",
        "index": frame.index,
        "persons": [{"track_id": p.track_id, "box": p.box.as_list()} for p in frame.persons],
        "faces": faces,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def iter_lines(stream: FrameStream) -> Iterator[str]:
    yield _dumps(header_record(stream.header)) + "\n"
    for frame in stream.frames:
        yield _dumps(frame_record(frame)) + "\n"


def serialize_stream(stream: FrameStream) -> str:
    return "".join(iter_lines(stream))


def write_stream(stream: FrameStream, dest: Union[str, os.PathLike, IO[str]]) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(iter_lines(stream))
    else:
        dest.writelines(iter_lines(stream))


def validate_stream(stream: FrameStream, min_frac: float = 0.9) -> list[Violation]:
    """Check every frame against the core invariants; reports instead of raising."""
    out: list[Violation] = []
    dim = stream.header.embedding_dim
    cw, ch = stream.header.canvas
    previous = -1
    for frame in stream.frames:
        idx = frame.index
        if idx <= previous:
            out.append(Violation(idx, "NonMonotoneFrameIndex", f"after {previous}"))
        previous = idx
        boxes = {}
        for p in frame.persons:
            if p.track_id in boxes:
                out.append(Violation(idx, "DuplicateTrackInFrame", f"track {p.track_id}"))
            boxes[p.track_id] = p.box
            if not p.box.within(cw, ch):
                out.append(Violation(idx, "BoxOutsideCanvas", f"track {p.track_id}", "warning"))
        faces = list(frame.faces) + [f for f in frame.faces_by_track.values() if f not in frame.faces]
        for face in faces:
            _check_embedding(face.embedding, dim, idx, out)
            if face.track_id is None:
                continue
            if face.track_id not in boxes:
                out.append(Violation(idx, "UnknownFaceTrack", f"track {face.track_id}"))
            elif not contains(boxes[face.track_id], face.box, min_frac):
                out.append(Violation(idx, "FaceOutsidePerson", f"track {face.track_id}", "warning"))
        for tid in frame.faces_by_track:
            if tid not in boxes:
                out.append(Violation(idx, "FaceTrackNotInFrame", f"track {tid}"))
    return out


def _check_embedding(emb, dim: int, idx: int, out: list[Violation]):
    if emb is None:
        return
    if emb.shape != (dim,):
        out.append(Violation(idx, "DimensionMismatch", f"expected {dim}, got {emb.shape[0] if emb.ndim else 0}"))
    elif not np.all(np.isfinite(emb)):
        out.append(Violation(idx, "NonFiniteEmbedding"))
    elif not is_normalized(emb):
        out.append(Violation(idx, "NotNormalized"))


def errors_only(violations: Iterable[Violation]) -> list[Violation]:
    return [v for v in violations if v.severity == "error"]
