"""Participant re-identification for gallery-view meeting recordings."""
from .core import BBox, DetectionFrame, FaceDetection, PersonDetection, area, contains
from .facegate import GateConfig, gate_frame
from .ingest import FrameStream, StreamHeader, parse_stream, serialize_stream, validate_stream
from .tracker import MatchConfig, track_stream

__version__ = "0.1.0"

__all__ = [
    "BBox", "DetectionFrame", "FaceDetection", "PersonDetection", "area", "contains",
    "GateConfig", "gate_frame",
    "FrameStream", "StreamHeader", "parse_stream", "serialize_stream", "validate_stream",
    "MatchConfig", "track_stream",
]
