"""Scene segmentation and cross-scene re-identification of upstream tracks.

A scene is a maximal run of frames whose set of upstream track ids does not
change. Each (scene, track) pair becomes a segment whose face embeddings are
averaged into a unit-length representative. Segments are then merged greedily
into participants, visiting the longest scenes first so the best-supported
means anchor the participant pool.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import BBox, normalize
from .errors import DegenerateMean
from .facegate import GateConfig, gate_frame
from .ingest import FrameStream

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.45
DEFAULT_MIN_ANCHOR_FRAMES = 4
DEFAULT_T_MIN = 120.0

SegmentId = tuple[int, int]  # (scene_id, track_id)


@dataclass(frozen=True)
class Scene:
    scene_id: int
    start: int  # first frame index, inclusive
    end: int  # last frame index, inclusive
    track_ids: frozenset[int]
    frame_count: int

    @property
    def frame_span(self) -> tuple[int, int]:
        return self.start, self.end


@dataclass(frozen=True, eq=False)
class TrackSegment:
    scene_id: int
    track_id: int
    frames: tuple[int, ...]
    boxes: tuple[BBox, ...]
    embeddings: np.ndarray  # (face_frames, D), rows unit length

    @property
    def segment_id(self) -> SegmentId:
        return self.scene_id, self.track_id

    @property
    def face_frames(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass(frozen=True, eq=False)
class ClusterRep:
    mean: np.ndarray
    weight: int
    members: tuple[SegmentId, ...] = ()


@dataclass(frozen=True)
class MatchConfig:
    distance_threshold: float = DEFAULT_TAU
    min_anchor_frames: int = DEFAULT_MIN_ANCHOR_FRAMES

    def __post_init__(self):
        if not 0.0 < self.distance_threshold <= 2.0:
            raise ValueError("distance_threshold must lie in (0, 2]")
        if self.min_anchor_frames < 1:
            raise ValueError("min_anchor_frames must be at least 1")


@dataclass(frozen=True, eq=False)
class Participant:
    participant_id: int
    segments: tuple[TrackSegment, ...]
    rep: ClusterRep
    presence_s: float

    @property
    def segment_ids(self) -> list[SegmentId]:
        return sorted(s.segment_id for s in self.segments)


@dataclass(frozen=True)
class MergeEvent:
    """One greedy decision, recorded for auditing."""

    segment_id: SegmentId
    participant_id: int
    distance: Optional[float]
    kind: str  # "seed", "merge", "new", "attach"


def segment_scenes(stream: FrameStream) -> list[Scene]:
    scenes: list[Scene] = []
    current = None
    start = end = count = 0
    for frame in stream.frames:
        ids = frame.track_ids
        if current is None or ids != current:
            if current is not None:
                scenes.append(Scene(len(scenes), start, end, current, count))
            current, start, count = ids, frame.index, 0
        end = frame.index
        count += 1
    if current is not None:
        scenes.append(Scene(len(scenes), start, end, current, count))
    return scenes


def build_segments(stream: FrameStream, scenes: Sequence[Scene]) -> list[TrackSegment]:
    """One segment per (scene, track); embeddings come from gated ``faces_by_track``."""
    dim = stream.header.embedding_dim
    out = []
    pos = 0
    frames = stream.frames
    for scene in scenes:
        tracks = sorted(scene.track_ids)
        fr = {t: [] for t in tracks}
        bx = {t: [] for t in tracks}
        em = {t: [] for t in tracks}
        for frame in frames[pos:pos + scene.frame_count]:
            for p in frame.persons:
                fr[p.track_id].append(frame.index)
                bx[p.track_id].append(p.box)
                face = frame.faces_by_track.get(p.track_id)
                if face is not None and face.embedding is not None:
                    em[p.track_id].append(face.embedding)
        pos += scene.frame_count
        for t in tracks:
            emb = np.vstack(em[t]) if em[t] else np.empty((0, dim))
            out.append(TrackSegment(scene.scene_id, t, tuple(fr[t]), tuple(bx[t]), emb))
    return out


def aggregate(segment: TrackSegment) -> Optional[ClusterRep]:
    """Mean face embedding of a segment, re-normalized; None when it has no faces.

    Raises ``DegenerateMean`` when the embeddings cancel out.
    """
    n = segment.face_frames
    if n == 0:
        return None
    mean = segment.embeddings.sum(axis=0) / n
    norm = float(np.linalg.norm(mean))
    if norm < 1e-9:
        raise DegenerateMean(f"segment {segment.segment_id} has a zero mean embedding")
    return ClusterRep(mean / norm, n, (segment.segment_id,))


def distance(a: ClusterRep, b: ClusterRep) -> float:
    """Cosine distance between two representatives, clipped to [0, 2]."""
    return float(min(2.0, max(0.0, 1.0 - float(np.dot(a.mean, b.mean)))))


class _Pool:
    """Mutable participant state used only while matching."""

    def __init__(self, dim: int):
        self.means = np.empty((0, dim))
        self.weights: list[int] = []
        self.members: list[list[TrackSegment]] = []
        self.scenes: list[set[int]] = []

    def __len__(self):
        return len(self.weights)

    def open(self, seg: TrackSegment, rep: ClusterRep) -> int:
        self.means = np.vstack([self.means, rep.mean[None, :]])
        self.weights.append(rep.weight)
        self.members.append([seg])
        self.scenes.append({seg.scene_id})
        return len(self.weights) - 1

    def add(self, pid: int, seg: TrackSegment, rep: Optional[ClusterRep], n_faces: int = 0):
        if rep is not None:
            w = self.weights[pid]
            self.means[pid] = normalize(w * self.means[pid] + rep.weight * rep.mean, eps=0.0)
            self.weights[pid] = w + rep.weight
        else:
            # faceless or degenerate: weight still counts every face seen
            self.weights[pid] += n_faces
        self.members[pid].append(seg)
        self.scenes[pid].add(seg.scene_id)


def match_scenes(segments: Sequence[TrackSegment], scenes: Sequence[Scene],
                 cfg: MatchConfig = MatchConfig(), fps: float = 2.0,
                 log: Optional[list] = None) -> list[Participant]:
    """Greedy cross-scene matching of track segments into participants.

    Scenes are visited longest first (earlier scene on ties), segments within a
    scene by face count (lower track id on ties). A segment with at least
    ``min_anchor_frames`` faces joins its nearest participant when the cosine
    distance is below the threshold and that participant is not already present in
    the scene; otherwise it opens a new participant. Smaller, faceless or
    degenerate segments are attached afterwards to a participant that holds the
    same upstream track in an adjacent scene, or dropped.
    """
    if not segments:
        return []
    dim = segments[0].embeddings.shape[1]
    tau = cfg.distance_threshold
    by_scene: dict[int, list[TrackSegment]] = {}
    for seg in segments:
        by_scene.setdefault(seg.scene_id, []).append(seg)
    order = sorted(scenes, key=lambda s: (-s.frame_count, s.scene_id))

    pool = _Pool(dim)
    reps: dict[SegmentId, Optional[ClusterRep]] = {}
    assigned: dict[SegmentId, int] = {}
    pending: list[TrackSegment] = []

    def note(seg, pid, d, kind):
        if log is not None:
            log.append(MergeEvent(seg.segment_id, pid, d, kind))

    for scene in order:
        for seg in sorted(by_scene.get(scene.scene_id, ()), key=lambda s: (-s.face_frames, s.track_id)):
            try:
                rep = aggregate(seg)
            except DegenerateMean:
                logger.debug("segment %s has a degenerate mean", seg.segment_id)
                rep = None
            reps[seg.segment_id] = rep
            if rep is None or seg.face_frames < cfg.min_anchor_frames:
                pending.append(seg)
                continue
            if len(pool):
                dists = 1.0 - pool.means @ rep.mean
                best = int(np.argmin(dists))
                d = float(dists[best])
                if d < tau and seg.scene_id not in pool.scenes[best]:
                    pool.add(best, seg, rep)
                    assigned[seg.segment_id] = best
                    note(seg, best, d, "merge")
                    continue
                pid = pool.open(seg, rep)
                note(seg, pid, d, "new")
            else:
                pid = pool.open(seg, rep)
                note(seg, pid, None, "seed")
            assigned[seg.segment_id] = pid

    _attach_pending(pending, reps, assigned, pool, note)

    participants = []
    for pid in range(len(pool)):
        members = tuple(pool.members[pid])
        rep = ClusterRep(pool.means[pid].copy(), pool.weights[pid], tuple(sorted(s.segment_id for s in members)))
        frames = set()
        for s in members:
            frames.update(s.frames)
        participants.append(Participant(pid, members, rep, len(frames) / fps))
    return participants


def _attach_pending(pending, reps, assigned, pool, note):
    seg_by_id = {s.segment_id: s for s in pending}
    remaining = sorted(pending, key=lambda s: s.segment_id)
    changed = True
    while changed and remaining:
        changed = False
        still = []
        for seg in remaining:
            sid, tid = seg.segment_id
            options = []
            for nb in (sid - 1, sid + 1):
                pid = assigned.get((nb, tid))
                if pid is None or sid in pool.scenes[pid]:
                    continue
                nb_faces = _faces_of(pool, pid, (nb, tid), seg_by_id)
                options.append((-nb_faces, nb, pid))
            if not options:
                still.append(seg)
                continue
            _, _, pid = min(options)
            pool.add(pid, seg, reps.get(seg.segment_id), seg.face_frames)
            assigned[seg.segment_id] = pid
            note(seg, pid, None, "attach")
            changed = True
        remaining = still


def _faces_of(pool, pid, segment_id, seg_by_id) -> int:
    if segment_id in seg_by_id:
        return seg_by_id[segment_id].face_frames
    for s in pool.members[pid]:
        if s.segment_id == segment_id:
            return s.face_frames
    return 0


def presence_seconds(p: Participant, fps: float) -> float:
    frames = set()
    for s in p.segments:
        frames.update(s.frames)
    return len(frames) / fps


def count_participants(ps: Iterable[Participant], t_min: float = DEFAULT_T_MIN, fps: float = 2.0) -> int:
    # inclusive boundary: exactly t_min counts
    return sum(1 for p in ps if presence_seconds(p, fps) >= t_min)


@dataclass
class TrackResult:
    meeting_id: str
    participants: list[Participant]
    scenes: list[Scene]
    segments: list[TrackSegment]
    k_filtered: int
    k_unfiltered: int
    config: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "meeting_id": self.meeting_id,
            "participants": [
                {
                    "id": p.participant_id,
                    "presence_s": p.presence_s,
                    "segments": [list(s) for s in p.segment_ids],
                    "rep_weight": p.rep.weight,
                }
                for p in self.participants
            ],
            "k_filtered": self.k_filtered,
            "k_unfiltered": self.k_unfiltered,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"


def track_stream(stream: FrameStream, match_cfg: MatchConfig = MatchConfig(),
                 gate_cfg: GateConfig = GateConfig(), t_min: float = DEFAULT_T_MIN,
                 gated: bool = False) -> TrackResult:
    """Full pipeline on one detection log: gate, segment, aggregate, match, count."""
    if not gated:
        stream = FrameStream(stream.header, tuple(gate_frame(f, gate_cfg) for f in stream.frames))
    fps = stream.fps
    scenes = segment_scenes(stream)
    segments = build_segments(stream, scenes)
    log: list = []
    participants = match_scenes(segments, scenes, match_cfg, fps=fps, log=log)
    k_filtered = count_participants(participants, t_min, fps)
    if segments and not any(s.face_frames for s in segments):
        logger.warning("%s: no track carries a usable face; nothing to count", stream.header.meeting_id)
    config = {
        "tau": match_cfg.distance_threshold,
        "min_anchor_frames": match_cfg.min_anchor_frames,
        "min_face_px": [gate_cfg.min_face_w, gate_cfg.min_face_h],
        "containment_frac": gate_cfg.containment_frac,
        "t_min": t_min,
        "fps": fps,
    }
    return TrackResult(stream.header.meeting_id, participants, scenes, segments,
                       k_filtered, len(participants), config, log)
