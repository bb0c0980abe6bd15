"""Synthetic gallery-view meetings with ground-truth identities.

The simulator emits what an upstream person tracker plus face detector/embedder
would log, not pixels. Participants join, leave, toggle cameras, reconnect and
switch devices; every change of the visible roster recomputes the grid layout
(a "reshuffle"). A separate noise pass then imitates the way motion-based
trackers break at reshuffles: fragmented ids, swapped ids and merged ids, plus
dropped, undersized and duplicate faces.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .core import BBox, DetectionFrame, FaceDetection, PersonDetection
from .errors import ConfigError, ConfigUnresolvable
from .facegate import MIN_FACE_PX
from .ingest import FrameStream, StreamHeader

K_RANGE = (2, 11)
DURATION_RANGE_S = (438.0, 3386.0)  # 7:18 to 56:26


@dataclass(frozen=True)
class EventRates:
    """Poisson rates per minute. ``join`` applies to late joiners, the rest per present participant."""

    join: float = 0.15
    leave: float = 0.02
    camera_toggle: float = 0.05
    rejoin: float = 0.02
    device_switch: float = 0.01
    start_present_prob: float = 0.6
    camera_off_mean_s: float = 30.0
    away_mean_s: float = 20.0
    min_dwell_s: float = 10.0

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"event_rates.{f.name}", "must be non-negative")
        if self.start_present_prob > 1:
            raise ConfigError("event_rates.start_present_prob", "must lie in [0, 1]")
        if self.min_dwell_s <= 0:
            raise ConfigError("event_rates.min_dwell_s", "must be positive")

    @classmethod
    def static(cls) -> "EventRates":
        """Everyone present from the start, nothing ever changes."""
        return cls(join=0.0, leave=0.0, camera_toggle=0.0, rejoin=0.0, device_switch=0.0, start_present_prob=1.0)


@dataclass(frozen=True)
class NoiseConfig:
    fragment_prob_on_reshuffle: float = 0.0
    id_switch_prob_on_reshuffle: float = 0.0
    merge_prob: float = 0.0
    face_dropout_prob: float = 0.0
    small_face_prob: float = 0.0
    duplicate_face_prob: float = 0.0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"noise.{f.name}", "probability must lie in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return all(getattr(self, f.name) == 0.0 for f in fields(self))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"noise.{sorted(extra)[0]}", "unknown noise field")
        return cls(**{k: float(v) for k, v in d.items()})


# Baseline (distinct upstream ids >= 120 s) lands at MAE ~4-6 on default-shaped batches;
# see tests/test_acceptance.py for the batch this was tuned on.
DEFAULT_NOISE = NoiseConfig(
    fragment_prob_on_reshuffle=0.06,
    id_switch_prob_on_reshuffle=0.1,
    merge_prob=0.01,
    face_dropout_prob=0.1,
    small_face_prob=0.05,
    duplicate_face_prob=0.02,
)


@dataclass(frozen=True)
class SimConfig:
    k_participants: int = 5
    duration_s: float = 1530.0
    sampling_rate_fps: float = 2.0
    source_fps: float = 30.0
    canvas: tuple[int, int] = (1280, 720)
    embedding_dim: int = 128
    event_rates: EventRates = field(default_factory=EventRates)
    shared_feed_prob: float = 0.05
    embedding_sigma: float = 0.03
    noise: NoiseConfig = DEFAULT_NOISE
    seed: int = 0
    t_min: float = 120.0
    meeting_id: str = "meeting_000"

    def validate(self):
        lo, hi = K_RANGE
        if isinstance(self.k_participants, bool) or not isinstance(self.k_participants, int) \
                or not lo <= self.k_participants <= hi:
            raise ConfigError("k_participants", f"must be an integer in [{lo}, {hi}]")
        if not self.duration_s > 0:
            raise ConfigError("duration_s", "must be positive")
        if not 0 < self.sampling_rate_fps <= self.source_fps:
            raise ConfigError("sampling_rate_fps", "must be positive and not exceed source_fps")
        if self.canvas[0] <= 0 or self.canvas[1] <= 0:
            raise ConfigError("canvas", "must be positive")
        if self.embedding_dim <= 0:
            raise ConfigError("embedding_dim", "must be positive")
        if not 0.0 <= self.shared_feed_prob <= 1.0:
            raise ConfigError("shared_feed_prob", "must lie in [0, 1]")
        if self.embedding_sigma < 0:
            raise ConfigError("embedding_sigma", "must be non-negative")
        if self.t_min < 0:
            raise ConfigError("t_min", "must be non-negative")
        self.event_rates.validate()
        self.noise.validate()
        check_resolvable(self.embedding_sigma, self.embedding_dim)

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration_s * self.sampling_rate_fps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown simulator field")
        if "event_rates" in d:
            try:
                d["event_rates"] = EventRates(**d["event_rates"])
            except TypeError as exc:
                raise ConfigError("event_rates", str(exc)) from None
        if "noise" in d:
            d["noise"] = NoiseConfig.from_dict(d["noise"])
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        return cls(**d)


def check_resolvable(sigma: float, dim: int):
    """Reject embedding noise so wide that identities cannot be told apart.

    A sample sits about atan(sigma * sqrt(dim)) radians from its identity's mean,
    while two random identities on a high-dimensional sphere are about pi/2 apart.
    Three spreads must fit inside that separation.
    """
    spread = math.atan(sigma * math.sqrt(dim))
    if 3.0 * spread >= math.pi / 2:
        raise ConfigUnresolvable(
            "embedding_sigma",
            f"sigma={sigma} gives angular spread {spread:.3f} rad; three spreads exceed the pi/2 identity separation",
        )


@dataclass
class GroundTruth:
    """Per-detection identity labels plus presence bookkeeping.

    ``labels[i]`` maps track id -> identity for the i-th emitted frame;
    ``faces_ok[i]`` holds the track ids whose logged face would pass the face gate.
    """

    meeting_id: str
    fps: float
    duration_s: float
    t_min: float
    labels: list[dict[int, int]]
    faces_ok: list[frozenset[int]]
    presence_s: list[float]
    reshuffle_frames: list[int]
    frame_indices: list[int] = field(default_factory=list)

    @property
    def k_gt(self) -> int:
        return sum(1 for p in self.presence_s if p >= self.t_min)

    @property
    def n_identities(self) -> int:
        return len(self.presence_s)

    def records(self):
        for idx, labels, ok in zip(self.frame_indices, self.labels, self.faces_ok):
            for tid in sorted(labels):
                yield {"type": "label", "frame": idx, "track_id": tid, "identity": labels[tid], "face": tid in ok}
        yield {
            "type": "summary",
            "meeting_id": self.meeting_id,
            "fps": self.fps,
            "duration_s": self.duration_s,
            "t_min": self.t_min,
            "k_gt": self.k_gt,
            "presence_s": self.presence_s,
            "reshuffle_frames": self.reshuffle_frames,
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records())

    @classmethod
    def from_jsonl(cls, text_or_lines) -> "GroundTruth":
        lines = text_or_lines.splitlines() if isinstance(text_or_lines, str) else text_or_lines
        per_frame: dict[int, dict[int, int]] = {}
        ok: dict[int, set[int]] = {}
        summary = None
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") == "summary":
                summary = rec
                continue
            per_frame.setdefault(rec["frame"], {})[rec["track_id"]] = rec["identity"]
            bucket = ok.setdefault(rec["frame"], set())
            if rec.get("face"):
                bucket.add(rec["track_id"])
        if summary is None:
            raise ValueError("ground truth has no summary record")
        frames = sorted(per_frame)
        return cls(
            meeting_id=summary["meeting_id"],
            fps=summary["fps"],
            duration_s=summary["duration_s"],
            t_min=summary["t_min"],
            labels=[per_frame[f] for f in frames],
            faces_ok=[frozenset(ok[f]) for f in frames],
            presence_s=list(summary["presence_s"]),
            reshuffle_frames=list(summary["reshuffle_frames"]),
            frame_indices=frames,
        )


def layout_grid(n_visible: int, canvas: tuple[int, int]) -> list[BBox]:
    """Near-square gallery grid, row-major: ceil(sqrt(n)) columns."""
    if n_visible <= 0:
        return []
    cols = math.ceil(math.sqrt(n_visible))
    rows = math.ceil(n_visible / cols)
    cw, ch = canvas[0] // cols, canvas[1] // rows
    return [BBox((i % cols) * cw, (i // cols) * ch, cw, ch) for i in range(n_visible)]


@dataclass(frozen=True)
class Feed:
    """One video tile: one identity, or two sharing a camera."""

    identities: tuple[int, ...]
    start: int  # first visible frame
    end: int  # exclusive
    order: int


def schedule_feeds(cfg: SimConfig, rng: np.random.Generator) -> list[Feed]:
    """Draw join/leave/camera/reconnect/device events and return the resulting feeds."""
    r = cfg.event_rates
    fps = cfg.sampling_rate_fps
    total_s = cfg.n_frames / fps
    units: list[tuple[int, ...]] = []
    i = 0
    while i < cfg.k_participants:
        if i + 1 < cfg.k_participants and rng.random() < cfg.shared_feed_prob:
            units.append((i, i + 1))
            i += 2
        else:
            units.append((i,))
            i += 1

    per_min = r.leave + r.camera_toggle + r.rejoin + r.device_switch
    feeds = []
    for unit in units:
        if rng.random() < r.start_present_prob or r.join == 0:
            t = 0.0
        else:
            t = rng.exponential(60.0 / r.join)
        while t < total_s:
            hold = rng.exponential(60.0 / per_min) if per_min > 0 else math.inf
            t_end = min(t + max(r.min_dwell_s, hold), total_s)
            feeds.append((t, t_end, unit))
            if t_end >= total_s:
                break
            u = rng.random() * per_min
            if u < r.leave:
                break
            if u < r.leave + r.camera_toggle:
                t = t_end + max(r.min_dwell_s, rng.exponential(r.camera_off_mean_s))
            elif u < r.leave + r.camera_toggle + r.rejoin:
                t = t_end + max(r.min_dwell_s, rng.exponential(r.away_mean_s))
            else:
                t = t_end  # device switch: a new tile replaces the old one at once
    out = []
    for n, (t0, t1, unit) in enumerate(feeds):
        start, end = int(math.floor(t0 * fps)), int(math.floor(t1 * fps))
        if end > start:
            out.append((start, n, unit, end))
    out.sort()
    return [Feed(unit, start, end, order) for order, (start, _, unit, end) in enumerate(out)]


def _person_boxes(cell: BBox, n: int) -> list[BBox]:
    boxes = []
    sub_w = cell.w // n
    for j in range(n):
        mx, my = max(2, sub_w // 10), max(2, cell.h // 12)
        boxes.append(BBox(cell.x + j * sub_w + mx, cell.y + my, max(1, sub_w - 2 * mx), max(1, cell.h - 2 * my)))
    return boxes


def _face_box(person: BBox) -> BBox:
    s = max(1, int(round(0.45 * min(person.w, person.h))))
    return BBox(person.x + (person.w - s) // 2, person.y + max(1, person.h // 10), s, s)


def _jitter(box: BBox, dx: int, dy: int) -> BBox:
    return BBox(box.x + dx, box.y + dy, box.w, box.h)


def generate_clean(cfg: SimConfig) -> tuple[FrameStream, GroundTruth]:
    """Noise-free stream: one stable track id (identity + 1) per identity."""
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    sched_rng, mu_rng, emb_rng, jit_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    feeds = schedule_feeds(cfg, sched_rng)
    k, dim, fps = cfg.k_participants, cfg.embedding_dim, cfg.sampling_rate_fps
    mus = mu_rng.standard_normal((k, dim))
    mus /= np.linalg.norm(mus, axis=1, keepdims=True)

    n_frames = cfg.n_frames
    bounds = sorted({0, n_frames} | {f.start for f in feeds} | {f.end for f in feeds})
    frames: list[DetectionFrame] = []
    labels: list[dict[int, int]] = []
    faces_ok: list[frozenset[int]] = []
    visible_frames = [0] * k
    reshuffles = []
    prev_roster = None
    for b0, b1 in zip(bounds, bounds[1:]):
        if b0 >= n_frames:
            break
        roster = [f for f in feeds if f.start <= b0 < f.end]
        key = tuple(f.order for f in roster)
        if prev_roster is not None and key != prev_roster:
            reshuffles.append(b0)
        prev_roster = key
        cells = layout_grid(len(roster), cfg.canvas)
        slots = []  # (identity, person box, face box)
        for feed, cell in zip(roster, cells):
            for ident, pbox in zip(feed.identities, _person_boxes(cell, len(feed.identities))):
                slots.append((ident, pbox, _face_box(pbox)))
        slots.sort(key=lambda s: s[0])
        n = b1 - b0
        ids = np.array([s[0] for s in slots], dtype=int)
        for ident in ids:
            visible_frames[ident] += n
        if len(slots):
            emb = mus[ids][None, :, :] + cfg.embedding_sigma * emb_rng.standard_normal((n, len(slots), dim))
            emb /= np.linalg.norm(emb, axis=2, keepdims=True)
            emb.setflags(write=False)
            jit = jit_rng.integers(-2, 3, size=(n, len(slots), 2))
        for t in range(n):
            persons, faces, lab = [], [], {}
            for j, (ident, pbox, fbox) in enumerate(slots):
                dx, dy = int(jit[t, j, 0]), int(jit[t, j, 1])
                tid = int(ident) + 1
                persons.append(PersonDetection(tid, _jitter(pbox, dx, dy)))
                faces.append(FaceDetection(_jitter(fbox, dx, dy), emb[t, j], tid))
                lab[tid] = int(ident)
            frames.append(DetectionFrame(b0 + t, tuple(persons), tuple(faces)))
            labels.append(lab)
            faces_ok.append(frozenset(lab))
    header = StreamHeader(cfg.meeting_id, cfg.source_fps, fps, tuple(cfg.canvas), dim)
    gt = GroundTruth(
        meeting_id=cfg.meeting_id,
        fps=fps,
        duration_s=float(cfg.duration_s),
        t_min=cfg.t_min,
        labels=labels,
        faces_ok=faces_ok,
        presence_s=[v / fps for v in visible_frames],
        reshuffle_frames=reshuffles,
        frame_indices=[f.index for f in frames],
    )
    return FrameStream(header, tuple(frames)), gt


def apply_tracker_noise(clean: FrameStream, gt: GroundTruth, noise: NoiseConfig,
                        seed) -> tuple[FrameStream, GroundTruth]:
    """Imitate motion-tracker failures keyed to grid reshuffles.

    At each reshuffle every visible track independently gets a fresh id with
    ``fragment_prob_on_reshuffle``; visible tracks are randomly paired and each pair
    swaps ids with ``id_switch_prob_on_reshuffle``; with ``merge_prob`` two visible
    identities share one id until the next roster change (only one of them is
    emitted per frame). Faces are then dropped, shrunk below the minimum size, or
    joined by a smaller duplicate. Identity labels are carried along unchanged.
    """
    noise.validate()
    if noise.is_zero:
        return clean, gt
    rng = np.random.default_rng(seed)
    dim = clean.header.embedding_dim
    reshuffles = set(gt.reshuffle_frames)
    next_id = 1 + max((p.track_id for f in clean.frames for p in f.persons), default=0)
    id_of: dict[int, int] = {}
    merge: Optional[tuple[int, int]] = None
    frames, labels, faces_ok = [], [], []
    small_side = max(1, MIN_FACE_PX - 8)

    for frame, lab in zip(clean.frames, gt.labels):
        by_ident = {lab[p.track_id]: p for p in frame.persons}
        visible = sorted(by_ident)
        for ident in visible:
            id_of.setdefault(ident, by_ident[ident].track_id)
        if frame.index in reshuffles:
            merge = None
            if noise.fragment_prob_on_reshuffle > 0:
                for ident, u in zip(visible, rng.random(len(visible))):
                    if u < noise.fragment_prob_on_reshuffle:
                        id_of[ident] = next_id
                        next_id += 1
            if noise.id_switch_prob_on_reshuffle > 0 and len(visible) >= 2:
                perm = rng.permutation(visible)
                for a, b in zip(perm[0::2], perm[1::2]):
                    if rng.random() < noise.id_switch_prob_on_reshuffle:
                        id_of[int(a)], id_of[int(b)] = id_of[int(b)], id_of[int(a)]
            if noise.merge_prob > 0 and len(visible) >= 2 and rng.random() < noise.merge_prob:
                a, b = rng.choice(visible, size=2, replace=False)
                merge = (int(a), int(b))

        emit = {ident: id_of[ident] for ident in visible}
        if merge is not None and merge[0] in emit and merge[1] in emit:
            a, b = merge
            shared = id_of[a]
            keep, drop = (a, b) if rng.random() < 0.5 else (b, a)
            del emit[drop]
            emit[keep] = shared

        clean_faces = {f.track_id: f for f in frame.faces}
        persons, faces, new_lab, ok = [], [], {}, set()
        for p in frame.persons:
            ident = lab[p.track_id]
            if ident not in emit:
                continue
            tid = emit[ident]
            persons.append(PersonDetection(tid, p.box))
            new_lab[tid] = ident
            face = clean_faces.get(p.track_id)
            if face is None:
                continue
            u = rng.random(4)
            if u[0] < noise.face_dropout_prob:
                continue
            if u[1] < noise.small_face_prob:
                b = face.box
                side = min(small_side, b.w, b.h)
                faces.append(FaceDetection(BBox(b.x + (b.w - side) // 2, b.y + (b.h - side) // 2, side, side),
                                           face.embedding, tid))
                continue
            faces.append(FaceDetection(face.box, face.embedding, tid))
            ok.add(tid)
            if u[2] < noise.duplicate_face_prob:
                dup = _duplicate_face(p.box, face.box, rng, dim)
                if dup is not None:
                    faces.append(dup)
        frames.append(DetectionFrame(frame.index, tuple(persons), tuple(faces)))
        labels.append(new_lab)
        faces_ok.append(frozenset(ok))

    stream = FrameStream(clean.header, tuple(frames))
    return stream, replace(gt, labels=labels, faces_ok=faces_ok)


def _duplicate_face(person: BBox, face: BBox, rng: np.random.Generator, dim: int) -> Optional[FaceDetection]:
    # a smaller background face inside the same person box; unlogged track id
    side = max(MIN_FACE_PX, int(0.8 * min(face.w, face.h)))
    if side * side >= face.w * face.h or side > person.w or side > person.h:
        return None
    x = person.x + person.w - side
    y = person.y + person.h - side
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return FaceDetection(BBox(x, y, side, side), v, None)


def generate(cfg: SimConfig) -> tuple[FrameStream, GroundTruth]:
    """Noisy stream and ground truth for one meeting; deterministic in ``cfg.seed``."""
    clean, gt = generate_clean(cfg)
    noise_seed = np.random.SeedSequence([cfg.seed, 0x6E6F697365])
    return apply_tracker_noise(clean, gt, cfg.noise, noise_seed)


def meeting_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def sample_batch(n_meetings: int, master_seed: int, base: Optional[SimConfig] = None,
                 k: Optional[int] = None, duration_s: Optional[float] = None,
                 duration_dist: str = "uniform") -> list[SimConfig]:
    """Per-meeting configs shaped like the reference dataset.

    K is uniform on the integers [2, 11]; durations are uniform (or log-uniform) on
    [438, 3386] s unless fixed. Each meeting draws from its own seed so meeting i is
    the same whatever the batch size.
    """
    if duration_dist not in ("uniform", "loguniform"):
        raise ConfigError("duration_dist", "must be 'uniform' or 'loguniform'")
    base = base or SimConfig()
    out = []
    lo, hi = DURATION_RANGE_S
    for i in range(n_meetings):
        seed = meeting_seed(master_seed, i)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        kk = int(rng.integers(K_RANGE[0], K_RANGE[1] + 1))
        if duration_dist == "uniform":
            dur = float(rng.uniform(lo, hi))
        else:
            dur = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        out.append(replace(
            base,
            k_participants=kk if k is None else k,
            duration_s=round(dur, 1) if duration_s is None else duration_s,
            seed=seed,
            meeting_id=f"meeting_{i:03d}",
        ))
    return out
