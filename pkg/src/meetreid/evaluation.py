"""K-MAE evaluation against ground truth, with the upstream-id baseline."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyInput
from .ingest import FrameStream
from .sim import GroundTruth

CSV_COLUMNS = [
    "meeting_id", "duration_s", "k_gt", "k_pred", "k_baseline",
    "abs_err_pipeline", "abs_err_baseline", "tracks_all", "tracks_filtered",
    "identity_accuracy",
]


@dataclass(frozen=True)
class MeetingResult:
    meeting_id: str
    k_gt: int
    k_pred: int
    k_baseline: int
    duration_s: float
    tracks_unfiltered: int
    tracks_filtered: int
    identity_accuracy: Optional[float] = None  # beyond-K diagnostic, simulator only

    def __post_init__(self):
        if min(self.k_gt, self.k_pred, self.k_baseline, self.tracks_unfiltered, self.tracks_filtered) < 0:
            raise ValueError("counts must be non-negative")
        if self.tracks_filtered > self.tracks_unfiltered:
            raise ValueError("filtered track count exceeds unfiltered count")

    @property
    def abs_err_pipeline(self) -> int:
        return abs(self.k_pred - self.k_gt)

    @property
    def abs_err_baseline(self) -> int:
        return abs(self.k_baseline - self.k_gt)


@dataclass
class Report:
    rows: list[MeetingResult]
    overall: dict[str, float]
    by_k: dict[int, dict[str, float]]
    by_duration: dict[str, dict[str, float]]
    identity_accuracy: Optional[float] = None

    def summary(self) -> dict:
        out = {
            "meetings": len(self.rows),
            "overall_mae": self.overall,
            "mae_by_k": {str(k): v for k, v in self.by_k.items()},
            "mae_by_duration": self.by_duration,
            "mean_tracks": {
                "all": float(np.mean([r.tracks_unfiltered for r in self.rows])),
                "filtered": float(np.mean([r.tracks_filtered for r in self.rows])),
            },
        }
        if self.identity_accuracy is not None:
            out["identity_accuracy"] = self.identity_accuracy
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.meeting_id, f"{r.duration_s:.1f}", r.k_gt, r.k_pred, r.k_baseline,
                r.abs_err_pipeline, r.abs_err_baseline, r.tracks_unfiltered, r.tracks_filtered,
                "" if r.identity_accuracy is None else f"{r.identity_accuracy:.6f}",
            ])
        return buf.getvalue()


def track_presence(stream: FrameStream) -> Counter:
    """Frames per upstream track id."""
    c = Counter()
    for f in stream.frames:
        c.update(p.track_id for p in f.persons)
    return c


def baseline_count(stream: FrameStream, t_min: float = 120.0, fps: Optional[float] = None) -> int:
    """Distinct upstream ids whose presence reaches ``t_min`` seconds."""
    fps = stream.fps if fps is None else fps
    return sum(1 for n in track_presence(stream).values() if n / fps >= t_min)


def mae(pairs: Iterable[tuple[float, float]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("mae needs at least one (pred, gt) pair")
    return sum(abs(p - g) for p, g in pairs) / len(pairs)


def duration_bucket(duration_s: float, width_s: float = 300.0) -> str:
    """'<=10min' for anything under 10 minutes, then 5-minute bins."""
    if duration_s < 600.0:
        return "<=10min"
    lo = 600.0 + width_s * int((duration_s - 600.0) // width_s)
    return f"{int(lo // 60)}-{int((lo + width_s) // 60)}min"


def _bucket_order(label: str) -> int:
    return 0 if label.startswith("<=") else int(label.split("-")[0])


def bucket_by_duration(results: Sequence[MeetingResult], width_s: float = 300.0,
                       method: str = "pipeline") -> dict[str, float]:
    groups: dict[str, list] = defaultdict(list)
    for r in results:
        pred = r.k_pred if method == "pipeline" else r.k_baseline
        groups[duration_bucket(r.duration_s, width_s)].append((pred, r.k_gt))
    return {b: mae(groups[b]) for b in sorted(groups, key=_bucket_order)}


def build_report(results: Sequence[MeetingResult]) -> Report:
    results = list(results)
    if not results:
        raise EmptyInput("no meeting results to report")
    overall = {
        "pipeline": mae((r.k_pred, r.k_gt) for r in results),
        "baseline": mae((r.k_baseline, r.k_gt) for r in results),
    }
    by_k = {}
    for k in sorted({r.k_gt for r in results}):
        rows = [r for r in results if r.k_gt == k]
        by_k[k] = {
            "n": len(rows),
            "pipeline": mae((r.k_pred, r.k_gt) for r in rows),
            "baseline": mae((r.k_baseline, r.k_gt) for r in rows),
        }
    pipe = bucket_by_duration(results, method="pipeline")
    base = bucket_by_duration(results, method="baseline")
    counts = Counter(duration_bucket(r.duration_s) for r in results)
    by_duration = {b: {"n": counts[b], "pipeline": pipe[b], "baseline": base[b]} for b in pipe}
    accs = [(r.identity_accuracy, r) for r in results if r.identity_accuracy is not None]
    acc = float(np.mean([a for a, _ in accs])) if accs else None
    return Report(results, overall, by_k, by_duration, acc)


def identity_accuracy(segment_owner: dict[tuple[int, int], int], scene_of_frame: Sequence[int],
                      gt: GroundTruth) -> float:
    """Share of detections whose participant is matched one-to-one to their true identity.

    Participants and identities are paired by maximum overlap (Hungarian); a detection
    counts as correct only if its participant is paired with its own identity.
    Detections in dropped segments count as wrong.
    """
    overlap: Counter = Counter()
    total = 0
    for labels, scene_id in zip(gt.labels, scene_of_frame):
        for tid, ident in labels.items():
            total += 1
            pid = segment_owner.get((scene_id, tid))
            if pid is not None:
                overlap[(pid, ident)] += 1
    if total == 0:
        return 1.0
    if not overlap:
        return 0.0
    pids = sorted({p for p, _ in overlap})
    idents = sorted({i for _, i in overlap})
    m = np.zeros((len(pids), len(idents)))
    for (p, i), n in overlap.items():
        m[pids.index(p), idents.index(i)] = n
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum() / total)


def evaluate_meeting(stream: FrameStream, gt: GroundTruth, k_pred: int,
                     segment_owner: Optional[dict] = None, scenes=None, t_min: Optional[float] = None) -> MeetingResult:
    t_min = gt.t_min if t_min is None else t_min
    presence = track_presence(stream)
    fps = stream.fps
    acc = None
    if segment_owner is not None and scenes is not None:
        scene_of_frame = []
        for s in scenes:
            scene_of_frame.extend([s.scene_id] * s.frame_count)
        acc = identity_accuracy(segment_owner, scene_of_frame, gt)
    filtered = sum(1 for n in presence.values() if n / fps >= t_min)
    return MeetingResult(
        meeting_id=stream.header.meeting_id,
        k_gt=sum(1 for p in gt.presence_s if p >= t_min),
        k_pred=k_pred,
        k_baseline=filtered,
        duration_s=gt.duration_s,
        tracks_unfiltered=len(presence),
        tracks_filtered=filtered,
        identity_accuracy=acc,
    )
