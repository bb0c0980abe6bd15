"""In-memory batch runs: simulate, track and score without touching disk."""
from __future__ import annotations

from typing import Optional, Sequence

from .evaluation import MeetingResult, Report, build_report, evaluate_meeting
from .facegate import GateConfig
from .sim import SimConfig, generate
from .tracker import MatchConfig, TrackResult, track_stream


def segment_owner(result: TrackResult) -> dict[tuple[int, int], int]:
    return {s.segment_id: p.participant_id for p in result.participants for s in p.segments}


def run_meeting(cfg: SimConfig, match_cfg: MatchConfig = MatchConfig(),
                gate_cfg: GateConfig = GateConfig(), t_min: Optional[float] = None) -> MeetingResult:
    t_min = cfg.t_min if t_min is None else t_min
    stream, gt = generate(cfg)
    result = track_stream(stream, match_cfg, gate_cfg, t_min)
    return evaluate_meeting(stream, gt, result.k_filtered, segment_owner(result), result.scenes, t_min)


def run_batch(configs: Sequence[SimConfig], match_cfg: MatchConfig = MatchConfig(),
              gate_cfg: GateConfig = GateConfig(), t_min: Optional[float] = None) -> Report:
    return build_report([run_meeting(c, match_cfg, gate_cfg, t_min) for c in configs])
