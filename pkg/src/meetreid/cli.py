"""Command-line entry point: simulate, track, eval, pipeline, calibrate.

Exit codes: 0 ok, 2 configuration error, 3 invalid detection log, 4 inputs that do
not line up (missing or mismatched meetings).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, StreamError
from .evaluation import build_report, evaluate_meeting
from .facegate import GateConfig, gate_frame
from .ingest import FrameStream, errors_only, parse_stream, validate_stream, write_stream
from .sim import DEFAULT_NOISE, GroundTruth, NoiseConfig, SimConfig, generate, sample_batch
from .tracker import (DEFAULT_MIN_ANCHOR_FRAMES, DEFAULT_T_MIN, DEFAULT_TAU, MatchConfig,
                      build_segments, count_participants, match_scenes, segment_scenes, track_stream)

logger = logging.getLogger("meetreid")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_MISMATCH = 0, 2, 3, 4

DEFAULTS = {
    "seed": None,
    "k": None,
    "meetings": None,
    "duration_s": None,
    "t_min": DEFAULT_T_MIN,
    "fps": 2.0,
    "tau": DEFAULT_TAU,
    "min_anchor_frames": DEFAULT_MIN_ANCHOR_FRAMES,
    "min_face_px": 40,
    "containment_frac": 0.9,
    "sigma": None,
    "noise_profile": None,
    "noise": None,
    "sim": None,
    "duration_dist": "uniform",
    "tau_grid": None,
    "lenient": False,
}

DETECTIONS_SUFFIX = ".detections.jsonl"
GT_SUFFIX = ".gt.jsonl"
PARTICIPANTS_SUFFIX = ".participants.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _add_sim_flags(p):
    p.add_argument("--seed", type=int, help="master seed (required)")
    p.add_argument("--k", type=int, help="participants per meeting; drawn from [2, 11] when omitted")
    p.add_argument("--meetings", type=int, help="number of meetings in the batch (default 1)")
    p.add_argument("--duration-s", type=float, dest="duration_s",
                   help="meeting length; drawn from [438, 3386] s when omitted")
    p.add_argument("--fps", type=float, help="sampling rate (default 2)")
    p.add_argument("--sigma", type=float, help="embedding noise per dimension")
    p.add_argument("--noise-profile", dest="noise_profile", help="JSON file with tracker-noise probabilities")
    p.add_argument("--duration-dist", dest="duration_dist", choices=["uniform", "loguniform"])


def _add_track_flags(p):
    p.add_argument("--tau", type=float, help="cosine-distance merge threshold (default 0.45)")
    p.add_argument("--min-anchor-frames", type=int, dest="min_anchor_frames", help="default 4")
    p.add_argument("--min-face-px", type=int, dest="min_face_px", help="default 40")
    p.add_argument("--containment-frac", type=float, dest="containment_frac", help="default 0.9")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meetreid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of option values; explicit flags take precedence")
        p.add_argument("--t-min", type=float, dest="t_min", help="minimum presence in seconds (default 120)")
        p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("simulate", help="write synthetic detection logs and ground truth")
    common(p)
    _add_sim_flags(p)

    p = sub.add_parser("track", help="count participants in detection logs")
    common(p)
    p.add_argument("-i", "--input", required=True, help="detection log or directory of logs")
    p.add_argument("--lenient", action="store_true", default=None, help="ignore unknown fields instead of failing")
    _add_track_flags(p)

    p = sub.add_parser("eval", help="score participant outputs against ground truth")
    common(p)
    p.add_argument("--data", required=True, help="directory with detection logs and ground truth")
    p.add_argument("--tracks", help="directory with participant outputs (default: --data)")

    p = sub.add_parser("pipeline", help="simulate, track and eval in one run")
    common(p)
    _add_sim_flags(p)
    _add_track_flags(p)

    p = sub.add_parser("calibrate", help="sweep the merge threshold on a simulated batch")
    common(p)
    _add_sim_flags(p)
    p.add_argument("--tau-grid", dest="tau_grid", help="comma-separated thresholds")
    p.add_argument("--min-anchor-frames", type=int, dest="min_anchor_frames")
    p.add_argument("--min-face-px", type=int, dest="min_face_px")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc}") from None
        for key, value in file_opts.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown config key")
            opts[key] = value
    for key, value in vars(args).items():
        if value is not None and key in DEFAULTS:
            opts[key] = value
    return opts


def _noise(opts) -> NoiseConfig:
    if opts["noise_profile"]:
        try:
            data = json.loads(Path(opts["noise_profile"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("noise_profile", f"cannot read {opts['noise_profile']}: {exc}") from None
        return NoiseConfig.from_dict(data)
    if opts["noise"] is not None:
        return NoiseConfig.from_dict(opts["noise"])
    return DEFAULT_NOISE


def sim_configs(opts) -> list[SimConfig]:
    if opts["seed"] is None:
        raise ConfigError("seed", "a seed is required")
    base = SimConfig.from_dict(opts["sim"]) if opts["sim"] else SimConfig()
    base = replace(base, noise=_noise(opts), sampling_rate_fps=float(opts["fps"]), t_min=float(opts["t_min"]))
    if opts["sigma"] is not None:
        base = replace(base, embedding_sigma=float(opts["sigma"]))
    n = 1 if opts["meetings"] is None else int(opts["meetings"])
    if n < 1:
        raise ConfigError("meetings", "must be at least 1")
    configs = sample_batch(n, int(opts["seed"]), base, k=opts["k"], duration_s=opts["duration_s"],
                           duration_dist=opts["duration_dist"])
    for c in configs:
        c.validate()
    return configs


def match_config(opts) -> MatchConfig:
    try:
        return MatchConfig(float(opts["tau"]), int(opts["min_anchor_frames"]))
    except ValueError as exc:
        field = "tau" if "distance" in str(exc) else "min_anchor_frames"
        raise ConfigError(field, str(exc)) from None


def gate_config(opts) -> GateConfig:
    try:
        return GateConfig.square(int(opts["min_face_px"]), float(opts["containment_frac"]))
    except ValueError as exc:
        raise ConfigError("min_face_px", str(exc)) from None


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_simulate(opts, out: Path) -> list[Path]:
    written = []
    for cfg in sim_configs(opts):
        stream, gt = generate(cfg)
        out.mkdir(parents=True, exist_ok=True)
        det = out / f"{cfg.meeting_id}{DETECTIONS_SUFFIX}"
        write_stream(stream, det)
        _write(out / f"{cfg.meeting_id}{GT_SUFFIX}", gt.to_jsonl())
        written += [det, out / f"{cfg.meeting_id}{GT_SUFFIX}"]
        print(f"{cfg.meeting_id}: k={cfg.k_participants} duration={cfg.duration_s}s "
              f"frames={len(stream)} k_gt={gt.k_gt}")
    return written


def _load_checked(path: Path, strict: bool) -> FrameStream:
    try:
        stream = parse_stream(path, strict=strict)
    except StreamError as exc:
        raise CliError(EXIT_VALIDATION, f"{path}: {exc}") from None
    violations = validate_stream(stream)
    for v in violations:
        if v.severity != "error":
            logger.warning("%s: %s", path.name, v)
    errors = errors_only(violations)
    if errors:
        listing = "\n".join(f"  {v}" for v in errors[:50])
        raise CliError(EXIT_VALIDATION, f"{path}: {len(errors)} violation(s)\n{listing}")
    return stream


def cmd_track(opts, inp: Path, out: Path) -> list[Path]:
    mcfg, gcfg = match_config(opts), gate_config(opts)
    if inp.is_dir():
        files = sorted(inp.glob(f"*{DETECTIONS_SUFFIX}"))
        if not files:
            raise CliError(EXIT_MISMATCH, f"{inp}: no *{DETECTIONS_SUFFIX} files")
    elif inp.exists():
        files = [inp]
    else:
        raise ConfigError("input", f"{inp} does not exist")
    single_file_out = not inp.is_dir() and out.suffix == ".json"
    written = []
    for f in files:
        stream = _load_checked(f, strict=not opts["lenient"])
        result = track_stream(stream, mcfg, gcfg, float(opts["t_min"]))
        if result.k_filtered == 0:
            logger.warning("%s: no participant reaches %.0f s with a usable face", f.name, opts["t_min"])
        dest = out if single_file_out else out / f"{stream.header.meeting_id}{PARTICIPANTS_SUFFIX}"
        _write(dest, result.to_json())
        written.append(dest)
        print(f"{stream.header.meeting_id}: k_filtered={result.k_filtered} k_unfiltered={result.k_unfiltered}")
    return written


def _owner_from_json(doc: dict) -> dict:
    return {(s[0], s[1]): p["id"] for p in doc["participants"] for s in p["segments"]}


def cmd_eval(opts, data: Path, tracks: Path, out: Path) -> list[Path]:
    det_files = sorted(data.glob(f"*{DETECTIONS_SUFFIX}"))
    if not det_files:
        raise CliError(EXIT_MISMATCH, f"{data}: no detection logs found")
    t_min = float(opts["t_min"])
    results = []
    for det in det_files:
        mid = det.name[: -len(DETECTIONS_SUFFIX)]
        gt_path = data / f"{mid}{GT_SUFFIX}"
        part_path = tracks / f"{mid}{PARTICIPANTS_SUFFIX}"
        if not gt_path.exists():
            raise CliError(EXIT_MISMATCH, f"missing ground truth for meeting {mid}")
        if not part_path.exists():
            raise CliError(EXIT_MISMATCH, f"missing participant output for meeting {mid}")
        stream = _load_checked(det, strict=not opts["lenient"])
        gt = GroundTruth.from_jsonl(gt_path.read_text(encoding="utf-8"))
        doc = json.loads(part_path.read_text(encoding="utf-8"))
        for other, label in ((gt.meeting_id, "ground truth"), (doc.get("meeting_id"), "participant output")):
            if other != stream.header.meeting_id:
                raise CliError(EXIT_MISMATCH, f"meeting {mid}: {label} is for {other!r}")
        if len(gt.labels) != len(stream.frames):
            raise CliError(EXIT_MISMATCH, f"meeting {mid}: ground truth covers {len(gt.labels)} frames, "
                                          f"log has {len(stream.frames)}")
        k_pred = sum(1 for p in doc["participants"] if p["presence_s"] >= t_min)
        results.append(evaluate_meeting(stream, gt, k_pred, _owner_from_json(doc), segment_scenes(stream), t_min))
    report = build_report(results)
    csv_path, summary_path = out / "report.csv", out / "summary.json"
    _write(csv_path, report.to_csv())
    _write(summary_path, report.summary_json())
    o = report.overall
    print(f"meetings={len(results)} mae_pipeline={o['pipeline']:.3f} mae_baseline={o['baseline']:.3f}")
    return [csv_path, summary_path]


def cmd_pipeline(opts, out: Path) -> list[Path]:
    sim_dir, track_dir = out / "sim", out / "tracks"
    written = cmd_simulate(opts, sim_dir)
    written += cmd_track(opts, sim_dir, track_dir)
    written += cmd_eval(opts, sim_dir, track_dir, out)
    return written


def _tau_grid(opts) -> list[float]:
    raw = opts["tau_grid"]
    if raw is None:
        return [round(float(x), 2) for x in np.arange(0.05, 1.0, 0.1)]
    if isinstance(raw, str):
        raw = [x for x in raw.split(",") if x.strip()]
    try:
        grid = [float(x) for x in raw]
    except ValueError:
        raise ConfigError("tau_grid", "entries must be numbers") from None
    if not grid:
        raise ConfigError("tau_grid", "grid is empty")
    for t in grid:
        if not 0 < t <= 2:
            raise ConfigError("tau_grid", f"{t} outside (0, 2]")
    return grid


def calibrate(configs: Sequence[SimConfig], grid: Sequence[float], min_anchor_frames: int = DEFAULT_MIN_ANCHOR_FRAMES,
              gate_cfg: GateConfig = GateConfig(), t_min: float = DEFAULT_T_MIN) -> tuple[float, list[dict]]:
    """Exact-K rate and MAE per threshold; returns the recommended threshold and the sweep rows."""
    prepared = []
    for cfg in configs:
        stream, gt = generate(cfg)
        stream = FrameStream(stream.header, tuple(gate_frame(f, gate_cfg) for f in stream.frames))
        scenes = segment_scenes(stream)
        prepared.append((scenes, build_segments(stream, scenes), stream.fps,
                         sum(1 for p in gt.presence_s if p >= t_min)))
    rows = []
    for tau in grid:
        mcfg = MatchConfig(tau, min_anchor_frames)
        errs = []
        for scenes, segments, fps, k_gt in prepared:
            k = count_participants(match_scenes(segments, scenes, mcfg, fps=fps), t_min, fps)
            errs.append(k - k_gt)
        errs = np.abs(errs)
        rows.append({"tau": tau, "exact_k_rate": float(np.mean(errs == 0)), "mae": float(np.mean(errs))})
    best_rate = max(r["exact_k_rate"] for r in rows)
    best_mae = min(r["mae"] for r in rows if r["exact_k_rate"] == best_rate)
    tied = sorted(r["tau"] for r in rows if r["exact_k_rate"] == best_rate and r["mae"] == best_mae)
    return tied[(len(tied) - 1) // 2], rows


def cmd_calibrate(opts, out: Path) -> list[Path]:
    grid = _tau_grid(opts)
    configs = sim_configs(opts)
    best, rows = calibrate(configs, grid, int(opts["min_anchor_frames"]), gate_config(opts), float(opts["t_min"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["tau", "exact_k_rate", "mae"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"tau": repr(r["tau"]), "exact_k_rate": f"{r['exact_k_rate']:.6f}", "mae": f"{r['mae']:.6f}"})
    path = out / "tau_sweep.csv"
    _write(path, buf.getvalue())
    print(f"recommended tau={best}")
    return [path]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        out = Path(args.out)
        if args.command == "simulate":
            cmd_simulate(opts, out)
        elif args.command == "track":
            cmd_track(opts, Path(args.input), out)
        elif args.command == "eval":
            data = Path(args.data)
            if not data.is_dir():
                raise ConfigError("data", f"{data} is not a directory")
            cmd_eval(opts, data, Path(args.tracks) if args.tracks else data, out)
        elif args.command == "pipeline":
            cmd_pipeline(opts, out)
        elif args.command == "calibrate":
            cmd_calibrate(opts, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
