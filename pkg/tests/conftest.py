import numpy as np
import pytest

from meetreid.core import BBox, DetectionFrame, FaceDetection, PersonDetection
from meetreid.ingest import FrameStream, StreamHeader


def unit(rng, dim=128):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def person_box(slot: int) -> BBox:
    # 8 fixed tiles of 160x360 on a 1280x720 canvas
    return BBox((slot % 8) * 160 + 10, (slot // 8) * 360 + 10, 140, 340)


def face_in(box: BBox, side: int = 60) -> BBox:
    return BBox(box.x + (box.w - side) // 2, box.y + 20, side, side)


def gated_frame(index: int, tracks: dict) -> DetectionFrame:
    """Frame whose faces are already associated. ``tracks`` maps track id -> embedding or None."""
    persons, by_track = [], {}
    for slot, (tid, emb) in enumerate(sorted(tracks.items())):
        box = person_box(slot)
        persons.append(PersonDetection(tid, box))
        if emb is not None:
            by_track[tid] = FaceDetection(face_in(box), np.asarray(emb, dtype=float), tid)
    return DetectionFrame(index, tuple(persons), tuple(by_track.values()), by_track)


def make_stream(frames, dim=128, meeting_id="t") -> FrameStream:
    return FrameStream(StreamHeader(meeting_id, 30.0, 2.0, (1280, 720), dim), tuple(frames))


def stream_from_track_sets(track_sets, dim=8, seed=0):
    """Stream of gated frames from a list of per-frame track-id sets; one fixed embedding per track id."""
    rng = np.random.default_rng(seed)
    embs = {}
    frames = []
    for i, ids in enumerate(track_sets):
        for t in ids:
            if t not in embs:
                embs[t] = unit(rng, dim)
        frames.append(gated_frame(i, {t: embs[t] for t in ids}))
    return make_stream(frames, dim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register here; the lines are printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
