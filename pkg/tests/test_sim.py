import math
from dataclasses import replace

import numpy as np
import pytest

from meetreid.errors import ConfigError, ConfigUnresolvable
from meetreid.ingest import serialize_stream, validate_stream
from meetreid.sim import (DURATION_RANGE_S, EventRates, GroundTruth, NoiseConfig, SimConfig, apply_tracker_noise,
                          check_resolvable, generate, generate_clean, layout_grid, sample_batch)
from meetreid.tracker import segment_scenes

QUIET = dict(noise=NoiseConfig(), event_rates=EventRates.static(), shared_feed_prob=0.0)


def all_ids(stream):
    return {p.track_id for f in stream.frames for p in f.persons}


def test_static_two_person_meeting():
    cfg = SimConfig(k_participants=2, duration_s=600, embedding_sigma=0.0, **QUIET)
    stream, gt = generate(cfg)
    assert len(stream.frames) == 1200
    assert len(segment_scenes(stream)) == 1
    assert all_ids(stream) == {1, 2}
    assert gt.presence_s == [600.0, 600.0] and gt.k_gt == 2
    # sigma = 0: every face of an identity carries the same embedding
    embs = {f.track_id: f.embedding for f in stream.frames[0].faces}
    for frame in stream.frames[1:50]:
        for f in frame.faces:
            np.testing.assert_array_equal(f.embedding, embs[f.track_id])


def test_same_seed_same_bytes():
    cfg = SimConfig(k_participants=7, duration_s=400, seed=42)
    a, ga = generate(cfg)
    b, gb = generate(cfg)
    assert serialize_stream(a) == serialize_stream(b)
    assert ga.to_jsonl() == gb.to_jsonl()
    c, _ = generate(replace(cfg, seed=43))
    assert serialize_stream(c) != serialize_stream(a)


def test_generated_streams_validate():
    for seed in range(5):
        stream, gt = generate(SimConfig(k_participants=11, duration_s=300, seed=seed))
        assert [v for v in validate_stream(stream) if v.severity == "error"] == []
        assert len(gt.labels) == len(stream.frames)


def test_ground_truth_jsonl_round_trip():
    _, gt = generate(SimConfig(k_participants=4, duration_s=200, seed=1))
    again = GroundTruth.from_jsonl(gt.to_jsonl())
    assert again == gt


def test_batch_k_statistics():
    means = [np.mean([c.k_participants for c in sample_batch(30, s)]) for s in range(10)]
    assert abs(np.mean(means) - 5.9) <= 1.5
    ks = {c.k_participants for s in range(10) for c in sample_batch(30, s)}
    assert ks == set(range(2, 12))


def test_batch_duration_statistics():
    lo, hi = DURATION_RANGE_S
    uni = np.mean([c.duration_s for s in range(10) for c in sample_batch(30, s)]) / 60
    log = np.mean([c.duration_s for s in range(10) for c in sample_batch(30, s, duration_dist="loguniform")]) / 60
    # a uniform draw on the stated range cannot average 25.5 min; its mean is (lo+hi)/2
    assert uni == pytest.approx((lo + hi) / 2 / 60, abs=1.5)
    assert abs(log - 25.5) <= 5
    assert log == pytest.approx((hi - lo) / math.log(hi / lo) / 60, abs=1.5)
    for c in sample_batch(30, 0, duration_dist="loguniform"):
        assert lo <= c.duration_s <= hi


def test_batch_meeting_independent_of_batch_size():
    assert sample_batch(5, 9) == sample_batch(12, 9)[:5]


@pytest.mark.parametrize("n,expected", [(1, [(0, 0, 1280, 720)]),
                                        (4, [(0, 0, 640, 360), (640, 0, 640, 360),
                                             (0, 360, 640, 360), (640, 360, 640, 360)])])
def test_layout_examples(n, expected):
    assert [tuple(b.as_list()) for b in layout_grid(n, (1280, 720))] == expected


def test_layout_cells_disjoint_and_inside():
    for n in range(1, 26):
        cells = layout_grid(n, (1280, 720))
        assert len(cells) == n
        for i, a in enumerate(cells):
            assert a.within(1280, 720)
            for b in cells[i + 1:]:
                assert min(a.x2, b.x2) <= max(a.x, b.x) or min(a.y2, b.y2) <= max(a.y, b.y)


def test_zero_noise_is_identity():
    cfg = SimConfig(k_participants=5, duration_s=300, seed=3, noise=NoiseConfig())
    clean, gt = generate_clean(cfg)
    stream, gt2 = apply_tracker_noise(clean, gt, NoiseConfig(), seed=0)
    assert stream is clean and gt2 is gt


def _static_pair(reshuffles):
    clean, gt = generate_clean(SimConfig(k_participants=2, duration_s=100, seed=1, **QUIET))
    return clean, replace(gt, reshuffle_frames=list(reshuffles))


def test_fragmentation_at_every_reshuffle():
    clean, gt = _static_pair([40, 80, 120])
    stream, _ = apply_tracker_noise(clean, gt, NoiseConfig(fragment_prob_on_reshuffle=1.0), seed=0)
    assert len(all_ids(stream)) >= 8


def test_id_switch_twice_restores_ids():
    clean, gt = _static_pair([40, 80])
    stream, ngt = apply_tracker_noise(clean, gt, NoiseConfig(id_switch_prob_on_reshuffle=1.0), seed=0)
    first, mid, last = stream.frames[0], stream.frames[60], stream.frames[100]
    assert first.track_ids == mid.track_ids == last.track_ids == {1, 2}
    assert ngt.labels[0] == {1: 0, 2: 1}
    assert ngt.labels[60] == {1: 1, 2: 0}
    assert ngt.labels[100] == {1: 0, 2: 1}


def test_noise_keeps_identity_of_every_detection():
    cfg = SimConfig(k_participants=8, duration_s=600, seed=5,
                    noise=NoiseConfig(0.5, 0.5, 0.3, 0.1, 0.1, 0.1))
    clean, gt = generate_clean(cfg)
    stream, ngt = apply_tracker_noise(clean, gt, cfg.noise, seed=1)
    assert ngt.presence_s == gt.presence_s
    for cf, cl, nf, nl in zip(clean.frames, gt.labels, stream.frames, ngt.labels):
        ident_at = {p.box: cl[p.track_id] for p in cf.persons}
        assert len(nf.persons) <= len(cf.persons)
        for p in nf.persons:
            assert nl[p.track_id] == ident_at[p.box]


def test_merge_emits_one_of_two_identities_under_one_id():
    clean, gt = _static_pair([40])
    stream, ngt = apply_tracker_noise(clean, gt, NoiseConfig(merge_prob=1.0), seed=0)
    assert all(len(f.persons) == 2 for f in stream.frames[:40])
    merged = stream.frames[40:]
    assert all(len(f.persons) == 1 for f in merged)
    assert len({p.track_id for f in merged for p in f.persons}) == 1
    assert {lab[t] for lab in ngt.labels[40:] for t in lab} == {0, 1}


def test_unresolvable_sigma_rejected():
    check_resolvable(0.03, 128)
    with pytest.raises(ConfigUnresolvable):
        check_resolvable(0.5, 128)
    with pytest.raises(ConfigUnresolvable):
        generate(SimConfig(embedding_sigma=1.0, duration_s=10))


@pytest.mark.parametrize("field,value", [("k_participants", 1), ("k_participants", 12), ("duration_s", 0),
                                         ("sampling_rate_fps", 60.0), ("shared_feed_prob", 1.5)])
def test_invalid_config(field, value):
    with pytest.raises(ConfigError):
        SimConfig(**{field: value}).validate()


def test_config_dict_round_trip():
    cfg = SimConfig(k_participants=3, seed=9, noise=NoiseConfig(merge_prob=0.2))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"bogus": 1})


def test_identities_are_separable_at_default_sigma():
    stream, gt = generate(SimConfig(k_participants=6, duration_s=200, seed=2, **QUIET))
    by_ident = {}
    for frame, lab in zip(stream.frames, gt.labels):
        for f in frame.faces:
            by_ident.setdefault(lab[f.track_id], []).append(f.embedding)
    embs = {i: np.array(v) for i, v in by_ident.items()}
    intra = max(1 - float((e @ e.T).min()) for e in embs.values())
    inter = min(1 - float((embs[a] @ embs[b].T).max()) for a in embs for b in embs if a < b)
    assert intra < 0.45 < inter
