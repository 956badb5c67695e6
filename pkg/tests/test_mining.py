import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pulsekit.mining import (EASY, HARD, MiningConfig, MiningError, derive_seed, easy_pool, hard_pool,
                             mine_segment, positive_set, sample_negatives, write_batch_jsonl)
from pulsekit.plp import PeakSet


def regular_peaks(k=40, period=12, offset=5, length=None):
    peaks = offset + period * np.arange(k)
    return PeakSet(peaks, length or int(peaks[-1]) + period)


def check_invariants(batch, peaks, cfg):
    peak_set = set(peaks.peaks.tolist())
    pos_of = {int(f): i for i, f in enumerate(peaks.peaks)}
    near = {int(p) + d for p in peaks.peaks for d in range(-cfg.safety_window, cfg.safety_window + 1)}
    for tr in batch.triplets:
        assert tr.anchor_frame in peak_set and tr.positive_frame in peak_set
        a, p = pos_of[tr.anchor_frame], pos_of[tr.positive_frame]
        assert p != a and (p - a) % cfg.alpha == 0
        excluded = {tr.anchor_frame} | {int(peaks.peaks[y]) for y in positive_set(peaks, a, cfg.alpha)}
        assert len(tr.negative_frames) == cfg.num_negatives
        for f, tag in tr.negative_frames:
            assert f not in excluded
            if tag == EASY:
                assert f not in near and 0 <= f < peaks.length
            else:
                assert tag == HARD and f in peak_set


def test_positive_set_examples():
    assert positive_set(np.arange(10), 1, 4).tolist() == [5, 9]
    assert positive_set(np.arange(10), 5, 4).tolist() == [1, 9]
    assert positive_set(np.arange(3), 1, 4).tolist() == []
    with pytest.raises(IndexError):
        positive_set(np.arange(3), 3, 4)


def test_pools():
    peaks = PeakSet(np.array([2, 6, 10]), 13)
    assert easy_pool(peaks, 13, 1).tolist() == [0, 4, 8, 12]
    assert hard_pool(peaks, 0, [2]).tolist() == [6]


def test_invariants_on_regular_peaks():
    cfg = MiningConfig()
    peaks = regular_peaks()
    batch = mine_segment(peaks, peaks.length, cfg, rng=7, clip_id="c")
    assert len(batch) == round(0.8 * 40)
    assert len({t.anchor_frame for t in batch.triplets}) == len(batch)
    check_invariants(batch, peaks, cfg)
    for tr in batch.triplets:
        tags = [t for _, t in tr.negative_frames]
        assert tags.count(HARD) == 5 and tags.count(EASY) == 5
    assert batch.substitutions == 0


@given(st.lists(st.integers(0, 499), min_size=0, max_size=80, unique=True),
       st.integers(0, 4), st.integers(0, 3), st.integers(0, 2**32))
@settings(max_examples=150, deadline=None)
def test_invariants_on_random_peaks(frames, n_exp, safety, seed):
    cfg = MiningConfig(n_exponent=n_exp, safety_window=safety)
    peaks = PeakSet(np.sort(np.array(frames, dtype=np.int64)), 500)
    batch = mine_segment(peaks, 500, cfg, rng=seed)
    if batch.reason:
        assert len(batch) == 0
    else:
        check_invariants(batch, peaks, cfg)


def test_positive_choice_is_uniform():
    # anchor in the middle of 41 peaks with alpha = 4 has 10 positive candidates
    cfg = MiningConfig()
    peaks = regular_peaks(41)
    a = 20
    ys = positive_set(peaks, a, cfg.alpha)
    counts = {int(y): 0 for y in ys}
    for trial in range(300):
        batch = mine_segment(peaks, peaks.length, MiningConfig(anchor_fraction=1.0), rng=trial)
        tr = next(t for t in batch.triplets if t.anchor_pos == a)
        counts[tr.positive_pos] += 1
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_short_hard_pool_is_topped_up_from_easy():
    # 5 peaks, alpha 4: anchor 0 has positive {4}; hard pool {1, 2, 3} holds only 3
    peaks = PeakSet(np.array([10, 20, 30, 40, 50]), 200)
    cfg = MiningConfig()
    negs, short = sample_negatives(peaks, 0, [4], cfg, np.random.default_rng(0))
    tags = [t for _, t in negs]
    assert short == 2 and tags.count(HARD) == 3 and tags.count(EASY) == 7


def test_empty_pools_raise():
    peaks = PeakSet(np.array([0, 1]), 2)
    with pytest.raises(MiningError):
        sample_negatives(peaks, 0, [1], MiningConfig(n_exponent=0), np.random.default_rng(0))


def test_degenerate_segments_report_reason():
    assert mine_segment(PeakSet(np.array([], dtype=int), 100), 100).reason == "no peaks"
    assert mine_segment(PeakSet(np.array([5, 10]), 100), 100).reason == "no usable anchors"


def test_same_seed_same_batch_and_keyed_seeds_differ():
    peaks = regular_peaks()
    a = mine_segment(peaks, peaks.length, rng=derive_seed(3, "clip", 0))
    b = mine_segment(peaks, peaks.length, rng=derive_seed(3, "clip", 0))
    assert [(t.anchor_frame, t.positive_frame, t.negative_frames) for t in a.triplets] == \
           [(t.anchor_frame, t.positive_frame, t.negative_frames) for t in b.triplets]
    assert derive_seed(3, "clip", 0) != derive_seed(3, "clip", 1)
    assert derive_seed(3, "clip", 0) != derive_seed(4, "clip", 0)


def test_config_validation():
    with pytest.raises(ValueError):
        MiningConfig(num_negatives=5, hard_fraction=0.5)
    with pytest.raises(ValueError):
        MiningConfig(n_exponent=-1)
    assert MiningConfig(n_exponent=3).alpha == 8


def test_jsonl_output(tmp_path):
    peaks = regular_peaks(12)
    batch = mine_segment(peaks, peaks.length, rng=0, clip_id="demo")
    write_batch_jsonl(tmp_path / "b.jsonl", batch)
    rows = [json.loads(l) for l in (tmp_path / "b.jsonl").read_text().splitlines()]
    assert len(rows) == len(batch)
    assert rows[0]["clip"] == "demo" and len(rows[0]["negatives"]) == 10


def test_anchor_fraction_rounding():
    # 14 peaks with alpha 4: positions 0..13 all have a partner, so 14 usable; use 10 by trimming
    peaks = PeakSet(np.arange(10) * 30 + 5, 300)
    batch = mine_segment(peaks, 300, MiningConfig(n_exponent=0), rng=0)
    assert len(batch) == 8


def test_offsets_are_multiples_of_four_tatums():
    peaks = PeakSet(np.arange(40) * 25, 1000)
    batch = mine_segment(peaks, 1000, MiningConfig(), rng=11)
    offsets = {abs(t.positive_frame - t.anchor_frame) for t in batch.triplets}
    assert offsets and all(o % 100 == 0 and o > 0 for o in offsets)
