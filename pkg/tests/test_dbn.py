import time

import numpy as np
import pytest

from pulsekit.dbn import (DbnConfig, StateSpace, chunk_starts, decode, observation_log_probs,
                          path_log_prob, stitch_chunks, viterbi, write_activations_csv, write_beats)

TINY = DbnConfig(min_bpm=120, max_bpm=200, fps=10, transition_lambda=3.0)  # periods 3..5, 12 states
SMALL = DbnConfig(min_bpm=120, max_bpm=240, fps=20, transition_lambda=5.0)  # periods 5..10, 45 states


def enumerate_best(act, space):
    """Best path by walking every feasible state sequence."""
    trans = space.transition_matrix()
    with np.errstate(divide="ignore"):
        log_t = np.log(trans)
    obs = observation_log_probs(act, space)
    best = (-np.inf, None)
    stack = [(s, [s], -np.log(space.num_states) + obs[0, s]) for s in range(space.num_states)]
    while stack:
        s, path, score = stack.pop()
        if len(path) == len(act):
            if score > best[0]:
                best = (score, path)
            continue
        for nxt in np.flatnonzero(trans[s] > 0):
            stack.append((nxt, path + [int(nxt)], score + log_t[s, nxt] + obs[len(path), nxt]))
    return best


def dense_viterbi(act, space):
    with np.errstate(divide="ignore"):
        log_t = np.log(space.transition_matrix())
    obs = observation_log_probs(act, space)
    delta = -np.log(space.num_states) + obs[0]
    for t in range(1, len(act)):
        delta = np.max(delta[:, None] + log_t, axis=0) + obs[t]
    return float(delta.max())


def test_state_space_layout():
    space = StateSpace()
    assert space.periods[0] == 11 and space.periods[-1] == 75
    assert space.num_classes == 65 and space.num_states == sum(range(11, 76))
    trans = StateSpace(TINY).transition_matrix()
    np.testing.assert_allclose(trans.sum(axis=1), 1.0)


def test_exhaustive_enumeration_matches_viterbi():
    space = StateSpace(TINY)
    rng = np.random.default_rng(0)
    for case in range(10):
        act = rng.uniform(0, 1, size=int(rng.integers(3, 10)))
        best_score, _ = enumerate_best(act, space)
        path, score = viterbi(act, space)
        assert score == pytest.approx(best_score, abs=1e-9)
        assert path_log_prob(path, act, space) == pytest.approx(score, abs=1e-9)


def test_dense_recursion_matches_viterbi_up_to_60_states():
    space = StateSpace(SMALL)
    assert space.num_states <= 60
    rng = np.random.default_rng(1)
    for case in range(20):
        act = rng.uniform(0, 1, size=int(rng.integers(5, 31)))
        path, score = viterbi(act, space)
        assert score == pytest.approx(dense_viterbi(act, space), abs=1e-8)
        assert path_log_prob(path, act, space) == pytest.approx(score, abs=1e-8)


def test_spikes_decode_exactly():
    act = np.zeros(1000)
    act[7::25] = 1.0
    np.testing.assert_allclose(decode(act), np.arange(7, 1000, 25) / 50)


def test_shifted_spikes_shift_beats():
    act = np.zeros(1000)
    act[7::25] = 1.0
    shifted = np.roll(act, 2)
    np.testing.assert_allclose(decode(shifted), decode(act) + 0.04, atol=1e-9)


def test_below_threshold_gives_no_beats():
    assert len(decode(np.full(500, 0.1))) == 0
    assert len(decode(np.full(500, 0.16))) > 0


def test_infinite_lambda_keeps_one_tempo():
    cfg = DbnConfig(transition_lambda=np.inf)
    act = np.zeros(1000)
    act[0:500:25] = 1.0
    act[500::20] = 1.0
    beats = decode(act, cfg)
    assert len(set(np.round(np.diff(beats), 6))) == 1


def test_decode_runtime():
    act = np.random.default_rng(0).uniform(0, 1, 1000)
    space = StateSpace()
    start = time.perf_counter()
    decode(act, space=space)
    assert time.perf_counter() - start < 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        DbnConfig(min_bpm=200, max_bpm=100)
    with pytest.raises(ValueError):
        DbnConfig(observation_lambda=1.0)
    with pytest.raises(ValueError):
        decode(np.zeros(0))


def test_chunk_starts_and_stitching():
    assert chunk_starts(3000, 1000, 250) == [0, 750, 1500, 2250]
    full = np.random.default_rng(0).uniform(size=3000)
    chunks = [full[s:s + 1000] for s in chunk_starts(3000, 1000, 250)]
    np.testing.assert_allclose(stitch_chunks(chunks, 3000), full)
    a, b = np.zeros(1000), np.ones(1000)
    out = stitch_chunks([a, b], 1750)
    np.testing.assert_allclose(out[750:1000], np.linspace(0, 1, 250))
    with pytest.raises(ValueError):
        stitch_chunks([a, b[:10]], 1750)


def test_writers(tmp_path):
    write_beats(tmp_path / "b.txt", [0.5, 1.0004])
    assert (tmp_path / "b.txt").read_text() == "0.500\n1.000\n"
    write_activations_csv(tmp_path / "a.csv", [0.25])
    assert (tmp_path / "a.csv").read_text() == "frame,activation\n0,0.250000\n"


def test_all_zero_activations_give_no_beats():
    assert len(decode(np.zeros(300))) == 0


@pytest.mark.parametrize("seed", range(5))
def test_decoded_intervals_stay_in_tempo_range(seed):
    act = np.random.default_rng(seed).uniform(0, 1, 800)
    beats = decode(act)
    ibi = np.diff(beats)
    assert np.all(ibi >= 60 / 270 - 0.02 - 1e-9) and np.all(ibi <= 60 / 40 + 0.02 + 1e-9)
    assert np.array_equal(beats, decode(act.copy()))


def test_stitching_identities():
    one = np.random.default_rng(0).uniform(size=600)
    np.testing.assert_array_equal(stitch_chunks([one], 600), one)
    np.testing.assert_allclose(stitch_chunks([np.full(1000, 0.5), np.full(1000, 0.5)], 1750), 0.5)
