"""Viterbi beat decoding over a (tempo, phase) state space.

Each tempo class has an integer beat period in frames and one state per
phase. Phase advances by one frame at a time; when it wraps to 0 (a beat)
the tempo may change with log-probability ``-lambda * |bpm_new / bpm_old - 1|``
(normalized over destinations). Phase-0 states emit the activation ``a``;
every other state emits ``(1 - a) / (observation_lambda - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-7


@dataclass(frozen=True)
class DbnConfig:
    min_bpm: float = 40.0
    max_bpm: float = 270.0
    transition_lambda: float = 45.0
    observation_lambda: float = 9.0
    threshold: float = 0.15
    fps: float = 50.0

    def __post_init__(self):
        if not 0 < self.min_bpm < self.max_bpm:
            raise ValueError("need 0 < min_bpm < max_bpm")
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must be in [0, 1)")
        if self.observation_lambda <= 1:
            raise ValueError("observation_lambda must exceed 1")


class StateSpace:
    def __init__(self, cfg: DbnConfig = DbnConfig()):
        lo = int(round(60.0 * cfg.fps / cfg.max_bpm))
        hi = int(round(60.0 * cfg.fps / cfg.min_bpm))
        lo = max(lo, 1)
        if hi < lo:
            raise ValueError("empty tempo range")
        self.cfg = cfg
        self.periods = np.arange(lo, hi + 1, dtype=np.int64)
        self.bpm = 60.0 * cfg.fps / self.periods
        self.offsets = np.concatenate([[0], np.cumsum(self.periods)[:-1]])
        self.num_states = int(self.periods.sum())
        self.state_class = np.repeat(np.arange(len(self.periods)), self.periods)
        self.state_phase = np.arange(self.num_states) - self.offsets[self.state_class]
        self.first = self.offsets  # phase-0 (beat) states
        self.last = self.offsets + self.periods - 1
        self.log_tempo_transition = self._tempo_transitions(cfg.transition_lambda)

    @property
    def num_classes(self) -> int:
        return len(self.periods)

    def _tempo_transitions(self, lam: float) -> np.ndarray:
        """(from class, to class) log-probabilities applied at phase wrap."""
        ratio = self.bpm[None, :] / self.bpm[:, None]
        if np.isinf(lam):
            return np.where(np.eye(self.num_classes, dtype=bool), 0.0, -np.inf)
        logits = -lam * np.abs(ratio - 1.0)
        logits -= logits.max(axis=1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))

    def transition_matrix(self) -> np.ndarray:
        """Dense (from, to) probability matrix; only sensible for small spaces."""
        trans = np.zeros((self.num_states, self.num_states))
        inner = self.state_phase < self.periods[self.state_class] - 1
        src = np.flatnonzero(inner)
        trans[src, src + 1] = 1.0
        trans[np.ix_(self.last, self.first)] = np.exp(self.log_tempo_transition)
        return trans

    def is_beat(self, states) -> np.ndarray:
        return self.state_phase[np.asarray(states)] == 0


def build_state_space(cfg: DbnConfig = DbnConfig()) -> StateSpace:
    return StateSpace(cfg)


def observation_log_probs(act, space: StateSpace) -> np.ndarray:
    """(T, S) log emission probabilities of the two-bucket model."""
    a = np.clip(np.asarray(act, dtype=np.float64), EPS, 1.0 - EPS)
    beat = np.log(a)
    other = np.log((1.0 - a) / (space.cfg.observation_lambda - 1.0))
    out = np.repeat(other[:, None], space.num_states, axis=1)
    out[:, space.first] = beat[:, None]
    return out


def viterbi(act, space: StateSpace):
    """Most likely state path and its log-probability."""
    act = np.asarray(act, dtype=np.float64)
    n = len(act)
    if n < 1:
        raise ValueError("need at least one activation frame")
    obs = observation_log_probs(act, space)
    inner = np.flatnonzero(space.state_phase > 0)
    delta = np.full(space.num_states, -np.log(space.num_states)) + obs[0]
    back = np.zeros((n, space.num_classes), dtype=np.int64)
    trans = space.log_tempo_transition
    for t in range(1, n):
        new = np.empty_like(delta)
        new[inner] = delta[inner - 1]
        cand = delta[space.last][:, None] + trans
        best = np.argmax(cand, axis=0)
        back[t] = best
        new[space.first] = cand[best, np.arange(space.num_classes)]
        delta = new + obs[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    score = float(delta[path[-1]])
    for t in range(n - 1, 0, -1):
        s = path[t]
        if space.state_phase[s] > 0:
            path[t - 1] = s - 1
        else:
            path[t - 1] = space.last[back[t, space.state_class[s]]]
    return path, score


def path_log_prob(path, act, space: StateSpace) -> float:
    """Log-probability of an explicit state path (used to audit the decoder)."""
    obs = observation_log_probs(act, space)
    with np.errstate(divide="ignore"):
        log_dense = np.log(space.transition_matrix())
    score = -np.log(space.num_states) + obs[0, path[0]]
    for t in range(1, len(path)):
        score += log_dense[path[t - 1], path[t]] + obs[t, path[t]]
    return float(score)


def decode(act, cfg: DbnConfig = DbnConfig(), space: StateSpace | None = None) -> np.ndarray:
    """Beat times in seconds; empty when every activation is below threshold."""
    act = np.asarray(act, dtype=np.float64)
    if len(act) < 1:
        raise ValueError("need at least one activation frame")
    if act.max() < cfg.threshold:
        return np.empty(0)
    space = space or StateSpace(cfg)
    path, _ = viterbi(act, space)
    return np.flatnonzero(space.is_beat(path)) / cfg.fps


def chunk_starts(n_frames: int, chunk: int, overlap: int) -> list[int]:
    starts = [0]
    while starts[-1] + chunk < n_frames:
        starts.append(starts[-1] + chunk - overlap)
    return starts


def stitch_chunks(chunks, n_frames: int | None = None, chunk_s: float = 20.0,
                  overlap_s: float = 5.0, fps: float = 50.0) -> np.ndarray:
    """Overlap-add chunk activations with a linear crossfade in each overlap."""
    chunks = [np.asarray(c, dtype=np.float64) for c in chunks]
    if not chunks:
        raise ValueError("no chunks to stitch")
    chunk = int(round(chunk_s * fps))
    overlap = int(round(overlap_s * fps))
    step = chunk - overlap
    if n_frames is None:
        n_frames = step * (len(chunks) - 1) + len(chunks[-1])
    if len(chunks) == 1:
        if len(chunks[0]) != n_frames:
            raise ValueError("single chunk does not match the track length")
        return chunks[0].copy()
    starts = chunk_starts(n_frames, chunk, overlap)
    if len(starts) != len(chunks):
        raise ValueError(f"expected {len(starts)} chunks for {n_frames} frames, got {len(chunks)}")
    for i, (s, c) in enumerate(zip(starts, chunks)):
        expected = min(chunk, n_frames - s)
        if len(c) != expected:
            raise ValueError(f"chunk {i} has {len(c)} frames, expected {expected}")

    out = chunks[0].copy()
    out = np.concatenate([out, np.zeros(n_frames - len(out))])
    end = len(chunks[0])
    for s, c in zip(starts[1:], chunks[1:]):
        ov = end - s
        ramp = np.linspace(0.0, 1.0, ov) if ov > 1 else np.ones(ov)
        out[s:end] = (1.0 - ramp) * out[s:end] + ramp * c[:ov]
        out[end:s + len(c)] = c[ov:]
        end = s + len(c)
    return out


def write_beats(path, beats, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for b in beats:
            fh.write(f"{b:.3f}\n")


def write_activations_csv(path, act, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("frame,activation\n")
        for t, a in enumerate(act):
            fh.write(f"{t},{a:.6f}\n")
