"""Pitch-preserving time stretching with exact time maps.

A stretch factor ``f`` makes audio ``f`` times longer: ten seconds at
``f = 1.2`` become twelve. Piecewise specs change the factor at breakpoints
given in original-signal time. Stretching is WSOLA (40 ms Hann frames at
50 % overlap, +/-10 ms similarity search).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .frontend import AudioClip

MIN_FACTOR, MAX_FACTOR = 0.8, 1.2
WSOLA_WINDOW_S = 0.040
WSOLA_TOLERANCE_S = 0.010


@dataclass(frozen=True)
class StretchSpec:
    kind: str = "constant"
    factor: float = 1.0
    breakpoints: tuple = ()  # ((time_s, factor), ...) with the first at 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise"):
            raise ValueError(f"unknown stretch kind {self.kind!r}")
        for f in self.factors():
            if not MIN_FACTOR - 1e-12 <= f <= MAX_FACTOR + 1e-12:
                raise ValueError(f"stretch factor {f} outside [{MIN_FACTOR}, {MAX_FACTOR}]")
        if self.kind == "piecewise":
            times = [t for t, _ in self.breakpoints]
            if not times or times[0] != 0.0:
                raise ValueError("piecewise spec must start with a breakpoint at 0 s")
            if np.any(np.diff(times) <= 0):
                raise ValueError("breakpoint times must be strictly increasing")

    @classmethod
    def constant(cls, factor: float) -> "StretchSpec":
        return cls("constant", float(factor))

    @classmethod
    def piecewise(cls, breakpoints) -> "StretchSpec":
        return cls("piecewise", 1.0, tuple((float(t), float(f)) for t, f in breakpoints))

    def factors(self):
        return [self.factor] if self.kind == "constant" else [f for _, f in self.breakpoints]

    @property
    def num_changes(self) -> int:
        return max(0, len(self.breakpoints) - 1)

    def time_map(self, duration: float) -> "TimeMap":
        if self.kind == "constant":
            return TimeMap(np.array([0.0]), np.array([self.factor]), duration)
        times, factors = zip(*self.breakpoints)
        return TimeMap(np.array(times), np.array(factors), duration)


class TimeMap:
    """Piecewise-linear original->stretched time map on ``[0, duration]``."""

    def __init__(self, starts, factors, duration: float):
        self.starts = np.asarray(starts, dtype=np.float64)
        self.factors = np.asarray(factors, dtype=np.float64)
        self.duration = float(duration)
        if np.any(self.factors <= 0):
            raise ValueError("factors must be positive")
        seg = np.diff(np.append(self.starts, max(self.duration, self.starts[-1])))
        self.out_starts = np.concatenate([[0.0], np.cumsum(seg * self.factors)[:-1]])

    @classmethod
    def identity(cls, duration: float) -> "TimeMap":
        return cls([0.0], [1.0], duration)

    @property
    def out_duration(self) -> float:
        return float(self(self.duration))

    def _check(self, t, limit):
        if np.any(t < -1e-9) or np.any(t > limit + 1e-9):
            raise ValueError(f"time outside the map domain [0, {limit}]")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        self._check(t, self.duration)
        i = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, None)
        return self.out_starts[i] + self.factors[i] * (t - self.starts[i])

    def inverse(self, u):
        u = np.asarray(u, dtype=np.float64)
        self._check(u, self.out_duration)
        i = np.clip(np.searchsorted(self.out_starts, u, side="right") - 1, 0, None)
        return self.starts[i] + (u - self.out_starts[i]) / self.factors[i]


def remap_times(times, tmap: TimeMap) -> np.ndarray:
    return tmap(np.asarray(times, dtype=np.float64))


def remap_frames(frames, tmap: TimeMap, frame_rate: float = 50.0, length: int | None = None) -> np.ndarray:
    """Map frame indices through a time map, rounding and dropping duplicates/overflow."""
    t = np.minimum(np.asarray(frames, dtype=np.float64) / frame_rate, tmap.duration)
    out = np.round(tmap(t) * frame_rate).astype(np.int64)
    if length is not None:
        out = out[out < length]
    return np.unique(out)


def random_piecewise_spec(rng: np.random.Generator, clip_duration: float) -> StretchSpec:
    """One to four factor changes at times uniform over (2 s, duration - 2 s)."""
    if clip_duration <= 4.0:
        raise ValueError("piecewise stretching needs clips longer than 4 s")
    count = int(rng.integers(1, 5))
    times = np.unique(rng.uniform(2.0, clip_duration - 2.0, size=count))
    factors = rng.uniform(MIN_FACTOR, MAX_FACTOR, size=len(times) + 1)
    return StretchSpec.piecewise([(0.0, factors[0])] + list(zip(times, factors[1:])))


def wsola(samples: np.ndarray, tmap: TimeMap, sample_rate: int) -> np.ndarray:
    """Waveform-similarity overlap-add following an arbitrary time map."""
    x = np.asarray(samples, dtype=np.float64)
    n = int(round(WSOLA_WINDOW_S * sample_rate))
    hop = n // 2
    tol = int(round(WSOLA_TOLERANCE_S * sample_rate))
    out_len = int(round(tmap.out_duration * sample_rate))
    pad = n + tol + hop
    xp = np.pad(x, (pad, pad + n))
    window = signal.get_window("hann", n, fftbins=True)

    n_frames = out_len // hop + 2
    out = np.zeros(n_frames * hop + n)
    wsum = np.zeros_like(out)
    centers_out = np.minimum(np.arange(n_frames) * hop / sample_rate, tmap.out_duration)
    centers_in = np.round(tmap.inverse(centers_out) * sample_rate).astype(np.int64)

    prev = None
    for k, c in enumerate(centers_in):
        start = c - n // 2 + pad  # frame start in padded input
        if prev is not None:
            natural = xp[prev + hop: prev + hop + n]
            region = xp[start - tol: start + tol + n]
            if np.any(natural) and np.any(region):
                corr = signal.correlate(region, natural, mode="valid")
                start = start - tol + int(np.argmax(corr))
        o = k * hop
        out[o:o + n] += window * xp[start:start + n]
        wsum[o:o + n] += window
        prev = start
    # output frame k is centered at k * hop; drop the leading half frame
    out = out[n // 2: n // 2 + out_len]
    wsum = wsum[n // 2: n // 2 + out_len]
    return out / np.maximum(wsum, 1e-3)


def stretch(clip: AudioClip, spec: StretchSpec):
    tmap = spec.time_map(clip.duration)
    if spec.kind == "constant" and spec.factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.clip_id), tmap
    y = wsola(clip.samples, tmap, clip.sample_rate)
    return AudioClip(np.clip(y, -1.0, 1.0), clip.sample_rate, clip.clip_id), tmap
