"""Onset strength, Fourier tempogram and predominant local pulse (PLP).

The PLP curve is the overlap-add of one windowed cosine per frame, each
carrying the frequency and phase of that frame's strongest tempogram bin.
Its local maxima are used as tatum proxies for pretext mining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .frontend import SAMPLE_RATE, AudioClip, AudioError, stft

FPS = 50.0
FLUX_WINDOW = 2048
FLUX_HOP = 320
# A centered 2048-sample window starts seeing an onset ~3 hops early; the
# half-wave-rectified flux maximum lands about one hop ahead of the onset.
FLUX_LAG_COMPENSATION = 1


@dataclass
class OnsetEnvelope:
    values: np.ndarray
    frame_rate: float = FPS

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class TempogramConfig:
    win_length: int = 384
    hop: int = 1
    tempo_min: float = 30.0
    tempo_max: float = 300.0

    def __post_init__(self):
        if not 0 < self.tempo_min < self.tempo_max:
            raise ValueError("need 0 < tempo_min < tempo_max")
        if self.hop != 1:
            raise ValueError("only hop = 1 frame is supported")


@dataclass
class Tempogram:
    values: np.ndarray  # complex, (tempo bins, frames)
    tempo_axis: np.ndarray  # BPM per bin
    frame_rate: float = FPS

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class PlpCurve:
    values: np.ndarray
    frame_rate: float = FPS

    def __len__(self):
        return len(self.values)


@dataclass
class PeakSet:
    peaks: np.ndarray
    length: int

    def __post_init__(self):
        self.peaks = np.asarray(self.peaks, dtype=np.int64)
        if np.any(np.diff(self.peaks) <= 0):
            raise ValueError("peaks must be strictly increasing")
        if len(self.peaks) and (self.peaks[0] < 0 or self.peaks[-1] >= self.length):
            raise ValueError("peak index outside [0, length)")

    def __len__(self):
        return len(self.peaks)

    def times(self, frame_rate: float = FPS) -> np.ndarray:
        return self.peaks / frame_rate


@dataclass
class RegularityReport:
    median_ipi: float
    max_deviation_ratio: float
    accepted: bool
    reason: str = ""


def onset_strength(clip: AudioClip) -> OnsetEnvelope:
    """Spectral flux of log(1 + |X|), averaged over bins, on the 50 fps grid."""
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    log_mag = np.log1p(np.abs(stft(clip.samples, FLUX_WINDOW, FLUX_HOP)))
    flux = np.maximum(0.0, np.diff(log_mag, axis=0)).mean(axis=1)
    values = np.zeros(log_mag.shape[0])
    lag = FLUX_LAG_COMPENSATION
    values[1 + lag:] = flux[: len(flux) - lag]
    return OnsetEnvelope(values, SAMPLE_RATE / FLUX_HOP)


def tempo_axis(cfg: TempogramConfig, frame_rate: float = FPS) -> np.ndarray:
    return np.arange(cfg.win_length // 2 + 1) * frame_rate / cfg.win_length * 60.0


def fourier_tempogram(env: OnsetEnvelope, cfg: TempogramConfig = TempogramConfig()) -> Tempogram:
    """Centered Hann sliding-window DFT of the onset envelope (zero padded).

    Column ``t`` analyses ``env[t - W/2 : t + W/2]``; bin ``k`` has frequency
    ``k * fps / W`` Hz.
    """
    w = cfg.win_length
    x = np.asarray(env.values, dtype=np.float64)
    padded = np.pad(x, (w // 2, w // 2 + max(0, w - len(x))))
    frames = np.lib.stride_tricks.sliding_window_view(padded, w)[: len(x)]
    window = signal.get_window("hann", w, fftbins=True)
    spec = np.fft.rfft(frames * window, axis=1).T
    return Tempogram(spec, tempo_axis(cfg, env.frame_rate), env.frame_rate)


def plp(tgram: Tempogram, cfg: TempogramConfig = TempogramConfig()) -> PlpCurve:
    w = cfg.win_length
    n_frames = tgram.n_frames
    mag = np.abs(tgram.values)
    allowed = (tgram.tempo_axis >= cfg.tempo_min) & (tgram.tempo_axis <= cfg.tempo_max)
    mag = np.where(allowed[:, None], mag, -1.0)
    best = np.argmax(mag, axis=0)
    coef = tgram.values[best, np.arange(n_frames)]
    active = np.abs(coef) > 0
    if not np.any(active):
        return PlpCurve(np.zeros(n_frames), tgram.frame_rate)

    # unit-amplitude kernels: only frequency and phase survive
    phase = np.angle(coef)
    m = np.arange(w)
    window = signal.get_window("hann", w, fftbins=True)
    kernels = window * np.cos(2 * np.pi * best[:, None] * m[None, :] / w + phase[:, None])
    kernels[~active] = 0.0

    # kernel t covers samples t - w/2 .. t + w/2 - 1
    acc = np.zeros(n_frames + w)
    norm = np.zeros(n_frames + w)
    for j in range(w):
        acc[j:j + n_frames] += kernels[:, j]
        norm[j:j + n_frames] += window[j] ** 2
    pulse = acc[w // 2:w // 2 + n_frames]
    norm = norm[w // 2:w // 2 + n_frames]
    pulse = np.where(norm > 1e-10, pulse / np.maximum(norm, 1e-10), 0.0)
    pulse = np.maximum(pulse, 0.0)
    peak = pulse.max()
    if peak > 0:
        pulse = pulse / peak
    return PlpCurve(pulse, tgram.frame_rate)


def plp_from_clip(clip: AudioClip, cfg: TempogramConfig = TempogramConfig()) -> PlpCurve:
    return plp(fourier_tempogram(onset_strength(clip), cfg), cfg)


def pick_peaks(curve) -> PeakSet:
    """Strict local maxima; a flat-topped maximum reports its leftmost index."""
    x = np.asarray(getattr(curve, "values", curve), dtype=np.float64)
    n = len(x)
    peaks = []
    t = 1
    while t < n - 1:
        if x[t - 1] < x[t]:
            end = t
            while end + 1 < n and x[end + 1] == x[t]:
                end += 1
            if end + 1 < n and x[end + 1] < x[t]:
                peaks.append(t)
            t = end + 1
        else:
            t += 1
    return PeakSet(np.array(peaks, dtype=np.int64), n)


def regularity_check(peaks: PeakSet, tol: float = 0.20) -> RegularityReport:
    if len(peaks) < 3:
        return RegularityReport(float("nan"), float("inf"), False, "too few peaks")
    ipi = np.diff(peaks.peaks).astype(np.float64)
    median = float(np.median(ipi))
    deviation = float(np.max(np.abs(ipi - median)) / median)
    accepted = deviation <= tol
    return RegularityReport(median, deviation, accepted,
                            "" if accepted else "irregular inter-peak intervals")


def write_plp_csv(path, curve: PlpCurve, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("frame,plp_value\n")
        for t, v in enumerate(curve.values):
            fh.write(f"{t},{v:.6f}\n")


def write_peaks_csv(path, peaks: PeakSet, frame_rate: float = FPS, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("peak_index,frame,time_s\n")
        for k, t in enumerate(peaks.peaks):
            fh.write(f"{k},{t},{t / frame_rate:.3f}\n")


def write_plp_svg(path, curve: PlpCurve, peaks: PeakSet, width: int = 1200, height: int = 240):
    """Minimal SVG plot of the curve with peak markers."""
    n = max(len(curve) - 1, 1)
    xs = np.arange(len(curve)) * (width / n)
    ys = height - 10 - curve.values * (height - 20)
    path_d = " ".join(f"{'M' if i == 0 else 'L'}{x:.1f},{y:.1f}" for i, (x, y) in enumerate(zip(xs, ys)))
    marks = "".join(f'<circle cx="{xs[p]:.1f}" cy="{ys[p]:.1f}" r="3" fill="red"/>' for p in peaks.peaks)
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
                 f'<path d="{path_d}" fill="none" stroke="black" stroke-width="1"/>{marks}</svg>\n')
