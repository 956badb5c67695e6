"""Audio ingestion and log-mel features on a 20 ms frame grid.

All audio is brought to 16 kHz mono before analysis. Features use a
centered STFT (reflect padding), so frame ``t`` is centered on sample
``t * hop`` and the frame rate is ``sample_rate / hop`` (50 fps by default).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


class AudioError(ValueError):
    """Raised for unreadable, unsupported or empty audio."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("AudioClip expects mono samples")
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("non-finite audio samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontEndConfig:
    n_mels: int = 128
    window: int = 2048
    hop: int = 320
    sample_rate: int = SAMPLE_RATE
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.window < self.hop:
            raise ValueError("window must be >= hop")
        if self.sample_rate % self.hop:
            raise ValueError("hop must divide the sample rate into a whole frame rate")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class LogMelFrames:
    frames: np.ndarray
    frame_rate: float = 50.0
    clip_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("non-finite log-mel values")

    def __len__(self):
        return self.frames.shape[0]

    def frame_times(self) -> np.ndarray:
        return np.arange(len(self)) / self.frame_rate


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("NormStats.std must be positive")


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise AudioError(f"unsupported sample format {data.dtype}")


def resample(samples: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser, beta 8.6, 64 taps per phase)."""
    if sr_in == sr_out:
        return np.asarray(samples, dtype=np.float64)
    g = math.gcd(int(sr_in), int(sr_out))
    up, down = sr_out // g, sr_in // g
    ratio = max(up, down)
    taps = signal.firwin(RESAMPLE_TAPS * ratio + 1, 1.0 / ratio,
                         window=("kaiser", KAISER_BETA))
    return signal.resample_poly(samples, up, down, window=taps * up)


def load_audio(path, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"{path} contains no audio")
    audio = _to_float(data)
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    audio = np.clip(resample(audio, sr, sample_rate), -1.0, 1.0)
    return AudioClip(audio, sample_rate, clip_id=path.stem)


def save_audio(path, clip: AudioClip):
    """Write a clip as 16-bit PCM WAV."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(Path(path), clip.sample_rate, pcm)


def stft(samples: np.ndarray, window: int = 2048, hop: int = 320) -> np.ndarray:
    """Centered Hann STFT with reflect padding, shape (frames, window // 2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < window:
        raise AudioError(f"clip of {len(samples)} samples is shorter than one window ({window})")
    padded = np.pad(samples, window // 2, mode="reflect")
    n_frames = 1 + (len(padded) - window) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, window)[::hop][:n_frames]
    return np.fft.rfft(frames * signal.get_window("hann", window, fftbins=True), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: FrontEndConfig) -> np.ndarray:
    """n_mels + 2 HTK-mel spaced edge frequencies in Hz."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_filterbank(cfg: FrontEndConfig) -> np.ndarray:
    """Triangular HTK filterbank with unit peaks, shape (n_mels, window // 2 + 1)."""
    edges = mel_band_edges(cfg)
    freqs = np.fft.rfftfreq(cfg.window, 1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(clip: AudioClip, cfg: FrontEndConfig = FrontEndConfig()) -> LogMelFrames:
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(f"expected {cfg.sample_rate} Hz audio, got {clip.sample_rate}")
    power = np.abs(stft(clip.samples, cfg.window, cfg.hop)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return LogMelFrames(np.log1p(mel), cfg.frame_rate, clip.clip_id)


def fit_norm(corpus) -> NormStats:
    """Per-bin mean and std pooled over every frame of every clip."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot fit normalization on an empty corpus")
    pooled = np.concatenate([np.asarray(f.frames, dtype=np.float64) for f in corpus], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    dead = std <= 1e-12
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} zero-variance mel bins; using std = 1 for them")
        std = np.where(dead, 1.0, std)
    return NormStats(mean, std)


def apply_norm(frames: LogMelFrames, stats: NormStats) -> LogMelFrames:
    return LogMelFrames((frames.frames - stats.mean) / stats.std, frames.frame_rate, frames.clip_id)


def write_frames_csv(path, frames: LogMelFrames):
    n_bins = frames.frames.shape[1]
    with open(path, "w") as fh:
        fh.write("frame," + ",".join(f"bin_{i}" for i in range(n_bins)) + "\n")
        for t, row in enumerate(frames.frames):
            fh.write(f"{t}," + ",".join(f"{v:.6f}" for v in row) + "\n")
