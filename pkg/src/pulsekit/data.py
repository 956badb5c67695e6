"""Dataset manifests, beat annotation files and a synthetic rhythm corpus.

Synthetic clips place percussive events at exactly known beat times, so
their annotations are ground truth. Drifting-tempo clips are rendered at a
constant tempo and then time-stretched; the annotation is the constant
grid pushed through the same time map.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .augment import StretchSpec, random_piecewise_spec, remap_times, stretch
from .frontend import SAMPLE_RATE, AudioClip, save_audio
from .mining import derive_seed


@dataclass
class BeatAnnotation:
    times: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("annotation times must be strictly increasing")
        if np.any(self.times < 0):
            raise ValueError("annotation times must be non-negative")

    def __len__(self):
        return len(self.times)


class AnnotationError(ValueError):
    pass


def parse_annotations(path) -> BeatAnnotation:
    """Read ``time [index]`` lines; ``#`` comments and blank lines are skipped."""
    times, indices = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                times.append(float(parts[0]))
                if len(parts) > 1:
                    indices.append(int(float(parts[1])))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: malformed line {line!r}") from None
            if len(parts) > 2:
                raise AnnotationError(f"{path}:{lineno}: too many fields")
            if len(times) > 1 and times[-1] <= times[-2]:
                raise AnnotationError(f"{path}:{lineno}: non-increasing beat time {times[-1]}")
    if indices and len(indices) != len(times):
        raise AnnotationError(f"{path}: beat indices given on some lines only")
    return BeatAnnotation(np.array(times), np.array(indices) if indices else None)


def write_annotations(path, times, indices=None, header: str | None = None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for i, t in enumerate(times):
            fh.write(f"{t:.6f}" + (f" {indices[i]}" if indices is not None else "") + "\n")


@dataclass
class ManifestEntry:
    clip_id: str
    audio_path: str
    annotation_path: str | None = None
    split: str | None = None
    fold: int | None = None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate clip ids in manifest")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, predicate) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if predicate(e)], self.root)

    def save(self, path):
        path = Path(path)
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    entries.append(ManifestEntry(**json.loads(line)))
        manifest = cls(entries, path.parent)
        for e in entries:
            if not manifest.resolve(e.audio_path).exists():
                raise FileNotFoundError(f"{e.clip_id}: missing audio {e.audio_path}")
        return manifest


def assign_fold(clip_id: str, n_folds: int = 8, seed: int = 0) -> int:
    return derive_seed(seed, "fold", clip_id) % n_folds


@dataclass(frozen=True)
class SynthSpec:
    num_clips: int = 10
    duration_s: float = 20.0
    bpm_min: float = 60.0
    bpm_max: float = 180.0
    timbre: str = "noise"  # "impulse" | "noise"
    tempo_drift: str = "none"  # "none" | "piecewise"
    drift_fraction: float = 1.0
    background: str = "none"  # "none" | "pad"
    subdivision: bool = False  # add quieter off-beat eighth notes
    distractor_rate: float = 0.0  # random extra onsets per second
    noise_level: float = 0.0
    first_beat_s: float | None = None  # None: uniform within the first beat period
    seed: int = 0

    def __post_init__(self):
        if not 40.0 <= self.bpm_min <= self.bpm_max <= 270.0:
            raise ValueError("bpm range must lie within [40, 270]")
        if self.timbre not in ("impulse", "noise"):
            raise ValueError(f"unknown timbre {self.timbre!r}")
        if self.tempo_drift not in ("none", "piecewise"):
            raise ValueError(f"unknown tempo drift {self.tempo_drift!r}")
        if self.background not in ("none", "pad"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.first_beat_s is not None and self.first_beat_s < 0:
            raise ValueError("first_beat_s must be non-negative")


def _burst(rng, timbre: str, color: tuple, length: int) -> np.ndarray:
    if timbre == "impulse":
        out = np.zeros(length)
        out[0] = 1.0
        return out
    centre, decay = color
    noise = rng.standard_normal(length)
    lo, hi = max(centre / 2.0, 40.0), min(centre * 2.0, 7800.0)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    burst = signal.sosfilt(sos, noise) * np.exp(-np.arange(length) / (decay * SAMPLE_RATE))
    return burst / (np.abs(burst).max() + 1e-12)


def _pad(rng, duration: float, beat_period: float) -> np.ndarray:
    """Soft sustained chords changing every four beats."""
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    bar = 4 * beat_period
    for start in np.arange(0.0, duration, bar):
        root = 110.0 * 2 ** (rng.integers(0, 12) / 12)
        seg = (t >= start) & (t < start + bar)
        env = np.minimum(1.0, (t[seg] - start) / 0.3)  # slow attack: no sharp onset
        for ratio in (1.0, 1.26, 1.5):
            out[seg] += env * np.sin(2 * np.pi * root * ratio * t[seg] + rng.uniform(0, 2 * np.pi))
    return out / 3.0


def render_clip(spec: SynthSpec, rng: np.random.Generator, duration: float, bpm: float):
    """Constant-tempo clip; returns (samples, beat_times)."""
    period = 60.0 / bpm
    n = int(round(duration * SAMPLE_RATE))
    x = np.zeros(n + SAMPLE_RATE)
    first = rng.uniform(0.0, period) if spec.first_beat_s is None else spec.first_beat_s
    beats = np.arange(first, duration, period)
    beat_color = (rng.uniform(80.0, 4000.0), rng.uniform(0.02, 0.08))
    off_color = (rng.uniform(80.0, 4000.0), rng.uniform(0.01, 0.05))
    burst_len = int(0.15 * SAMPLE_RATE)

    def add(times, color, gain):
        for t in times:
            s = int(round(t * SAMPLE_RATE))
            x[s:s + burst_len] += gain * _burst(rng, spec.timbre, color, burst_len)

    add(beats, beat_color, 0.5)
    if spec.subdivision:
        offbeats = beats + period / 2
        add(offbeats[offbeats < duration], off_color, 0.5 * rng.uniform(0.3, 0.7))
    if spec.distractor_rate > 0:
        count = rng.poisson(spec.distractor_rate * duration)
        add(np.sort(rng.uniform(0, duration, count)), off_color, 0.5 * rng.uniform(0.2, 0.6))
    x = x[:n]
    if spec.background == "pad":
        x += 0.1 * _pad(rng, duration, period)
    if spec.noise_level > 0:
        x += spec.noise_level * rng.standard_normal(n)
    peak = np.abs(x).max()
    if peak > 0.99:
        x *= 0.99 / peak
    return x, beats


def synth_clip(spec: SynthSpec, index: int):
    """Render clip ``index`` of a corpus; returns (AudioClip, beat_times, info)."""
    rng = np.random.default_rng(derive_seed(spec.seed, "synth", index))
    clip_id = f"synth_{index:04d}"
    bpm = float(rng.uniform(spec.bpm_min, spec.bpm_max))
    drifting = spec.tempo_drift == "piecewise" and rng.uniform() < spec.drift_fraction
    info = {"bpm": bpm, "drift": None}
    if not drifting:
        x, beats = render_clip(spec, rng, spec.duration_s, bpm)
        return AudioClip(x, SAMPLE_RATE, clip_id), beats, info
    base_duration = spec.duration_s / 0.8 + 0.5
    x, beats = render_clip(spec, rng, base_duration, bpm)
    drift = random_piecewise_spec(rng, base_duration)
    clip, tmap = stretch(AudioClip(x, SAMPLE_RATE, clip_id), drift)
    beats = remap_times(beats, tmap)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    info["drift"] = [list(bp) for bp in drift.breakpoints]
    return AudioClip(clip.samples[:n], SAMPLE_RATE, clip_id), beats[beats < spec.duration_s], info


def synth_drift_clip(spec: SynthSpec, index: int, drift: StretchSpec):
    """Like ``synth_clip`` but with an explicit tempo-drift spec."""
    rng = np.random.default_rng(derive_seed(spec.seed, "synth", index))
    bpm = float(rng.uniform(spec.bpm_min, spec.bpm_max))
    x, beats = render_clip(spec, rng, spec.duration_s, bpm)
    clip, tmap = stretch(AudioClip(x, SAMPLE_RATE, f"synth_{index:04d}"), drift)
    return clip, remap_times(beats, tmap), tmap


def synth_corpus(spec: SynthSpec, out_dir, n_folds: int = 8) -> DatasetManifest:
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(spec.num_clips):
        clip, beats, _ = synth_clip(spec, i)
        wav = f"{clip.clip_id}.wav"
        ann = f"{clip.clip_id}.beats"
        save_audio(out_dir / wav, clip)
        write_annotations(out_dir / ann, beats)
        entries.append(ManifestEntry(clip.clip_id, wav, ann, None,
                                     assign_fold(clip.clip_id, n_folds, spec.seed)))
    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    with open(out_dir / "synth_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, sort_keys=True, indent=1)
    return manifest
