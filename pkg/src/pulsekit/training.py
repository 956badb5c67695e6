"""Contrastive pre-training, supervised fine-tuning and chunked inference."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import checkpoint as pkt
from .augment import StretchSpec, random_piecewise_spec, remap_frames, stretch
from .dbn import DbnConfig, StateSpace, chunk_starts, decode, stitch_chunks
from .encoder import BeatModel, Encoder, EncoderConfig, init_encoder
from .frontend import AudioClip, FrontEndConfig, NormStats, apply_norm, fit_norm, log_mel
from .loss import LossConfig, batch_loss
from .mining import MiningConfig, derive_seed, mine_segment
from .plp import PeakSet, TempogramConfig, pick_peaks, plp_from_clip, regularity_check

log = logging.getLogger(__name__)

TARGET_WINDOW = (0.25, 0.5, 1.0, 0.5, 0.25)
LONG_TRACK_S = 45.0
CHUNK_S = 20.0
OVERLAP_S = 5.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    lr_init: float = 1e-4
    lr_peak: float = 5e-4
    warmup_steps: int = 200
    decay_steps: int = 2000
    steps: int = 2000
    epochs: int | None = None  # overrides ``steps`` when set
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip_norm: float = 1.0
    batch_clips: int = 4
    segment_s: float = 20.0
    val_fraction: float = 0.05
    eval_every: int = 100
    stretch_variants: int = 1  # time-varying stretched copies per clip
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_init, self.lr_peak) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    probe: str = "linear"
    lr: float = 1e-5
    lr_power: float = 1.0
    steps: int = 200
    batch_clips: int = 4
    segment_s: float = 20.0
    target_window: tuple = TARGET_WINDOW
    freeze_encoder: bool = False
    eval_every: int = 50
    grad_clip_norm: float = 1.0
    stretch_variants: int = 0  # constant-factor stretched copies per clip
    seed: int = 0

    def __post_init__(self):
        if self.probe not in ("linear", "mlp2"):
            raise ValueError(f"unknown probe {self.probe!r}")


def pretrain_lr(step: int, cfg: PretrainConfig) -> float:
    """Linear warm-up to the peak, then linear decay back to the initial rate."""
    if step < cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup_steps
    done = min(1.0, (step - cfg.warmup_steps) / max(cfg.decay_steps, 1))
    return cfg.lr_peak - (cfg.lr_peak - cfg.lr_init) * done


def finetune_lr(step: int, cfg: FinetuneConfig) -> float:
    return cfg.lr * (1.0 - min(step, cfg.steps) / max(cfg.steps, 1)) ** cfg.lr_power


def widen_targets(beat_frames, length: int, window=TARGET_WINDOW) -> np.ndarray:
    """Spread each beat over neighbouring frames; overlaps keep the maximum."""
    window = np.asarray(window, dtype=np.float64)
    half = len(window) // 2
    out = np.zeros(length)
    for b in np.asarray(beat_frames, dtype=np.int64):
        if not 0 <= b < length:
            raise ValueError(f"beat frame {b} outside [0, {length})")
        lo, hi = max(0, b - half), min(length, b + half + 1)
        out[lo:hi] = np.maximum(out[lo:hi], window[lo - b + half: hi - b + half])
    return out


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    encoder_cfg: EncoderConfig
    encoder_state: dict
    norm: NormStats
    frontend_cfg: FrontEndConfig = FrontEndConfig()
    layer_logits: np.ndarray | None = None
    probe_kind: str | None = None
    probe_state: dict | None = None
    dbn_cfg: DbnConfig = DbnConfig()
    step: int = 0
    val_loss: float | None = None
    val_f1: float | None = None
    kind: str = "pretrain"
    seed: int | None = None
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        # round to the float32 precision of the checkpoint file so a reload is exact
        self.norm = NormStats(self.norm.mean.astype(np.float32), self.norm.std.astype(np.float32))

    @classmethod
    def from_models(cls, encoder: Encoder, norm: NormStats, beat_model: BeatModel | None = None,
                    **kwargs) -> "Checkpoint":
        state = {k: v.detach().float().numpy().copy() for k, v in encoder.state_dict().items()}
        ckpt = cls(encoder.cfg, state, norm, **kwargs)
        if beat_model is not None:
            ckpt.layer_logits = beat_model.layer_weights.logits.detach().float().numpy().copy()
            ckpt.probe_kind = beat_model.probe.kind
            ckpt.probe_state = {k: v.detach().float().numpy().copy()
                                for k, v in beat_model.probe.state_dict().items()}
        return ckpt

    @classmethod
    def random_init(cls, encoder_cfg: EncoderConfig, norm: NormStats, seed: int = 0) -> "Checkpoint":
        return cls.from_models(init_encoder(encoder_cfg, seed), norm, kind="random")

    def build_encoder(self, dtype=torch.float32) -> Encoder:
        enc = Encoder(self.encoder_cfg)
        enc.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.encoder_state.items()})
        return enc.to(dtype)

    def build_beat_model(self, probe_kind: str | None = None, seed: int = 0) -> BeatModel:
        torch.manual_seed(seed)
        model = BeatModel(self.build_encoder(), probe_kind or self.probe_kind or "linear")
        if self.probe_state is not None and (probe_kind is None or probe_kind == self.probe_kind):
            model.probe.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.probe_state.items()})
            model.layer_weights.logits.data = torch.from_numpy(np.array(self.layer_logits))
        return model

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "encoder": asdict(self.encoder_cfg),
            "frontend": asdict(self.frontend_cfg),
            "dbn": asdict(self.dbn_cfg),
            "probe": self.probe_kind,
            "step": self.step,
            "val_loss": self.val_loss,
            "val_f1": self.val_f1,
            "seed": self.seed,
            "history": self.history,
        }

    def save(self, path):
        tensors = {f"encoder.{k}": v for k, v in self.encoder_state.items()}
        if self.layer_logits is not None:
            tensors["layer_weights.logits"] = self.layer_logits
        for k, v in (self.probe_state or {}).items():
            tensors[f"probe.{k}"] = v
        tensors["norm.mean"] = self.norm.mean
        tensors["norm.std"] = self.norm.std
        pkt.write_pkt(path, tensors, self.meta())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = pkt.read_pkt(path)
        if "encoder" not in meta:
            raise pkt.CheckpointError(f"{path}: missing encoder metadata")
        strip = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        probe = strip("probe.")
        return cls(
            encoder_cfg=EncoderConfig(**meta["encoder"]),
            encoder_state=strip("encoder."),
            norm=NormStats(tensors["norm.mean"], tensors["norm.std"]),
            frontend_cfg=FrontEndConfig(**meta["frontend"]),
            layer_logits=tensors.get("layer_weights.logits"),
            probe_kind=meta.get("probe"),
            probe_state=probe or None,
            dbn_cfg=DbnConfig(**meta["dbn"]),
            step=meta.get("step", 0),
            val_loss=meta.get("val_loss"),
            val_f1=meta.get("val_f1"),
            kind=meta.get("kind", "pretrain"),
            seed=meta.get("seed"),
            history=meta.get("history", {}),
        )


# ---------------------------------------------------------------- features

@dataclass
class ClipFeatures:
    """Log-mel frames of one (possibly stretched) clip plus its pulse / beat info."""
    clip_id: str
    mel: np.ndarray
    peaks: np.ndarray | None = None  # PLP peak frames on this clip's time axis
    source_peaks: np.ndarray | None = None  # the same peaks before stretching
    beats: np.ndarray | None = None  # annotated beat times (s) on this clip's time axis

    def __len__(self):
        return self.mel.shape[0]


def pretrain_features(clip: AudioClip, fe_cfg: FrontEndConfig, variants: int, seed: int,
                      tg_cfg: TempogramConfig = TempogramConfig()) -> list[ClipFeatures]:
    """Original clip plus time-varying stretched copies.

    PLP peaks are computed once on the unstretched audio and pushed through
    each copy's time map.
    """
    peaks = pick_peaks(plp_from_clip(clip, tg_cfg)).peaks
    mel = log_mel(clip, fe_cfg).frames
    out = [ClipFeatures(clip.clip_id, mel.astype(np.float32), peaks, peaks)]
    rng = np.random.default_rng(derive_seed(seed, "stretch", clip.clip_id))
    fps = fe_cfg.frame_rate
    for v in range(variants):
        if clip.duration <= 4.0:
            break
        y, tmap = stretch(clip, random_piecewise_spec(rng, clip.duration))
        ymel = log_mel(y, fe_cfg).frames
        src = peaks[peaks / fps <= tmap.duration]
        moved = np.round(tmap(src / fps) * fps).astype(np.int64)
        keep = moved < len(ymel)
        out.append(ClipFeatures(f"{clip.clip_id}~{v}", ymel.astype(np.float32), moved[keep], src[keep]))
    return out


def labeled_features(clip: AudioClip, beats, fe_cfg: FrontEndConfig, variants: int = 0,
                     seed: int = 0) -> list[ClipFeatures]:
    """Original labeled clip plus constant-factor stretched copies."""
    beats = np.asarray(beats, dtype=np.float64)
    out = [ClipFeatures(clip.clip_id, log_mel(clip, fe_cfg).frames.astype(np.float32), beats=beats)]
    rng = np.random.default_rng(derive_seed(seed, "ft-stretch", clip.clip_id))
    for v in range(variants):
        spec = StretchSpec.constant(rng.uniform(0.8, 1.2))
        y, tmap = stretch(clip, spec)
        moved = tmap(beats[beats <= tmap.duration])
        out.append(ClipFeatures(f"{clip.clip_id}~{v}", log_mel(y, fe_cfg).frames.astype(np.float32),
                                beats=moved))
    return out


def _normalize(mel: np.ndarray, norm: NormStats) -> np.ndarray:
    return ((mel - norm.mean) / norm.std).astype(np.float32)


# ---------------------------------------------------------------- pre-training

def _segment(feat: ClipFeatures, start: int, seg: int):
    mask = (feat.peaks >= start) & (feat.peaks < start + seg)
    return feat.peaks[mask] - start, feat.source_peaks[mask]


def _sample_segment(pool, seg, mining, rng, max_tries=50):
    """Draw (features, start, mining batch) from a random accepted segment."""
    for _ in range(max_tries):
        variants = pool[int(rng.integers(len(pool)))]
        feat = variants[int(rng.integers(len(variants)))]
        start = int(rng.integers(0, len(feat) - seg + 1))
        peaks, source = _segment(feat, start, seg)
        if not regularity_check(PeakSet(source, int(source.max(initial=0)) + 1)).accepted:
            continue
        batch = mine_segment(PeakSet(peaks, seg), seg, mining, rng, clip_id=feat.clip_id)
        if len(batch):
            return feat, start, batch
    return None


def _validation_segments(pool, seg, mining, seed):
    """Deterministic (features, start, batch) triples for the validation loss."""
    out = []
    for variants in pool:
        feat = variants[0]
        start = (len(feat) - seg) // 2
        peaks, source = _segment(feat, start, seg)
        if not regularity_check(PeakSet(source, int(source.max(initial=0)) + 1)).accepted:
            continue
        batch = mine_segment(PeakSet(peaks, seg), seg, mining,
                             np.random.default_rng(derive_seed(seed, "val", feat.clip_id)),
                             clip_id=feat.clip_id)
        if len(batch):
            out.append((feat, start, batch))
    return out


def contrastive_loss_on(encoder: Encoder, segments, seg, norm, loss_cfg, chunk=8) -> float:
    """Mean NT-Xent over fixed segments with the encoder in eval mode."""
    encoder.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(segments), chunk):
            part = segments[i:i + chunk]
            x = torch.from_numpy(np.stack([_normalize(f.mel[s:s + seg], norm) for f, s, _ in part]))
            z = encoder(x)[-1]
            m = sum(len(b) for _, _, b in part)
            total += float(batch_loss([b for _, _, b in part], z, loss_cfg)) * m
            count += m
    return total / count


def split_validation(items, fraction: float, seed: int):
    n_val = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(items))
    val = [items[i] for i in sorted(order[:n_val])]
    train = [items[i] for i in sorted(order[n_val:])]
    return train, val


def pretrain(clips, cfg: PretrainConfig = PretrainConfig(), encoder_cfg: EncoderConfig = EncoderConfig(),
             mining: MiningConfig | None = None, loss_cfg: LossConfig = LossConfig(),
             fe_cfg: FrontEndConfig = FrontEndConfig(), features=None, norm: NormStats | None = None,
             callback=None) -> Checkpoint:
    """Contrastive pre-training on unlabeled clips; returns the best-validation checkpoint.

    ``features`` may carry precomputed ``pretrain_features`` output (one list
    of variants per clip) to skip the audio analysis.
    """
    torch.manual_seed(cfg.seed)
    seg = int(round(cfg.segment_s * fe_cfg.frame_rate))
    mining = mining or MiningConfig(segment_frames=seg)
    if features is None:
        features = [pretrain_features(c, fe_cfg, cfg.stretch_variants, cfg.seed) for c in clips]
    features = [v for v in features if len(v[0]) >= seg]
    if not features:
        raise TrainingError("no clip is at least one segment long")
    train_pool, val_pool = split_validation(features, cfg.val_fraction, cfg.seed)
    if norm is None:
        norm = fit_norm(_Frames(v[0].mel) for v in train_pool)

    val_segments = _validation_segments(val_pool, seg, mining, cfg.seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain"))
    if _sample_segment(train_pool, seg, mining, np.random.default_rng(0), max_tries=500) is None:
        raise TrainingError("no training segment passes the regularity filter")

    encoder = init_encoder(encoder_cfg, cfg.seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2))
    steps = cfg.steps
    if cfg.epochs is not None:
        steps = cfg.epochs * math.ceil(len(train_pool) / cfg.batch_clips)
    if cfg.warmup_steps >= steps:
        log.warning("warm-up (%d) does not finish within %d steps", cfg.warmup_steps, steps)

    history = {"step": [], "loss": [], "lr": [], "val_step": [], "val_loss": []}
    best = None

    def validate(step):
        nonlocal best
        if not val_segments:
            return
        v = contrastive_loss_on(encoder, val_segments, seg, norm, loss_cfg)
        history["val_step"].append(step)
        history["val_loss"].append(v)
        if best is None or v < best.val_loss:
            best = Checkpoint.from_models(encoder, norm, frontend_cfg=fe_cfg, step=step, val_loss=v)

    validate(0)
    for step in range(steps):
        drawn = [_sample_segment(train_pool, seg, mining, rng) for _ in range(cfg.batch_clips)]
        drawn = [d for d in drawn if d is not None]
        if not drawn:
            raise TrainingError(f"step {step}: could not draw any accepted segment")
        x = torch.from_numpy(np.stack([_normalize(f.mel[s:s + seg], norm) for f, s, _ in drawn]))
        encoder.train()
        z = encoder(x)[-1]
        loss = batch_loss([b for _, _, b in drawn], z, loss_cfg)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (lr {pretrain_lr(step, cfg):.2e}, "
                                f"clips {[f.clip_id for f, _, _ in drawn]})")
        lr = pretrain_lr(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(encoder.parameters(), cfg.grad_clip_norm)
        opt.step()
        history["step"].append(step)
        history["loss"].append(loss.item())
        history["lr"].append(lr)
        if callback:
            callback(step, loss.item())
        if (step + 1) % cfg.eval_every == 0 or step + 1 == steps:
            validate(step + 1)

    final = Checkpoint.from_models(encoder, norm, frontend_cfg=fe_cfg, step=steps,
                                   val_loss=history["val_loss"][-1] if history["val_loss"] else None)
    chosen = best if best is not None else final
    chosen.history = history
    chosen.seed = cfg.seed
    return chosen


class _Frames:
    def __init__(self, frames):
        self.frames = frames


# ---------------------------------------------------------------- fine-tuning

def _beat_targets(feat: ClipFeatures, window, fps):
    frames = np.round(feat.beats * fps).astype(np.int64)
    frames = np.unique(frames[(frames >= 0) & (frames < len(feat))])
    return widen_targets(frames, len(feat), window).astype(np.float32)


def predict_activations(model: BeatModel, norm_mel: np.ndarray, fps: float = 50.0) -> np.ndarray:
    """Sigmoid activations; tracks longer than 45 s run in 20 s chunks with 5 s overlap."""
    n = norm_mel.shape[0]
    model.eval()
    with torch.no_grad():
        if n <= LONG_TRACK_S * fps:
            return torch.sigmoid(model(torch.from_numpy(norm_mel))).double().numpy()
        chunk, overlap = int(CHUNK_S * fps), int(OVERLAP_S * fps)
        acts = [torch.sigmoid(model(torch.from_numpy(norm_mel[s:s + chunk]))).double().numpy()
                for s in chunk_starts(n, chunk, overlap)]
    return stitch_chunks(acts, n, CHUNK_S, OVERLAP_S, fps)


def predict_track(ckpt: Checkpoint, clip, model: BeatModel | None = None, space: StateSpace | None = None):
    """Beat activations and decoded beat times for one clip (AudioClip or ClipFeatures)."""
    model = model or ckpt.build_beat_model()
    mel = clip.mel if isinstance(clip, ClipFeatures) else log_mel(clip, ckpt.frontend_cfg).frames
    act = predict_activations(model, _normalize(mel, ckpt.norm), ckpt.frontend_cfg.frame_rate)
    return act, decode(act, ckpt.dbn_cfg, space)


def mean_f1(ckpt, model, feats, space=None) -> float:
    from .evaluation import f_measure
    scores = [f_measure(predict_track(ckpt, f, model, space)[1], f.beats) for f in feats]
    return float(np.mean(scores))


def finetune(ckpt: Checkpoint, train_feats, val_feats, cfg: FinetuneConfig = FinetuneConfig(),
             callback=None) -> Checkpoint:
    """Fine-tune encoder + layer weights + probe with BCE on widened targets.

    ``train_feats``: list of per-clip variant lists (``labeled_features``);
    ``val_feats``: list of ``ClipFeatures`` used for F1-based model selection.
    """
    if not train_feats:
        raise TrainingError("empty labeled set")
    fps = ckpt.frontend_cfg.frame_rate
    seg = int(round(cfg.segment_s * fps))
    model = ckpt.build_beat_model(cfg.probe, seed=cfg.seed)
    if cfg.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "finetune"))
    targets = {id(f): _beat_targets(f, cfg.target_window, fps) for v in train_feats for f in v}
    space = StateSpace(ckpt.dbn_cfg)
    history = {"step": [], "loss": [], "val_step": [], "val_f1": []}
    best = None

    def validate(step):
        nonlocal best
        if not val_feats:
            return
        f1 = mean_f1(ckpt, model, val_feats, space)
        history["val_step"].append(step)
        history["val_f1"].append(f1)
        if best is None or f1 > best.val_f1:
            best = Checkpoint.from_models(model.encoder, ckpt.norm, model, frontend_cfg=ckpt.frontend_cfg,
                                          dbn_cfg=ckpt.dbn_cfg, step=step, val_f1=f1, kind="finetune")

    if cfg.eval_every:
        validate(0)
    for step in range(cfg.steps):
        xs, ys = [], []
        for _ in range(cfg.batch_clips):
            variants = train_feats[int(rng.integers(len(train_feats)))]
            feat = variants[int(rng.integers(len(variants)))]
            length = min(seg, len(feat))
            start = int(rng.integers(0, len(feat) - length + 1))
            xs.append(_normalize(feat.mel[start:start + length], ckpt.norm))
            ys.append(targets[id(feat)][start:start + length])
        length = min(len(x) for x in xs)
        x = torch.from_numpy(np.stack([v[:length] for v in xs]))
        y = torch.from_numpy(np.stack([v[:length] for v in ys]))
        model.train()
        if cfg.freeze_encoder:
            model.encoder.eval()
        loss = nn.functional.binary_cross_entropy_with_logits(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite fine-tuning loss at step {step}")
        for group in opt.param_groups:
            group["lr"] = finetune_lr(step, cfg)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
        opt.step()
        history["step"].append(step)
        history["loss"].append(loss.item())
        if callback:
            callback(step, loss.item())
        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            validate(step + 1)

    if best is None:
        best = Checkpoint.from_models(model.encoder, ckpt.norm, model, frontend_cfg=ckpt.frontend_cfg,
                                      dbn_cfg=ckpt.dbn_cfg, step=cfg.steps, kind="finetune")
    best.history = history
    best.seed = cfg.seed
    return best
