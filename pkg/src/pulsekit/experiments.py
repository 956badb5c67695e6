"""Experiment harnesses: few-shot fine-tuning and the desk-scale SSL comparison."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SynthSpec, assign_fold, parse_annotations, synth_clip
from .encoder import EncoderConfig
from .evaluation import EvalResult, evaluate, mean_result
from .frontend import FrontEndConfig, load_audio
from .mining import derive_seed
from .training import (Checkpoint, ClipFeatures, FinetuneConfig, PretrainConfig, finetune,
                       labeled_features, predict_track, pretrain, pretrain_features)
from .dbn import StateSpace

log = logging.getLogger(__name__)

METRICS = ("f1", "cmlc", "cmlt", "amlc", "amlt")


def evaluate_checkpoint(ckpt: Checkpoint, feats) -> list:
    """Per-track (clip_id, EvalResult) on the original (unstretched) features."""
    model = ckpt.build_beat_model()
    space = StateSpace(ckpt.dbn_cfg)
    out = []
    for f in feats:
        _, beats = predict_track(ckpt, f, model, space)
        out.append((f.clip_id, evaluate(beats, f.beats)))
    return out


def summarize(results) -> dict:
    arr = {k: np.array([getattr(r, k) for r in results]) for k in METRICS}
    return {k: {"mean": float(v.mean()), "std": float(v.std())} for k, v in arr.items()}


def load_labeled(manifest: DatasetManifest, fe_cfg: FrontEndConfig = FrontEndConfig(),
                 variants: int = 0, seed: int = 0) -> dict:
    """clip_id -> list of ClipFeatures (original first) for annotated entries."""
    out = {}
    for e in manifest:
        if e.annotation_path is None:
            continue
        clip = load_audio(manifest.resolve(e.audio_path))
        clip.clip_id = e.clip_id
        beats = parse_annotations(manifest.resolve(e.annotation_path)).times
        out[e.clip_id] = labeled_features(clip, beats, fe_cfg, variants, seed)
    return out


def split_folds(manifest: DatasetManifest, test_fold: int = 0, val_fold: int = 1,
                n_folds: int = 8, seed: int = 0):
    """Partition clip ids into (train, valid, test) from stored or hashed folds."""
    train, valid, test = [], [], []
    for e in manifest:
        fold = e.fold if e.fold is not None else assign_fold(e.clip_id, n_folds, seed)
        (test if fold == test_fold else valid if fold == val_fold else train).append(e.clip_id)
    return train, valid, test


def few_shot_run(ckpt: Checkpoint, feats: dict, train_ids, val_ids, test_ids, k: int,
                 variations: int = 10, cfg: FinetuneConfig = FinetuneConfig(), seed: int = 0) -> dict:
    """Fine-tune on ``variations`` random k-subsets of the training fold.

    Each variation keeps its best-validation-F1 checkpoint; the report holds
    per-variation test metrics and their mean / std.
    """
    train_ids = sorted(train_ids)
    if k > len(train_ids):
        raise ValueError(f"k = {k} exceeds the {len(train_ids)} training tracks")
    val = [feats[i][0] for i in sorted(val_ids)]
    test = [feats[i][0] for i in sorted(test_ids)]
    runs = []
    for v in range(variations):
        rng = np.random.default_rng(derive_seed(seed, "few-shot", k, v))
        subset = sorted(rng.choice(train_ids, size=k, replace=False).tolist())
        tuned = finetune(ckpt, [feats[i] for i in subset], val, replace(cfg, seed=derive_seed(seed, "ft", k, v) % 2**31))
        results = evaluate_checkpoint(tuned, test)
        runs.append({"variation": v, "subset": subset, "val_f1": tuned.val_f1, "best_step": tuned.step,
                     "test": asdict(mean_result(r for _, r in results))})
    summary = summarize([EvalResult(**r["test"]) for r in runs])
    best = max(runs, key=lambda r: (r["val_f1"] if r["val_f1"] is not None else -1.0))
    return {"k": k, "variations": variations, "seed": seed, "runs": runs, "summary": summary,
            "best_by_validation": best["variation"]}


def write_report(path_json, report: dict):
    path_json = Path(path_json)
    with open(path_json, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    runs = report.get("runs", [])
    with open(path_json.with_suffix(".csv"), "w") as fh:
        fh.write("variation,val_f1," + ",".join(METRICS) + "\n")
        for r in runs:
            fh.write(f"{r['variation']},{r['val_f1'] if r['val_f1'] is not None else ''},"
                     + ",".join(f"{r['test'][m]:.6f}" for m in METRICS) + "\n")
        if "summary" in report:
            fh.write("MEAN,," + ",".join(f"{report['summary'][m]['mean']:.6f}" for m in METRICS) + "\n")
            fh.write("STD,," + ",".join(f"{report['summary'][m]['std']:.6f}" for m in METRICS) + "\n")


# ---------------------------------------------------------------- desk experiment

@dataclass
class DeskConfig:
    """Desk-scale SSL-vs-scratch comparison on synthetic rhythm clips."""
    pretrain_clips: int = 200
    train_clips: int = 4
    val_clips: int = 8
    test_clips: int = 50
    duration_s: float = 20.0
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(
        bpm_min=70.0, bpm_max=160.0, subdivision=True, background="pad", distractor_rate=0.5,
        tempo_drift="piecewise", drift_fraction=0.5, noise_level=0.01))
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainConfig = PretrainConfig(steps=2000, warmup_steps=200, decay_steps=1800,
                                              segment_s=10.0, batch_clips=4, eval_every=200,
                                              val_fraction=0.05, stretch_variants=1)
    finetune: FinetuneConfig = FinetuneConfig(lr=1e-4, steps=600, segment_s=10.0, batch_clips=4,
                                              eval_every=50, stretch_variants=2)
    seed: int = 0


def desk_experiment(cfg: DeskConfig = DeskConfig(), progress=None) -> dict:
    """Pre-train on synthetic clips, fine-tune with few labels, compare to random init."""
    say = progress or (lambda msg: log.info(msg))
    timings = {}
    t0 = time.perf_counter()
    fe_cfg = FrontEndConfig()
    unl_spec = replace(cfg.synth, num_clips=cfg.pretrain_clips, duration_s=cfg.duration_s,
                       seed=derive_seed(cfg.seed, "unlabeled") % 2**31)
    pre_feats = [pretrain_features(synth_clip(unl_spec, i)[0], fe_cfg, cfg.pretrain.stretch_variants,
                                   cfg.seed) for i in range(cfg.pretrain_clips)]
    timings["pretrain_features_s"] = time.perf_counter() - t0
    say(f"prepared {len(pre_feats)} unlabeled clips in {timings['pretrain_features_s']:.0f}s")

    t1 = time.perf_counter()
    ssl = pretrain(None, replace(cfg.pretrain, seed=cfg.seed), cfg.encoder, fe_cfg=fe_cfg,
                   features=pre_feats,
                   callback=lambda s, l: say(f"pretrain step {s} loss {l:.4f}") if s % 100 == 0 else None)
    timings["pretrain_s"] = time.perf_counter() - t1
    say(f"pre-training done in {timings['pretrain_s']:.0f}s, best val loss {ssl.val_loss:.4f} at step {ssl.step}")

    lab_spec = replace(cfg.synth, tempo_drift=cfg.synth.tempo_drift, duration_s=cfg.duration_s,
                       seed=derive_seed(cfg.seed, "labeled") % 2**31)
    n_lab = cfg.train_clips + cfg.val_clips + cfg.test_clips
    t2 = time.perf_counter()
    lab = []
    for i in range(n_lab):
        clip, beats, _ = synth_clip(lab_spec, i)
        variants = cfg.finetune.stretch_variants if i < cfg.train_clips else 0
        lab.append(labeled_features(clip, beats, fe_cfg, variants, cfg.seed))
    train = lab[:cfg.train_clips]
    val = [v[0] for v in lab[cfg.train_clips:cfg.train_clips + cfg.val_clips]]
    test = [v[0] for v in lab[cfg.train_clips + cfg.val_clips:]]
    timings["labeled_features_s"] = time.perf_counter() - t2

    random_ckpt = Checkpoint.random_init(cfg.encoder, ssl.norm, seed=cfg.seed)
    ft_cfg = replace(cfg.finetune, seed=cfg.seed)
    report = {"config": _jsonable(asdict(cfg)), "pretrain": {"best_step": ssl.step, "val_loss": ssl.val_loss,
                                                             "val_curve": ssl.history.get("val_loss")}}
    for name, start in (("ssl", ssl), ("random", random_ckpt)):
        t3 = time.perf_counter()
        tuned = finetune(start, train, val, ft_cfg)
        results = evaluate_checkpoint(tuned, test)
        timings[f"finetune_{name}_s"] = time.perf_counter() - t3
        report[name] = {"val_f1": tuned.val_f1, "best_step": tuned.step,
                        "test": asdict(mean_result(r for _, r in results)),
                        "test_f1_per_track": [r.f1 for _, r in results]}
        say(f"{name}: test F1 {report[name]['test']['f1']:.3f} (val {tuned.val_f1:.3f} @ {tuned.step})")
    # random-init pretext loss on the same validation segments as the SSL encoder
    report["pretrain"]["val_loss_random_init"] = ssl.history["val_loss"][0] if ssl.history.get("val_loss") else None
    timings["total_s"] = time.perf_counter() - t0
    report["timings"] = timings
    report["ssl_checkpoint"] = ssl
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
