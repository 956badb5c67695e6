"""Command-line entry point: ``pulsekit <command> [--config FILE] [flags]``.

Exit status is 0 on success, 1 on a usage error (bad flag, missing or
malformed config) and 2 when the command itself fails.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import typing
from pathlib import Path

import numpy as np

log = logging.getLogger("pulsekit")

SECTIONS = ("frontend", "mining", "encoder", "loss", "train", "finetune", "dbn", "synth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config


def _convert(value: str, default, hint):
    text = value.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool) or hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    # optional fields default to None; infer from the text
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config(path) -> dict:
    """Read an INI file into ``{section: {key: raw string}}``."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return {s: dict(parser[s]) for s in parser.sections()}


def build(cls, section: dict | None, **overrides):
    """Instantiate dataclass ``cls`` from config strings plus non-None overrides."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, raw in (section or {}).items():
        if key not in fields:
            raise UsageError(f"unknown {cls.__name__} key {key!r}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        try:
            kwargs[key] = _convert(raw, default, hints.get(key))
        except ValueError as exc:
            raise UsageError(f"{cls.__name__}.{key}: {exc}") from None
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _threads() -> int:
    raw = os.environ.get("PULSEKIT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PULSEKIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("PULSEKIT_THREADS must be >= 1")
    return n


def _header(command: str, seed) -> str:
    return f"pulsekit {command} seed={seed}"


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    from .augment import StretchSpec, random_piecewise_spec, remap_times, stretch
    from .data import SynthSpec, synth_clip, synth_corpus, write_annotations
    from .frontend import save_audio
    from .mining import derive_seed

    spec = build(SynthSpec, cfg.get("synth"), num_clips=args.num_clips, duration_s=args.duration,
                 bpm_min=args.bpm_min, bpm_max=args.bpm_max, timbre=args.timbre,
                 tempo_drift=args.tempo_drift, background=args.background, seed=args.seed)
    out = Path(args.out)
    manifest = synth_corpus(spec, out)
    if args.stretch is not None:
        # stretched copies with remapped annotations, for inspecting the augmentation
        for i, entry in enumerate(manifest):
            clip, beats, _ = synth_clip(spec, i)
            if args.stretch == "piecewise":
                rng = np.random.default_rng(derive_seed(spec.seed, "cli-stretch", entry.clip_id))
                sspec = random_piecewise_spec(rng, clip.duration)
            else:
                sspec = StretchSpec.constant(float(args.stretch))
            y, tmap = stretch(clip, sspec)
            save_audio(out / f"{entry.clip_id}_stretched.wav", y)
            write_annotations(out / f"{entry.clip_id}_stretched.beats", remap_times(beats, tmap),
                              header=f"{_header('synth', spec.seed)} stretch={sspec.breakpoints or sspec.factor}")
    print(f"wrote {len(manifest)} clips to {out}")


def cmd_plp(args, cfg):
    from .frontend import load_audio
    from .plp import TempogramConfig, pick_peaks, plp_from_clip, regularity_check, write_peaks_csv, \
        write_plp_csv, write_plp_svg

    clip = load_audio(args.inp)
    curve = plp_from_clip(clip, TempogramConfig())
    peaks = pick_peaks(curve)
    out = Path(args.out_csv)
    peaks_path = Path(args.peaks_csv) if args.peaks_csv else out.with_name(out.stem + "_peaks.csv")
    header = _header("plp", "none")
    write_plp_csv(out, curve, header)
    write_peaks_csv(peaks_path, peaks, header=header)
    if args.svg:
        write_plp_svg(args.svg, curve, peaks)
    report = regularity_check(peaks)
    print(f"{len(peaks)} peaks, median interval {report.median_ipi:.1f} frames, "
          f"regular={report.accepted}{' (' + report.reason + ')' if report.reason else ''}")


def cmd_mine(args, cfg):
    from .frontend import load_audio
    from .mining import MiningConfig, batch_records, derive_seed, mine_segment
    from .plp import PeakSet, pick_peaks, plp_from_clip, regularity_check

    mining = build(MiningConfig, cfg.get("mining"), n_exponent=args.n_exponent,
                   segment_frames=args.segment_frames)
    clip = load_audio(args.inp)
    curve = plp_from_clip(clip)
    peaks = pick_peaks(curve).peaks
    seg = mining.segment_frames
    n_triplets = 0
    with open(args.out, "w") as fh:
        for k, start in enumerate(range(0, max(len(curve) - seg, 0) + 1, seg)):
            length = min(seg, len(curve) - start)
            local = peaks[(peaks >= start) & (peaks < start + length)] - start
            report = regularity_check(PeakSet(local, length))
            if not report.accepted:
                log.info("segment %d rejected: %s", k, report.reason)
                continue
            seed = derive_seed(args.seed, clip.clip_id, k)
            batch = mine_segment(PeakSet(local, length), length, mining, seed, clip.clip_id)
            for rec in batch_records(batch, start, segment=k, seed=args.seed):
                fh.write(json.dumps(rec) + "\n")
                n_triplets += 1
    print(f"wrote {n_triplets} triplets to {args.out}")


def _manifest_clips(path):
    from .data import DatasetManifest
    from .frontend import load_audio

    manifest = DatasetManifest.load(path)
    clips = []
    for e in manifest:
        clip = load_audio(manifest.resolve(e.audio_path))
        clip.clip_id = e.clip_id
        clips.append(clip)
    return manifest, clips


def cmd_pretrain(args, cfg):
    from .encoder import EncoderConfig
    from .frontend import FrontEndConfig
    from .loss import LossConfig
    from .mining import MiningConfig
    from .training import PretrainConfig, pretrain

    fe_cfg = build(FrontEndConfig, cfg.get("frontend"))
    train_cfg = build(PretrainConfig, cfg.get("train"), steps=args.steps, seed=args.seed,
                      segment_s=args.segment_s)
    seg = int(round(train_cfg.segment_s * fe_cfg.frame_rate))
    mining = build(MiningConfig, cfg.get("mining"), segment_frames=seg)
    enc_cfg = build(EncoderConfig, cfg.get("encoder"))
    loss_cfg = build(LossConfig, cfg.get("loss"))
    _, clips = _manifest_clips(args.manifest)
    ckpt = pretrain(clips, train_cfg, enc_cfg, mining, loss_cfg, fe_cfg,
                    callback=lambda s, l: log.info("step %d loss %.4f", s, l))
    ckpt.save(args.out)
    print(f"saved step-{ckpt.step} checkpoint (val loss {ckpt.val_loss}) to {args.out}")


def cmd_finetune(args, cfg):
    from .experiments import few_shot_run, load_labeled, split_folds, write_report
    from .training import Checkpoint, FinetuneConfig, finetune

    ft_cfg = build(FinetuneConfig, cfg.get("finetune"), steps=args.steps, seed=args.seed, lr=args.lr,
                   probe=args.probe, freeze_encoder=True if args.freeze_encoder else None)
    ckpt = Checkpoint.load(args.ckpt)
    from .data import DatasetManifest
    manifest = DatasetManifest.load(args.manifest)
    if any(e.split for e in manifest):
        train = [e.clip_id for e in manifest if e.split == "train"]
        valid = [e.clip_id for e in manifest if e.split in ("valid", "val")]
        test = [e.clip_id for e in manifest if e.split == "test"]
    else:
        train, valid, test = split_folds(manifest, args.test_fold, args.val_fold, seed=ft_cfg.seed)
    feats = load_labeled(manifest, ckpt.frontend_cfg, ft_cfg.stretch_variants, ft_cfg.seed)
    if args.report:
        k = args.k or len(train)
        report = few_shot_run(ckpt, feats, train, valid, test, k, args.variations, ft_cfg, ft_cfg.seed)
        write_report(args.report, report)
        print(f"k={k}: test F1 {report['summary']['f1']['mean']:.3f} "
              f"+/- {report['summary']['f1']['std']:.3f} over {args.variations} variations")
    if args.out:
        ids = sorted(train)
        if args.k:
            rng = np.random.default_rng(ft_cfg.seed)
            ids = sorted(rng.choice(ids, size=args.k, replace=False).tolist())
        tuned = finetune(ckpt, [feats[i] for i in ids], [feats[i][0] for i in sorted(valid)], ft_cfg)
        tuned.save(args.out)
        print(f"saved fine-tuned checkpoint (step {tuned.step}, val F1 {tuned.val_f1}) to {args.out}")
    if not args.out and not args.report:
        raise UsageError("finetune needs --out and/or --report")


def cmd_track(args, cfg):
    from .dbn import write_activations_csv, write_beats
    from .frontend import load_audio
    from .training import Checkpoint, predict_track

    ckpt = Checkpoint.load(args.ckpt)
    act, beats = predict_track(ckpt, load_audio(args.inp))
    header = _header("track", ckpt.seed)
    write_beats(args.out, beats, header)
    if args.act_csv:
        write_activations_csv(args.act_csv, act, header)
    print(f"{len(beats)} beats written to {args.out}")


def cmd_eval(args, cfg):
    from .data import parse_annotations
    from .evaluation import evaluate

    r = evaluate(parse_annotations(args.est).times, parse_annotations(args.ref).times)
    print("f1,cmlc,cmlt,amlc,amlt")
    print(f"{r.f1:.6f},{r.cmlc:.6f},{r.cmlt:.6f},{r.amlc:.6f},{r.amlt:.6f}")


# ---------------------------------------------------------------- parser


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pulsekit", description="Self-supervised beat tracking toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [frontend]/[mining]/[encoder]/... sections")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "render a synthetic rhythm corpus with exact annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clips", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--bpm-min", type=float)
    p.add_argument("--bpm-max", type=float)
    p.add_argument("--timbre", choices=("impulse", "noise"))
    p.add_argument("--tempo-drift", choices=("none", "piecewise"))
    p.add_argument("--background", choices=("none", "pad"))
    p.add_argument("--stretch", help="also write stretched copies: a factor in [0.8, 1.2] or 'piecewise'")
    p.add_argument("--seed", type=int)

    p = command("plp", cmd_plp, "onset envelope, PLP curve and its peaks for one clip")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--peaks-csv")
    p.add_argument("--svg")

    p = command("mine", cmd_mine, "mine contrastive triplets from one clip to JSON lines")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-exponent", type=int)
    p.add_argument("--segment-frames", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = command("pretrain", cmd_pretrain, "contrastive pre-training on a manifest of unlabeled clips")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--segment-s", type=float)
    p.add_argument("--seed", type=int)

    p = command("finetune", cmd_finetune, "supervised fine-tuning / few-shot evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--report", help="few-shot JSON report (CSV mirror written alongside)")
    p.add_argument("--k", type=int)
    p.add_argument("--variations", type=int, default=10)
    p.add_argument("--test-fold", type=int, default=0)
    p.add_argument("--val-fold", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--probe", choices=("linear", "mlp2"))
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--seed", type=int)

    p = command("track", cmd_track, "beat-track one clip with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--act-csv")

    p = command("eval", cmd_eval, "F-measure and continuity metrics for one estimate")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        import torch
        torch.set_num_threads(_threads())
        args.func(args, cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to status 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
