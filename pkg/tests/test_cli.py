import json

import numpy as np
import pytest

from pulsekit.cli import main
from pulsekit.data import DatasetManifest
from pulsekit.training import Checkpoint

FAST_CFG = """
[encoder]
num_layers = 1
num_heads = 2
embed_dim = 16
ffn_dim = 16

[train]
warmup_steps = 1
decay_steps = 2
batch_clips = 2
eval_every = 2
val_fraction = 0.25

[finetune]
lr = 1e-3
segment_s = 4
batch_clips = 2
eval_every = 2
"""


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(root), "--num-clips", "6", "--duration", "8",
                 "--bpm-min", "100", "--bpm-max", "130", "--seed", "4"]) == 0
    (root / "fast.ini").write_text(FAST_CFG)
    return root


def test_synth_writes_manifest_and_stretched_copies(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--num-clips", "2", "--duration", "5",
                 "--stretch", "1.2", "--seed", "1"]) == 0
    manifest = DatasetManifest.load(tmp_path / "manifest.jsonl")
    assert len(manifest) == 2
    header = (tmp_path / "synth_0000_stretched.beats").read_text().splitlines()[0]
    assert header.startswith("# pulsekit synth seed=1")


def test_plp_writes_curve_and_peaks(corpus, tmp_path):
    out = tmp_path / "plp.csv"
    assert main(["plp", "--in", str(corpus / "synth_0000.wav"), "--out-csv", str(out),
                 "--svg", str(tmp_path / "plp.svg")]) == 0
    assert out.read_text().splitlines()[1] == "frame,plp_value"
    assert (tmp_path / "plp_peaks.csv").read_text().splitlines()[1] == "peak_index,frame,time_s"
    assert (tmp_path / "plp.svg").exists()


def test_mine_is_seeded(corpus, tmp_path):
    wav = str(corpus / "synth_0001.wav")
    assert main(["mine", "--in", wav, "--out", str(tmp_path / "a.jsonl"), "--seed", "5",
                 "--segment-frames", "200"]) == 0
    assert main(["mine", "--in", wav, "--out", str(tmp_path / "b.jsonl"), "--seed", "5",
                 "--segment-frames", "200"]) == 0
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert rows and all(r["seed"] == 5 and len(r["negatives"]) == 10 for r in rows)


def test_pretrain_finetune_track_eval(corpus, tmp_path, capsys):
    cfg = str(corpus / "fast.ini")
    manifest = str(corpus / "manifest.jsonl")
    ssl = tmp_path / "ssl.pkt"
    assert main(["pretrain", "--config", cfg, "--manifest", manifest, "--out", str(ssl),
                 "--steps", "2", "--segment-s", "4", "--seed", "3"]) == 0
    assert Checkpoint.load(ssl).seed == 3

    # give every clip an explicit split so the tiny corpus has all three roles
    lines = (corpus / "manifest.jsonl").read_text().splitlines()
    split = ["train", "train", "train", "valid", "test", "test"]
    rows = [dict(json.loads(l), split=s) for l, s in zip(lines, split)]
    split_manifest = corpus / "split.jsonl"
    split_manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))

    tuned = tmp_path / "tuned.pkt"
    report = tmp_path / "report.json"
    assert main(["finetune", "--config", cfg, "--ckpt", str(ssl), "--manifest", str(split_manifest),
                 "--out", str(tuned), "--report", str(report), "--k", "2", "--variations", "2",
                 "--steps", "2", "--seed", "3"]) == 0
    data = json.loads(report.read_text())
    assert len(data["runs"]) == 2 and data["seed"] == 3
    assert report.with_suffix(".csv").exists()

    beats = tmp_path / "beats.txt"
    assert main(["track", "--ckpt", str(tuned), "--in", str(corpus / "synth_0004.wav"),
                 "--out", str(beats), "--act-csv", str(tmp_path / "act.csv")]) == 0
    assert beats.read_text().startswith("# pulsekit track seed=3")

    capsys.readouterr()
    assert main(["eval", "--est", str(corpus / "synth_0004.beats"),
                 "--ref", str(corpus / "synth_0004.beats")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["f1,cmlc,cmlt,amlc,amlt", "1.000000,1.000000,1.000000,1.000000,1.000000"]


def test_usage_errors_exit_1(corpus, tmp_path):
    assert main(["eval", "--est", "x"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["plp", "--in", "a.wav", "--out-csv", "b.csv", "--bogus"]) == 1
    assert main(["pretrain", "--config", str(tmp_path / "missing.ini"), "--manifest", "m",
                 "--out", "o"]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[encoder]\nwidth = 3\n")
    assert main(["pretrain", "--config", str(bad), "--manifest", "m", "--out", "o"]) == 1


def test_runtime_failures_exit_2(tmp_path):
    assert main(["plp", "--in", str(tmp_path / "none.wav"), "--out-csv", str(tmp_path / "p.csv")]) == 2
    (tmp_path / "e.txt").write_text("1.0\n0.5\n")
    assert main(["eval", "--est", str(tmp_path / "e.txt"), "--ref", str(tmp_path / "e.txt")]) == 2


def test_thread_cap_env(monkeypatch, corpus, tmp_path):
    monkeypatch.setenv("PULSEKIT_THREADS", "zero")
    assert main(["eval", "--est", str(corpus / "synth_0000.beats"),
                 "--ref", str(corpus / "synth_0000.beats")]) == 1
    monkeypatch.setenv("PULSEKIT_THREADS", "1")
    assert main(["eval", "--est", str(corpus / "synth_0000.beats"),
                 "--ref", str(corpus / "synth_0000.beats")]) == 0


def test_help_exits_0():
    assert main(["--help"]) == 0
