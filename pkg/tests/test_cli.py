"""Command-line pipeline: subcommands, artifacts, exit codes, determinism."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tristream.cli import main
from tristream.dataio import load_manifest, split_rows
from tristream.imgio import read_mask

SMALL_CFG = """\
[model]
stage_channels = 4,8
blocks_per_stage = 1
final_channels = 8
input_size = 32
tau = 0.75

[optimizer]
learning_rate = 0.02

[training]
epochs = 3
batch_size = 8
patience = 10
seed = 0
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> segment-pseudo -> train -> eval -> embed run, shared."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CFG)
    ds = str(root / "ds")
    assert main(["synth", "--n", "24", "--size", "32", "--seed", "1", "--out", ds]) == 0
    manifest = os.path.join(ds, "manifest.csv")
    assert main(["segment-pseudo", "--manifest", manifest,
                 "--k", "4", "--epochs", "2", "--seed", "0"]) == 0
    run = str(root / "run")
    assert main(["train", "--manifest", manifest, "--config", str(cfg),
                 "--stage", "all", "--out", run]) == 0
    ckpt = os.path.join(run, "model.ckpt")
    emb = str(root / "emb")
    assert main(["embed", "--checkpoint", ckpt, "--manifest", manifest,
                 "--out", emb, "--iters", "60"]) == 0
    return {"root": root, "cfg": str(cfg), "ds": ds, "manifest": manifest,
            "run": run, "ckpt": ckpt, "emb": emb}


# -- synth -------------------------------------------------------------------

def test_synth_balanced_manifest(pipeline):
    rows = load_manifest(pipeline["manifest"])
    assert len(rows) == 24
    assert sum(r.label for r in rows) == 12


def test_synth_rejects_odd_n(tmp_path, capsys):
    assert main(["synth", "--n", "3", "--size", "32", "--seed", "0",
                 "--out", str(tmp_path / "x")]) == 2
    assert "even" in capsys.readouterr().err


# -- segment-pseudo ----------------------------------------------------------

def test_segment_pseudo_round_accounting(pipeline, capsys):
    """14 unlabeled train rows with k=4 -> batches 4,4,4,2."""
    out = str(pipeline["root"] / "pseudo2")
    assert main(["segment-pseudo", "--manifest", pipeline["manifest"],
                 "--k", "4", "--epochs", "2", "--seed", "0", "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "rounds 4" in stdout
    assert "round_sizes 4 4 4 2" in stdout
    assert "final_train_size 16" in stdout


def test_segment_pseudo_masks_and_provenance(pipeline):
    pseudo = os.path.join(pipeline["ds"], "pseudo")
    lines = open(os.path.join(pseudo, "provenance.csv")).read().splitlines()
    assert lines[0] == "sample_id,provenance,mask_path"
    rows = load_manifest(pipeline["manifest"])
    assert len(lines) - 1 == len(rows)  # every image got a mask
    seeded = {r.sample_id for r in rows if r.role == "seed-masked"}
    for line in lines[1:]:
        sample_id, provenance, mask_rel = line.split(",")
        assert provenance == ("seed" if sample_id in seeded else "pseudo")
        mask = read_mask(os.path.join(pseudo, mask_rel))
        assert set(np.unique(mask.bits)) <= {0, 1}


def test_segment_pseudo_reruns_are_bitwise(pipeline):
    a = str(pipeline["root"] / "pa")
    b = str(pipeline["root"] / "pb")
    for out in (a, b):
        assert main(["segment-pseudo", "--manifest", pipeline["manifest"],
                     "--k", "4", "--epochs", "2", "--seed", "0", "--out", out]) == 0
    for name in sorted(os.listdir(a)):
        assert open(os.path.join(a, name), "rb").read() == \
            open(os.path.join(b, name), "rb").read()


# -- train -------------------------------------------------------------------

def test_train_artifacts(pipeline):
    assert os.path.exists(pipeline["ckpt"])
    assert os.path.getsize(os.path.join(pipeline["run"], "history.png")) > 0
    records = [json.loads(line)
               for line in open(os.path.join(pipeline["run"], "history.jsonl"))]
    stages = [r["stage"] for r in records]
    for stage in ("I", "II-heatmap", "II-infected", "III"):
        assert stage in stages
    assert all({"stage", "epoch", "lr", "train_loss", "val_accuracy"} <= set(r)
               for r in records)


def test_train_is_deterministic(pipeline):
    out = str(pipeline["root"] / "run_again")
    assert main(["train", "--manifest", pipeline["manifest"], "--config", pipeline["cfg"],
                 "--stage", "all", "--out", out]) == 0
    assert open(pipeline["ckpt"], "rb").read() == \
        open(os.path.join(out, "model.ckpt"), "rb").read()


def test_train_single_stage_with_init(pipeline):
    out1 = str(pipeline["root"] / "stage_i")
    assert main(["train", "--manifest", pipeline["manifest"], "--config", pipeline["cfg"],
                 "--stage", "I", "--out", out1]) == 0
    out2 = str(pipeline["root"] / "stage_iii")
    assert main(["train", "--manifest", pipeline["manifest"], "--config", pipeline["cfg"],
                 "--stage", "III", "--init", os.path.join(out1, "model.ckpt"),
                 "--out", out2]) == 0
    records = [json.loads(line)
               for line in open(os.path.join(out2, "history.jsonl"))]
    assert {r["stage"] for r in records} == {"III"}


def test_train_nan_exits_4(pipeline, capsys):
    cfg = pipeline["root"] / "nan.cfg"
    cfg.write_text(SMALL_CFG.replace("learning_rate = 0.02", "learning_rate = 1e25"))
    with np.errstate(all="ignore"):
        rc = main(["train", "--manifest", pipeline["manifest"], "--config", str(cfg),
                   "--stage", "I", "--out", str(pipeline["root"] / "nanrun")])
    assert rc == 4
    assert "non-finite" in capsys.readouterr().err


# -- eval --------------------------------------------------------------------

def test_eval_report_schema(pipeline, capsys):
    out = str(pipeline["root"] / "evalout")
    assert main(["eval", "--checkpoint", pipeline["ckpt"], "--manifest",
                 pipeline["manifest"], "--split", "test", "--out", out]) == 0
    report = capsys.readouterr().out
    lines = report.splitlines()
    assert lines[0].startswith("accuracy ")
    assert lines[1].startswith("f1 ")
    assert lines[2].startswith("auc ")
    assert lines[3].startswith("confusion tp ")
    for i, name in enumerate(("global", "heatmap", "infected", "fusion")):
        assert lines[4 + i].startswith(f"branch {name} accuracy ")
    # headline numbers are the fusion branch's
    fusion_auc = float(lines[7].split()[-1])
    assert float(lines[2].split()[1]) == fusion_auc
    assert open(os.path.join(out, "metrics.txt")).read() == report
    assert os.path.getsize(os.path.join(out, "roc.png")) > 0


def test_eval_report_bytes_are_reproducible(pipeline, capsys):
    args = ["eval", "--checkpoint", pipeline["ckpt"],
            "--manifest", pipeline["manifest"], "--split", "test"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_eval_missing_checkpoint_exits_3(pipeline, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["root"] / "ghost.ckpt"),
               "--manifest", pipeline["manifest"]])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


# -- heatmap -----------------------------------------------------------------

def test_heatmap_artifacts(pipeline, capsys):
    image = os.path.join(pipeline["ds"], "images", "img_0000.pgm")
    out = str(pipeline["root"] / "hm")
    assert main(["heatmap", "--checkpoint", pipeline["ckpt"], "--image", image,
                 "--tau", "0.75", "--out", out]) == 0
    stdout = capsys.readouterr().out
    for name in ("heatmap.pgm", "mask.pgm", "crop.pgm", "cam_overlay.png"):
        assert os.path.getsize(os.path.join(out, name)) > 0
    assert "predicted_class" in stdout
    assert "region" in stdout
    mask = read_mask(os.path.join(out, "mask.pgm"))
    assert set(np.unique(mask.bits)) <= {0, 1}


def test_heatmap_tau_extremes(pipeline):
    """tau=1 keeps only strict maxima; tau=0 keeps everything positive."""
    image = os.path.join(pipeline["ds"], "images", "img_0001.pgm")
    hi = str(pipeline["root"] / "hm_hi")
    lo = str(pipeline["root"] / "hm_lo")
    assert main(["heatmap", "--checkpoint", pipeline["ckpt"], "--image", image,
                 "--tau", "1.0", "--out", hi]) == 0
    assert main(["heatmap", "--checkpoint", pipeline["ckpt"], "--image", image,
                 "--tau", "0.0", "--out", lo]) == 0
    m_hi = read_mask(os.path.join(hi, "mask.pgm")).bits
    m_lo = read_mask(os.path.join(lo, "mask.pgm")).bits
    assert (m_hi <= m_lo).all()  # higher threshold keeps fewer pixels


# -- embed -------------------------------------------------------------------

def test_embed_csv_schema(pipeline, capsys):
    csv_path = os.path.join(pipeline["emb"], "embedding.csv")
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "sample_id,label,x,y,z"
    assert len(lines) - 1 == 24
    for line in lines[1:]:
        sample_id, label, x, y, z = line.split(",")
        assert label in ("0", "1")
        float(x), float(y), float(z)
    assert os.path.getsize(os.path.join(pipeline["emb"], "embedding.png")) > 0


def test_embed_is_deterministic(pipeline):
    a = str(pipeline["root"] / "emb_a")
    b = str(pipeline["root"] / "emb_b")
    for out in (a, b):
        assert main(["embed", "--checkpoint", pipeline["ckpt"], "--manifest",
                     pipeline["manifest"], "--out", out, "--iters", "60"]) == 0
    assert open(os.path.join(a, "embedding.csv")).read() == \
        open(os.path.join(b, "embedding.csv")).read()


# -- entry point -------------------------------------------------------------

def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "tristream.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "segment-pseudo", "train", "eval", "heatmap", "embed"):
        assert name in proc.stdout
