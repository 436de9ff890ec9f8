"""Command-line surface tying the pipeline together.

Subcommands: synth, segment-pseudo, train, eval, heatmap, embed.
Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (
    generate_synthetic,
    load_config,
    load_manifest,
    load_samples,
    split_rows,
)
from .errors import DataIOError, NumericalError, ValidationError
from .imgio import read_image, read_mask, write_image, write_mask
from .model import MultiStreamModel, cam
from .nn import no_grad
from .semisup import (
    LabeledImage,
    PseudoLabelPool,
    Segmenter,
    run_algorithm1,
)
from .trainer import STAGES, EarlyStopPolicy, TrainData, resolve_mask, run_protocol
from .tsne import tsne_embed
from .vision import (
    GrayImage,
    bbox_of_mask,
    bilinear_resize,
    binarize,
    heatmap_normalize,
    max_connected_component,
    upsample_mask_nearest,
)

PROVENANCE_FILE = "provenance.csv"


# -- shared helpers ----------------------------------------------------------

def _pseudo_dir(manifest_path: str, override: str = None) -> str:
    return override or os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "pseudo")


def _load_overrides(manifest_path: str, pseudo_dir: str = None) -> dict:
    """sample_id -> mask path, from a segment-pseudo sidecar if one exists."""
    path = os.path.join(_pseudo_dir(manifest_path, pseudo_dir), PROVENANCE_FILE)
    if not os.path.exists(path):
        return {}
    overrides = {}
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "sample_id,provenance,mask_path":
        raise ValidationError(f"{path}:1: bad provenance header")
    base = os.path.dirname(path)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        sample_id, provenance, mask_rel = line.split(",")
        if provenance not in ("seed", "pseudo"):
            raise ValidationError(f"{path}:{lineno}: bad provenance {provenance!r}")
        overrides[sample_id] = os.path.normpath(os.path.join(base, mask_rel))
    return overrides


def _eval_scores(model: MultiStreamModel, samples) -> dict:
    """Per-branch positive-class probabilities, one list per branch."""
    scores = {name: [] for name in ("global", "heatmap", "infected", "fusion")}
    labels = []
    with no_grad():
        for s in samples:
            mask = s.mask if s.mask is not None else resolve_mask(s, None)
            out = model.forward_all(s.image, mask)
            for name in scores:
                p = model.predict_proba(out["logits"][name])
                scores[name].append(float(p[1] if model.num_classes >= 2 else p[0]))
            labels.append(s.label)
    return {"scores": scores, "labels": labels}


def format_metrics_report(results: dict) -> str:
    """Fixed key order: accuracy, f1, auc, confusion, then per-branch lines."""
    fusion = results["fusion"]
    lines = [
        f"accuracy {fusion.accuracy:.6f}",
        f"f1 {fusion.f1:.6f}",
        f"auc {fusion.auc:.6f}",
        f"confusion tp {fusion.tp} fp {fusion.fp} tn {fusion.tn} fn {fusion.fn}",
    ]
    for name in ("global", "heatmap", "infected", "fusion"):
        r = results[name]
        lines.append(
            f"branch {name} accuracy {r.accuracy:.6f} f1 {r.f1:.6f} auc {r.auc:.6f}"
        )
    return "\n".join(lines) + "\n"


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = generate_synthetic(args.n, args.size, args.seed, args.out)
    print(manifest)
    return 0


def _square_size(img: GrayImage) -> int:
    side = min(img.pixels.shape)
    return max(8, (side // 4) * 4)


def cmd_segment_pseudo(args) -> int:
    cfg = load_config(args.config)
    k = args.k if args.k is not None else cfg.segmenter_k
    epochs = args.epochs if args.epochs is not None else cfg.segmenter_epochs
    rows = load_manifest(args.manifest)
    train_rows = split_rows(rows)["train"]
    if not train_rows:
        raise ValidationError("manifest has no train rows")

    size = _square_size(read_image(train_rows[0].resolved_image))

    def square(row):
        img = read_image(row.resolved_image)
        if img.pixels.shape != (size, size):
            img = GrayImage(bilinear_resize(img.pixels, size, size))
        return img

    seeds, candidates = [], []
    for row in train_rows:
        if row.role == "seed-masked":
            m = read_mask(row.resolved_mask)
            if m.bits.shape != (size, size):
                m = upsample_mask_nearest(m, size, size)
            seeds.append(LabeledImage(row.sample_id, square(row), m, "seed"))
        elif row.role == "unlabeled":
            candidates.append((row.sample_id, square(row)))

    pool = PseudoLabelPool(train_set=seeds, test_set=candidates, batch_size=k)
    seg = Segmenter(size, base_channels=cfg.segmenter_channels, seed=args.seed)
    report = run_algorithm1(seg, pool, epochs_per_round=epochs, seed=args.seed)

    out_dir = _pseudo_dir(args.manifest, args.out)
    os.makedirs(out_dir, exist_ok=True)
    emitted = {}  # sample_id -> provenance
    for item in pool.train_set:
        write_mask(os.path.join(out_dir, f"{item.image_id}.pgm"), item.mask)
        emitted[item.image_id] = item.provenance
    # rows outside the pool get the final segmenter's prediction
    with no_grad():
        for row in rows:
            if row.sample_id in emitted:
                continue
            mask = seg.predict_mask(square(row))
            write_mask(os.path.join(out_dir, f"{row.sample_id}.pgm"), mask)
            emitted[row.sample_id] = "pseudo"
    with open(os.path.join(out_dir, PROVENANCE_FILE), "w", newline="\n") as f:
        f.write("sample_id,provenance,mask_path\n")
        for sample_id in sorted(emitted):
            f.write(f"{sample_id},{emitted[sample_id]},{sample_id}.pgm\n")

    print(f"rounds {report.rounds}")
    print(f"round_sizes {' '.join(str(s) for s in report.round_sizes)}")
    print(f"final_train_size {report.final_train_size}")
    print(f"masks {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    rows = load_manifest(args.manifest)
    by_split = split_rows(rows)
    if not by_split["train"] or not by_split["val"]:
        raise ValidationError("manifest needs train and val rows")
    overrides = _load_overrides(args.manifest, args.pseudo)
    size = cfg.backbone.input_size
    data = TrainData(
        train=load_samples(by_split["train"], size, overrides),
        val=load_samples(by_split["val"], size, overrides),
    )
    if args.init:
        model = load_checkpoint(args.init, config=cfg.backbone)
    else:
        model = MultiStreamModel(
            backbone=cfg.backbone, num_classes=cfg.num_classes, tau=cfg.tau, seed=cfg.seed
        )
    stages = STAGES if args.stage == "all" else (args.stage,)
    result = run_protocol(
        model,
        data,
        opt=cfg.optimizer,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        policy=EarlyStopPolicy(patience=cfg.patience),
        seed=cfg.seed,
        stages=stages,
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt)
    with open(os.path.join(args.out, "history.jsonl"), "w", newline="\n") as f:
        for hist in result.histories:
            for r in hist.records:
                f.write(json.dumps({
                    "stage": hist.stage, "epoch": r.epoch, "lr": r.lr,
                    "train_loss": round(r.train_loss, 8),
                    "val_accuracy": round(r.val_accuracy, 8),
                }) + "\n")
    from .viz import plot_history
    plot_history(result.histories, os.path.join(args.out, "history.png"))
    for hist in result.histories:
        print(f"stage {hist.stage} best_epoch {hist.best_epoch} "
              f"val_accuracy {hist.best_val_accuracy():.6f} "
              f"stopped_early {str(hist.stopped_early).lower()}")
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    model = load_checkpoint(args.checkpoint)
    rows = split_rows(load_manifest(args.manifest))[args.split]
    if not rows:
        raise ValidationError(f"manifest has no {args.split} rows")
    overrides = _load_overrides(args.manifest, args.pseudo)
    samples = load_samples(rows, model.config.input_size, overrides)
    run = _eval_scores(model, samples)
    results = {
        name: evaluate(run["scores"][name], run["labels"])
        for name in ("global", "heatmap", "infected", "fusion")
    }
    report = format_metrics_report(results)
    sys.stdout.write(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w", newline="\n") as f:
            f.write(report)
        from .viz import plot_roc
        plot_roc(results["fusion"], os.path.join(args.out, "roc.png"))
    return 0


def cmd_heatmap(args) -> int:
    model = load_checkpoint(args.checkpoint)
    model.tau = args.tau
    size = model.config.input_size
    img = read_image(args.image)
    if img.pixels.shape != (size, size):
        img = GrayImage(bilinear_resize(img.pixels, size, size))
    os.makedirs(args.out, exist_ok=True)
    with no_grad():
        acts, _, logits_g = model.forward_global(img)
        h = heatmap_normalize(acts)
        m = binarize(h, args.tau)
        crop, fell_back = model.heatmap_crop(img, acts)
        cls = model.predict(logits_g)
        overlay = cam(acts, model.global_branch.head_w.value, cls)
    write_image(os.path.join(args.out, "heatmap.pgm"), GrayImage(h.values))
    write_mask(os.path.join(args.out, "mask.pgm"), m)
    write_image(os.path.join(args.out, "crop.pgm"), crop)
    from .viz import render_cam_overlay
    render_cam_overlay(img, overlay, os.path.join(args.out, "cam_overlay.png"))
    comp = max_connected_component(m)
    if comp is None:
        print("region none")
    else:
        box = bbox_of_mask(comp)
        print(f"region rows {box.row_min}..{box.row_max} cols {box.col_min}..{box.col_max}")
    print(f"fell_back {str(fell_back).lower()}")
    print(f"predicted_class {cls}")
    print(f"artifacts {args.out}")
    return 0


def cmd_embed(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = load_manifest(args.manifest)
    overrides = _load_overrides(args.manifest, args.pseudo)
    samples = load_samples(rows, model.config.input_size, overrides)
    feats, labels, ids = [], [], []
    with no_grad():
        for s in samples:
            out = model.forward_all(s.image, s.mask if s.mask is not None else resolve_mask(s, None))
            feats.append(np.concatenate([
                out["pool_g"].data, out["pool_h"].data, out["pool_in"].data
            ]).astype(np.float64))
            labels.append(s.label)
            ids.append(s.sample_id)
    x = np.stack(feats)
    n = x.shape[0]
    perplexity = args.perplexity if args.perplexity is not None else min(30.0, max(2.0, n / 5.0))
    emb = tsne_embed(
        x, labels=labels, sample_ids=ids,
        perplexity=perplexity, iters=args.iters, seed=args.seed,
        exaggeration_iters=min(250, args.iters // 2),
    )
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "embedding.csv")
    with open(csv_path, "w", newline="\n") as f:
        f.write("sample_id,label,x,y,z\n")
        for i, sid in enumerate(emb.sample_ids):
            px, py, pz = emb.points[i]
            f.write(f"{sid},{emb.labels[i]},{px:.6f},{py:.6f},{pz:.6f}\n")
    from .viz import plot_embedding
    plot_embedding(emb, os.path.join(args.out, "embedding.png"))
    print(f"n {n}")
    print(f"kl_initial {emb.kl_initial:.6f}")
    print(f"kl_final {emb.kl_final:.6f}")
    print(f"embedding {csv_path}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tristream",
        description="Triplet-stream attention-fusion classification toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="sample count (even)")
    p.add_argument("--size", type=int, required=True, help="image side length (>= 32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment-pseudo", help="train the segmenter by pseudo-labeling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None, help="pseudo-label batch size (default 100)")
    p.add_argument("--epochs", type=int, default=None, help="segmenter epochs per round")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="mask directory (default: pseudo/ by the manifest)")
    p.set_defaults(func=cmd_segment_pseudo)

    p = sub.add_parser("train", help="run the staged training protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--stage", default="all",
                   choices=["all", "I", "II-heatmap", "II-infected", "III"])
    p.add_argument("--out", default="run", help="artifact directory")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--pseudo", default=None, help="segment-pseudo output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", default=None, help="also write metrics.txt and roc.png here")
    p.add_argument("--pseudo", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="activation heat-map artifacts for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tau", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("embed", help="export a 3-D embedding of fusion features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pseudo", default=None)
    p.set_defaults(func=cmd_embed)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
