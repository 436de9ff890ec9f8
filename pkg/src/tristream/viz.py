"""Rendered artifacts: CAM overlays as deterministic image files, plus the
matplotlib report figures (ROC curve, training history, 3-D embedding).

The overlay encoder is hand-rolled (PPM) or Pillow (PNG) so identical
inputs give byte-identical files; matplotlib output is for human eyes and
carries no byte-determinism contract.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import DataIOError, ValidationError
from .metrics import EvalResult
from .tsne import Embedding3D
from .vision import GrayImage, HeatMap, bilinear_resize


def cam_overlay_rgb(img: GrayImage, cam: HeatMap) -> np.ndarray:
    """Blend intensity with a red heat channel: r = gray*(1-c) + c, g = b =
    gray*(1-c). A zero map reproduces the grayscale rendering."""
    c = cam.values
    if c.shape != img.pixels.shape:
        c = bilinear_resize(c, img.height, img.width)
    c = np.clip(c, 0.0, 1.0).astype(np.float64)
    gray = img.pixels.astype(np.float64)
    r = gray * (1.0 - c) + c
    gb = gray * (1.0 - c)
    rgb = np.stack([r, gb, gb], axis=2)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def render_cam_overlay(img: GrayImage, cam: HeatMap, out_path: str) -> None:
    """Write the overlay as PPM (P6, hand-encoded) or PNG by extension."""
    rgb = cam_overlay_rgb(img, cam)
    ext = os.path.splitext(out_path)[1].lower()
    try:
        if ext == ".ppm":
            h, w, _ = rgb.shape
            with open(out_path, "wb") as f:
                f.write(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
        elif ext == ".png":
            Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")
        else:
            raise ValidationError(f"{out_path}: unsupported overlay extension {ext!r}")
    except OSError as e:
        raise DataIOError(f"{out_path}: {e}") from e


def read_overlay_rgb(path: str) -> np.ndarray:
    """Read back an overlay (PPM or PNG) as an RGB uint8 array."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        with open(path, "rb") as f:
            data = f.read()
        parts = data.split(b"\n", 3)
        if len(parts) < 4 or parts[0] != b"P6":
            raise DataIOError(f"{path}: not a P6 PPM file")
        w, h = (int(t) for t in parts[1].split())
        body = parts[3]
        if len(body) != w * h * 3:
            raise DataIOError(f"{path}: payload holds {len(body)} bytes, expected {w * h * 3}")
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DataIOError(f"{path}: {e}") from e


def plot_roc(result: EvalResult, out_path: str) -> None:
    """ROC polygon from the stored per-sample scores."""
    scores = np.asarray(result.scores)
    labels = np.asarray(result.labels)
    pos = labels.sum()
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValidationError("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    tps = np.concatenate([[0], np.cumsum(labels[order] == 1)])
    fps = np.concatenate([[0], np.cumsum(labels[order] == 0)])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fps / neg, tps / pos, lw=2, label=f"AUC = {result.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    try:
        fig.savefig(out_path)
    except OSError as e:
        raise DataIOError(f"{out_path}: {e}") from e
    finally:
        plt.close(fig)


def plot_history(histories, out_path: str) -> None:
    """Per-stage train loss and validation accuracy curves."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for hist in histories:
        epochs = [r.epoch for r in hist.records]
        ax1.plot(epochs, [r.train_loss for r in hist.records], label=hist.stage)
        ax2.plot(epochs, [r.val_accuracy for r in hist.records], label=hist.stage)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val accuracy")
    ax1.legend()
    ax2.legend()
    fig.tight_layout()
    try:
        fig.savefig(out_path)
    except OSError as e:
        raise DataIOError(f"{out_path}: {e}") from e
    finally:
        plt.close(fig)


def plot_embedding(emb: Embedding3D, out_path: str) -> None:
    """3-D scatter of the embedded feature vectors, colored by label."""
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="3d")
    labels = np.asarray(emb.labels)
    for lab in np.unique(labels):
        pts = emb.points[labels == lab]
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=12, label=str(lab))
    ax.set_title(f"KL {emb.kl_final:.3f}")
    ax.legend()
    try:
        fig.savefig(out_path)
    except OSError as e:
        raise DataIOError(f"{out_path}: {e}") from e
    finally:
        plt.close(fig)
