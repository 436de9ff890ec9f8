"""Grayscale image files: binary PGM (P5) as the required format, 8-bit PNG
behind the same contract. Masks travel as images whose nonzero pixels are
mask cells."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import DataIOError, ValidationError
from .vision import BinaryMask, GrayImage


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise DataIOError(f"{path}: truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise DataIOError(f"{path}: not a binary PGM (P5) file, magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataIOError(f"{path}: malformed PGM header {tokens[1:4]}")
    if maxval != 255:
        raise DataIOError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    i += 1  # single whitespace after maxval
    pixels = data[i : i + width * height]
    if len(pixels) != width * height:
        raise DataIOError(
            f"{path}: payload holds {len(pixels)} bytes, expected {width * height}"
        )
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def _write_pgm(path: str, arr: np.ndarray) -> None:
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header + arr.astype(np.uint8).tobytes())
    except OSError as e:
        raise DataIOError(f"{path}: {e}") from e


def read_image(path: str) -> GrayImage:
    """8-bit grayscale PGM or PNG -> GrayImage with pixels in [0,1]."""
    if not os.path.exists(path):
        raise DataIOError(f"{path}: no such file")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        arr = _read_pgm(path)
    elif ext == ".png":
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
        except OSError as e:
            raise DataIOError(f"{path}: {e}") from e
    else:
        raise ValidationError(f"{path}: unsupported image extension {ext!r}")
    return GrayImage(arr.astype(np.float32) / 255.0)


def write_image(path: str, img: GrayImage) -> None:
    """GrayImage -> 8-bit file chosen by extension. Quantizes by rounding."""
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        _write_pgm(path, arr)
    elif ext == ".png":
        try:
            Image.fromarray(arr, mode="L").save(path, format="PNG")
        except OSError as e:
            raise DataIOError(f"{path}: {e}") from e
    else:
        raise ValidationError(f"{path}: unsupported image extension {ext!r}")


def read_mask(path: str) -> BinaryMask:
    """Image file -> mask; any nonzero pixel is a 1-cell."""
    img = read_image(path)
    return BinaryMask((img.pixels > 0).astype(np.uint8))


def write_mask(path: str, mask: BinaryMask) -> None:
    write_image(path, GrayImage(mask.bits.astype(np.float32)))
