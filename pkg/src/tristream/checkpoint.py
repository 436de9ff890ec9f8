"""Model persistence: an ascii header describing the model followed by the
raw little-endian float32 parameter payload, concatenated in header order.

Round trips are bitwise: load(save(m)) reproduces every parameter exactly,
and save(load(p)) reproduces the file.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataIOError, ValidationError
from .model import BackboneConfig, MultiStreamModel

FORMAT_LINE = "tristream-checkpoint v1"
END_HEADER = "end-header"


def _shape_table(model: MultiStreamModel) -> list:
    return [(p.name, tuple(p.value.shape)) for p in model.parameters()]


def _header_text(model: MultiStreamModel) -> str:
    cfg = model.config
    lines = [
        FORMAT_LINE,
        "branches global heatmap infected fusion",
        f"num_classes {model.num_classes}",
        f"tau {model.tau!r}",
        f"seed {model.seed}",
        f"backbone input_size={cfg.input_size} blocks_per_stage={cfg.blocks_per_stage}"
        f" final_channels={cfg.final_channels}"
        f" stage_channels={','.join(str(c) for c in cfg.stage_channels)}",
    ]
    for name, shape in _shape_table(model):
        lines.append(f"param {name} {','.join(str(d) for d in shape)}")
    lines.append(END_HEADER)
    return "\n".join(lines) + "\n"


def save_checkpoint(model: MultiStreamModel, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(_header_text(model).encode("ascii"))
            for p in model.parameters():
                f.write(np.ascontiguousarray(p.value.data, dtype="<f4").tobytes())
    except OSError as e:
        raise DataIOError(f"{path}: {e}") from e


def _parse_header(path: str, blob: bytes):
    marker = (END_HEADER + "\n").encode("ascii")
    # the marker line must start the line, not appear mid-text
    idx = blob.find(b"\n" + marker)
    if idx < 0:
        raise DataIOError(f"{path}: missing '{END_HEADER}' marker")
    header = blob[: idx + 1].decode("ascii")
    payload = blob[idx + 1 + len(marker):]
    lines = header.splitlines()
    if lines[0] != FORMAT_LINE:
        raise DataIOError(
            f"{path}: unsupported format version {lines[0]!r}, expected {FORMAT_LINE!r}"
        )
    fields = {}
    table = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "param":
            name, _, dims = rest.partition(" ")
            table.append((name, tuple(int(d) for d in dims.split(","))))
        else:
            fields[key] = rest
    try:
        bb = dict(kv.split("=") for kv in fields["backbone"].split(" "))
        cfg = BackboneConfig(
            stage_channels=tuple(int(c) for c in bb["stage_channels"].split(",")),
            blocks_per_stage=int(bb["blocks_per_stage"]),
            final_channels=int(bb["final_channels"]),
            input_size=int(bb["input_size"]),
        )
        meta = {
            "num_classes": int(fields["num_classes"]),
            "tau": float(fields["tau"]),
            "seed": int(fields["seed"]),
        }
    except (KeyError, ValueError) as e:
        raise DataIOError(f"{path}: malformed header: {e}") from e
    return cfg, meta, table, payload


def _format_table(table) -> str:
    return "; ".join(f"{name}:{'x'.join(str(d) for d in shape)}" for name, shape in table)


def load_checkpoint(path: str, config: BackboneConfig = None) -> MultiStreamModel:
    """Rebuild the model a file describes. When `config` is given it must
    agree with the stored shape table; a mismatch reports both tables."""
    if not os.path.exists(path):
        raise DataIOError(f"{path}: no such checkpoint")
    with open(path, "rb") as f:
        blob = f.read()
    cfg, meta, table, payload = _parse_header(path, blob)
    if config is not None:
        probe = _shape_table(MultiStreamModel(backbone=config, num_classes=meta["num_classes"]))
        if probe != table:
            raise ValidationError(
                f"{path}: checkpoint shapes [{_format_table(table)}]"
                f" do not match the requested config [{_format_table(probe)}]"
            )
        cfg = config  # same parameter shapes; the caller may pick the input size
    model = MultiStreamModel(
        backbone=cfg, num_classes=meta["num_classes"], tau=meta["tau"], seed=meta["seed"]
    )
    own_table = _shape_table(model)
    if table != own_table:
        raise DataIOError(
            f"{path}: header shape table disagrees with its backbone line:"
            f" stored [{_format_table(table)}] vs derived [{_format_table(own_table)}]"
        )
    expected = sum(4 * int(np.prod(shape)) for _, shape in table)
    if len(payload) != expected:
        raise DataIOError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    off = 0
    for p, (name, shape) in zip(model.parameters(), table):
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        p.value.data[:] = arr.reshape(shape)
        off += 4 * count
    return model
