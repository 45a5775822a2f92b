"""Checkpoint files: an 8-byte little-endian header length, a JSON header,
then every parameter as raw little-endian float64 in header order."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerModel
from .router import RoutedLayer

MAGIC = "langroute-ckpt-1"


class CheckpointError(ValueError):
    pass


def checkpoint_id(model: TransformerModel) -> str:
    h = hashlib.sha256(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path: str | Path, model: TransformerModel,
                    routing: dict[str, dict[int, RoutedLayer]] | None = None,
                    meta: dict | None = None) -> str:
    """Write ``model`` (plus optional per-pair routing and metadata); returns its id."""
    names, shapes, offsets, chunks = [], [], [], []
    off = 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        names.append(name)
        shapes.append(list(t.shape))
        offsets.append(off)
        chunks.append(raw)
        off += len(raw)
    cid = checkpoint_id(model)
    header = {
        "format": MAGIC,
        "id": cid,
        "config": model.config.to_dict(),
        "names": names,
        "shapes": shapes,
        "offsets": offsets,
        "routing": {p: {str(j): r.to_dict() for j, r in lay.items()} for p, lay in (routing or {}).items()},
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return cid


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", head)
        try:
            header = json.loads(fh.read(n))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    return header


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, dict[str, dict[int, RoutedLayer]], dict]:
    """Returns (model, routing, header)."""
    header = read_header(path)
    data = Path(path).read_bytes()
    base = 8 + struct.unpack("<Q", data[:8])[0]
    params = {}
    for name, shape, off in zip(header["names"], header["shapes"], header["offsets"]):
        n = int(np.prod(shape)) * 8
        start = base + off
        if start + n > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=start).reshape(shape).astype(float)
    model = TransformerModel(ModelConfig(**header["config"]), params)
    routing = {p: {int(j): RoutedLayer.from_dict(r) for j, r in lay.items()}
               for p, lay in header.get("routing", {}).items()}
    return model, routing, header
