"""Model checkpoints: a text manifest followed by a flat binary payload.

Layout::

    UDETCKPT 1
    meta variant=udet input_size=128 width_scale=1/4 dtype=float32
    tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <raw little-endian bytes, concatenated in manifest order>

Offsets are relative to the first payload byte.
"""
from __future__ import annotations

import os
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelGraph, VARIANTS, build, variant_name

MAGIC = "UDETCKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(g: ModelGraph, path, state: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    state = g.state_dict() if state is None else state
    meta = {
        "variant": variant_name(g.variant),
        "input_size": str(g.input_size),
        "width_scale": str(g.width_scale),
        "dtype": str(g.dtype),
    }
    for k, v in (extra or {}).items():
        meta[k] = str(v).replace(" ", "_")
    lines = [MAGIC, "meta " + " ".join(f"{k}={v}" for k, v in meta.items())]
    offset = 0
    blobs = []
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.str} {shape} {offset} {arr.nbytes}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (meta, {name: array}) without building a model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a udet checkpoint")
    header = raw[:end].decode("ascii").splitlines()
    payload = memoryview(raw)[end + len(b"\nend\n"):]
    meta: dict = {}
    tensors = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta.update(item.split("=", 1) for item in rest.split())
        elif kind == "tensor":
            name, dt, shape, off, nbytes = rest.split(" ")
            off, nbytes = int(off), int(nbytes)
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            if off + nbytes > len(payload):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            arr = np.frombuffer(payload[off:off + nbytes], dtype=np.dtype(dt)).reshape(dims).copy()
            tensors[name] = arr
        else:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    return meta, tensors


def load_checkpoint(path) -> tuple[ModelGraph, dict]:
    """Rebuild the model recorded in the manifest and load its tensors."""
    meta, tensors = read_checkpoint(path)
    if meta.get("variant") not in VARIANTS:
        raise CheckpointError(f"{path}: unknown variant {meta.get('variant')!r}")
    g = build(meta["variant"], int(meta["input_size"]), Fraction(meta["width_scale"]),
              dtype=np.dtype(meta.get("dtype", "float32")))
    g.load_state_dict(tensors)
    return g, meta
