"""Versioned binary checkpoints.

Byte layout (documented so other implementations can read it):

    bytes 0..7    magic b"VSNET001"
    bytes 8..11   uint32 little-endian: length H of the JSON header
    bytes 12..    H bytes of UTF-8 JSON
    then          raw tensor bytes, little-endian, C order, in header order

Header JSON::

    {
      "format_version": 1,
      "arch": {
        "descriptor": str, "fov": [3 ints], "roi": [3 ints],
        "hidden_width": int, "dropout_rate": float,
        "layers": [{"type": "conv", "kernel": [...], "out_channels": n}
                   | {"type": "pool"} | {"type": "flatten"}
                   | {"type": "dense", "width": n}
                   | {"type": "dropout", "rate": r} | {"type": "output"}]
      },
      "tensors": [{"name": str, "dtype": "<f4", "shape": [...],
                   "offset": int, "nbytes": int}, ...]
    }

Offsets are relative to the end of the header.  The explicit layer list (not
the descriptor string) is authoritative on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .arch import Conv3D, Dense, Dropout, Flatten, MaxPool2x2, NetSpec, OutputDense
from .model import param_names

MAGIC = b"VSNET001"
FORMAT_VERSION = 1


def _layer_to_json(layer) -> dict:
    if isinstance(layer, Conv3D):
        return {"type": "conv", "kernel": list(layer.kernel), "out_channels": layer.out_channels}
    if isinstance(layer, MaxPool2x2):
        return {"type": "pool"}
    if isinstance(layer, Flatten):
        return {"type": "flatten"}
    if isinstance(layer, Dense):
        return {"type": "dense", "width": layer.width}
    if isinstance(layer, Dropout):
        return {"type": "dropout", "rate": layer.rate}
    if isinstance(layer, OutputDense):
        return {"type": "output"}
    raise CheckpointError(f"cannot serialize layer {layer!r}")


def _layer_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "conv":
        return Conv3D(tuple(obj["kernel"]), int(obj["out_channels"]))
    if kind == "pool":
        return MaxPool2x2()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(int(obj["width"]))
    if kind == "dropout":
        return Dropout(float(obj["rate"]))
    if kind == "output":
        return OutputDense()
    raise CheckpointError(f"unknown layer type {kind!r} in checkpoint")


def save_checkpoint(spec: NetSpec, params: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    expected = param_names(spec)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"params missing tensors {missing}")

    tensors = []
    blobs = []
    offset = 0
    for name in expected:
        arr = np.ascontiguousarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "arch": {
            "descriptor": spec.descriptor,
            "fov": list(spec.fov),
            "roi": list(spec.roi),
            "hidden_width": spec.hidden_width,
            "dropout_rate": spec.dropout_rate,
            "layers": [_layer_to_json(l) for l in spec.layers],
        },
        "tensors": tensors,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[NetSpec, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    body_start = len(MAGIC) + 4 + hlen
    if body_start > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) + 4: body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )

    arch = header["arch"]
    spec = NetSpec(
        fov=tuple(arch["fov"]),
        roi=tuple(arch["roi"]),
        layers=tuple(_layer_from_json(o) for o in arch["layers"]),
        descriptor=arch.get("descriptor", ""),
        hidden_width=int(arch.get("hidden_width", 1024)),
        dropout_rate=float(arch.get("dropout_rate", 0.5)),
    )

    params: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        start = body_start + int(t["offset"])
        end = start + int(t["nbytes"])
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(t["dtype"]))
        if arr.size != int(np.prod(t["shape"])):
            raise CheckpointError(f"{path}: tensor {t['name']} size mismatch")
        params[t["name"]] = arr.reshape(t["shape"]).copy()

    expected = set(param_names(spec))
    got = set(params)
    if expected != got:
        raise CheckpointError(
            f"{path}: tensors do not match architecture "
            f"(missing {sorted(expected - got)}, extra {sorted(got - expected)})"
        )
    return spec, params
