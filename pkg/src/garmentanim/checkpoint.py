"""Self-describing parameter container.

Layout::

    magic      8 bytes   b"GATCKPT\\x00"
    version    uint32 LE
    hdr_len    uint32 LE
    header     hdr_len bytes of UTF-8 JSON
    payload    concatenated little-endian float32 arrays

The header records the backbone config, the format version, an ``extra``
dict (training state, variant, ...) and for every tensor its name, shape,
byte offset into the payload and trainable flag.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .autograd import ParamSet
from .backbone import BackboneConfig

MAGIC = b"GATCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, cfg: BackboneConfig, extra: dict | None = None,
                    aux: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``params`` (and optional auxiliary arrays such as optimizer moments)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    tables = [("param", params.arrays())]
    if aux:
        tables.append(("aux", aux))
    for kind, arrays in tables:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            entries.append({
                "name": name, "kind": kind, "shape": list(arr.shape), "offset": offset,
                "trainable": bool(params.is_trainable(name)) if kind == "param" else False,
            })
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "extra": extra or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hdr_len = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return json.loads(fh.read(hdr_len).decode("utf-8"))


def load_checkpoint(path) -> tuple[ParamSet, BackboneConfig, dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(params, config, extra, aux)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    params, aux = ParamSet(), {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] + 4 * count > len(payload):
            raise CheckpointError(f"checkpoint truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(np.float32)
        if entry["kind"] == "param":
            params.add(entry["name"], arr, entry["trainable"])
        else:
            aux[entry["name"]] = arr
    return params, BackboneConfig.from_dict(header["config"]), header["extra"], aux
