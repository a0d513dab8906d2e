"""Media files: PNG images, PNG frame directories and the raw video container.

Arrays on disk are ``uint8 [F, H, W, 3]`` (videos) or ``[H, W, 3]`` (images).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

RAW_MAGIC = b"GAVRAW\x00\x00"


def _rgb8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.shape[-1] != 3:
        raise ValueError(f"expected uint8 [..., 3] data, got {arr.dtype} {arr.shape}")
    return np.ascontiguousarray(arr)


def write_image(image, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_rgb8(image), mode="RGB").save(path, format="PNG")
    return path


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_video_dir(frames, out_dir, raw: bool = False, meta: dict | None = None) -> Path:
    """PNG frame sequence plus ``index.json``; optionally ``video.raw`` too."""
    frames = _rgb8(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError("video must be [F>=1, H, W, 3]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, frame in enumerate(frames):
        name = f"frame_{i:04d}.png"
        write_image(frame, out / name)
        files.append(name)
    index = {"frames": len(files), "height": int(frames.shape[1]), "width": int(frames.shape[2]),
             "files": files, "format": "png-rgb8"}
    if meta:
        index["meta"] = meta
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    if raw:
        write_raw(frames, out / "video.raw")
    return out


def read_index(path) -> dict:
    return json.loads((Path(path) / "index.json").read_text())


def read_video_dir(path) -> np.ndarray:
    path = Path(path)
    index = read_index(path)
    frames = np.stack([read_image(path / f) for f in index["files"]])
    if frames.shape[1:3] != (index["height"], index["width"]):
        raise ValueError(f"{path}: frame extents disagree with index.json")
    return frames


def write_raw(frames, path) -> Path:
    """Magic, ``uint32 F, H, W`` (little-endian), then row-major ``[F, H, W, 3]`` bytes."""
    frames = _rgb8(frames)
    f, h, w, _ = frames.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", f, h, w))
        fh.write(frames.tobytes())
    return path


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw video container")
    f, h, w = struct.unpack("<III", data[8:20])
    if len(data) != 20 + f * h * w * 3:
        raise ValueError(f"{path}: truncated raw video")
    return np.frombuffer(data, dtype=np.uint8, offset=20).reshape(f, h, w, 3).copy()


def read_video(path) -> np.ndarray:
    """Frame directory, ``.raw`` container or ``.npy`` array."""
    path = Path(path)
    if path.is_dir():
        return read_video_dir(path)
    if path.suffix == ".raw":
        return read_raw(path)
    if path.suffix == ".npy":
        return _rgb8(np.load(path))
    raise ValueError(f"unsupported video path {path}")
