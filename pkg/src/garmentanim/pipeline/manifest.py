"""Dataset building and the line-delimited triplet manifest."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..conditioning import PoseSequence, TripletSample, video_from_uint8, video_to_uint8
from ..media import read_image, read_index, read_video, write_image, write_video_dir
from .clients import ModelClientSuite
from .stages import PipelineConfig, TripletResult, build_triplet

log = logging.getLogger(__name__)

CATALOG_NAME = "garment.png"


@dataclass
class VideoEntry:
    id: str
    video: np.ndarray
    catalog: np.ndarray | None = None
    prompt: str = ""
    source: str | None = None


def load_video_entry(path) -> VideoEntry:
    """A frame directory (optionally with ``garment.png`` and ``meta``), ``.raw`` or ``.npy``."""
    path = Path(path)
    video = read_video(path)
    catalog, meta = None, {}
    if path.is_dir():
        meta = read_index(path).get("meta", {})
        if (path / CATALOG_NAME).exists():
            catalog = read_image(path / CATALOG_NAME)
        name = path.name
    else:
        side = path.with_name(path.stem + "." + CATALOG_NAME)
        if side.exists():
            catalog = read_image(side)
        name = path.stem
    return VideoEntry(meta.get("id", name), video, catalog, meta.get("prompt", ""), meta.get("source"))


def read_video_list(path) -> list[Path]:
    """One video path per line, relative to the list file; ``#`` starts a comment."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def write_result(result: TripletResult, out_dir) -> dict:
    """Store media under ``out_dir/<id>/`` and return the manifest record."""
    out_dir = Path(out_dir)
    record = {"id": result.id, "mode": result.mode, "provenance": result.provenance}
    if result.rejected:
        record.update(paths={"human": None, "garments": [], "pose": None, "truth": None},
                      prompt="", rejected=True, reason=result.reason)
        return record
    s = result.sample
    rel = Path(result.id)
    root = out_dir / rel
    write_image(video_to_uint8(s.human)[0], root / "human.png")
    garments = []
    for i, g in enumerate(s.garments):
        write_image(video_to_uint8(g)[0], root / f"garment_{i}.png")
        garments.append(str(rel / f"garment_{i}.png"))
    pose = {"height": s.pose.height, "width": s.pose.width,
            "keypoints": np.asarray(s.pose.keypoints, dtype=np.float64).round(6).tolist()}
    (root / "pose.json").write_text(json.dumps(pose, sort_keys=True) + "\n")
    write_video_dir(video_to_uint8(s.truth), root / "truth")
    record.update(paths={"human": str(rel / "human.png"), "garments": garments,
                         "pose": str(rel / "pose.json"), "truth": str(rel / "truth")},
                  prompt=s.prompt, source=s.source)
    return record


def write_manifest(records: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_triplets(path, include_rejected: bool = False) -> list[TripletSample]:
    """Training samples referenced by a manifest (rejected lines skipped)."""
    path = Path(path)
    out = []
    for rec in read_manifest(path):
        if rec.get("rejected"):
            continue
        p = rec["paths"]
        base = path.parent
        pose = json.loads((base / p["pose"]).read_text())
        out.append(TripletSample(
            human=video_from_uint8(read_image(base / p["human"])),
            garments=[video_from_uint8(read_image(base / g)) for g in p["garments"]],
            pose=PoseSequence(np.asarray(pose["keypoints"], dtype=np.float32), pose["height"], pose["width"]),
            prompt=rec.get("prompt", ""), truth=video_from_uint8(read_video(base / p["truth"])),
            source=rec.get("source", "internet"), id=rec["id"]))
    return out


def build_dataset(entries: Sequence[VideoEntry], mode: str, suite: ModelClientSuite, seed: int,
                  out_dir, workers: int = 1, config: PipelineConfig | None = None) -> tuple[Path, list[dict]]:
    """Process videos in parallel and write ``manifest.jsonl`` in input order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(args):
        i, entry = args
        result = build_triplet(entry.video, mode, suite, sample_seed(seed, i), entry.catalog,
                               entry.prompt, entry.id, entry.source, config)
        return write_result(result, out_dir)

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        records = list(pool.map(work, enumerate(entries)))
    return write_manifest(records, out_dir / "manifest.jsonl"), records
