"""Triplet construction stages: frame selection, cropping, masking, inpainting,
garment extraction and the orchestrating :func:`build_triplet`.

Videos are ``uint8 [F, H, W, 3]``; frames ``uint8 [H, W, 3]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..conditioning import PoseSequence, TripletSample, video_from_uint8
from .clients import ClientError, ModelClient, ModelClientSuite
from .geometry import BBox, CropSpec, MaskImage, adaptive_crop

log = logging.getLogger(__name__)

MODES = ("shop-pair", "in-the-wild", "no-synth-human")
QUALITY_THRESHOLD = 95
DEFAULT_COLORS = ("red", "green", "blue", "yellow", "orange", "purple", "pink", "black",
                  "white", "gray", "brown", "navy", "beige")
DEFAULT_GARMENT_TYPES = ("t-shirt", "shirt", "sweater", "hoodie", "jacket", "blouse", "tank top",
                         "polo shirt", "cardigan", "vest")
GENDER_NOUNS = {"male": "a man", "female": "a woman"}
WHITE = 255


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` labels where."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def check_video_u8(video) -> np.ndarray:
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3 or video.shape[0] == 0:
        raise ValueError(f"video must be non-empty uint8 [F, H, W, 3], got {video.shape}")
    if video.dtype != np.uint8:
        raise ValueError("video must be uint8")
    return video


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 31 - 1))


def sample_frames(num_frames: int, n_samples: int, rng: np.random.Generator) -> list[int]:
    """Seeded subset of frame indices, in ascending order."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    k = min(n_samples, num_frames)
    return sorted(int(i) for i in rng.choice(num_frames, size=k, replace=False))


# --- human frame -------------------------------------------------------------------

def select_human_frame(video, n_samples: int, vlm: ModelClient, rng: np.random.Generator) -> int:
    """First sampled frame passing the face and quality criteria, else frame 0."""
    video = check_video_u8(video)
    for idx in sample_frames(len(video), n_samples, rng):
        r = vlm.request("vlm.human_frame", {"image": video[idx]}, seed=idx)
        if r["face_unoccluded"] and r["eyes_open"] and r["frontal"] and r["quality"] >= QUALITY_THRESHOLD:
            return idx
    return 0


def detect_boxes(frame: np.ndarray, detector: ModelClient) -> tuple[BBox, BBox]:
    r = detector.request("detector", {"image": frame})
    if r["face"] is None or r["body"] is None:
        raise StageError("detect", "no face or body found")
    try:
        return BBox(*r["face"]), BBox(*r["body"])
    except ValueError as exc:
        raise StageError("detect", str(exc)) from exc


def crop_and_resize(frame: np.ndarray, spec: CropSpec, size: tuple) -> np.ndarray:
    """Cut the crop rectangle and resample it back to ``size = (H, W)``."""
    from PIL import Image

    patch = spec.apply(frame)
    img = Image.fromarray(np.ascontiguousarray(patch), mode="RGB")
    return np.asarray(img.resize((size[1], size[0]), Image.BILINEAR))


# --- inpainting ---------------------------------------------------------------------

def compose_inpaint_prompt(colors: Sequence[str], garment_types: Sequence[str], gender: str,
                           rng: np.random.Generator) -> str:
    """``"<color> <garment type> for <noun>"`` with a uniform seeded draw."""
    if not colors or not garment_types:
        raise ValueError("prompt pools must be non-empty")
    color = colors[int(rng.integers(len(colors)))]
    kind = garment_types[int(rng.integers(len(garment_types)))]
    return f"{color} {kind} for {GENDER_NOUNS.get(gender, 'a person')}"


def classify_gender(frame: np.ndarray, vlm: ModelClient) -> str:
    try:
        return vlm.request("vlm.gender", {"image": frame})["gender"]
    except ClientError as exc:
        log.warning("gender classification failed, using neutral wording: %s", exc)
        return "unknown"


def build_inpaint_mask(frame: np.ndarray, t2i: ModelClient, segmenter: ModelClient,
                       pose: ModelClient, rng: np.random.Generator, gender: str = "unknown",
                       retries: int = 3, colors=DEFAULT_COLORS, garment_types=DEFAULT_GARMENT_TYPES
                       ) -> tuple[MaskImage, str]:
    """Garment mask of an auxiliary image generated from the frame's pose.

    Returns ``(mask, auxiliary prompt)``. Empty segmentations are retried with
    a fresh prompt up to ``retries`` times.
    """
    h, w = frame.shape[:2]
    kps = pose.request("pose", {"image": frame})["keypoints"]
    for _ in range(retries + 1):
        prompt = compose_inpaint_prompt(colors, garment_types, gender, rng)
        aux = t2i.request("t2i", {}, {"keypoints": kps, "height": h, "width": w, "prompt": prompt},
                          seed=_seed(rng))["image"]
        if aux.shape[:2] != (h, w):
            raise StageError("inpaint-mask", f"auxiliary image has extents {aux.shape[:2]}")
        mask = segmenter.request("segmenter", {"image": aux}, {"label": "upper-clothes"})["mask"]
        if mask.any():
            return MaskImage(mask), prompt
    raise StageError("inpaint-mask", f"empty segmentation after {retries + 1} attempts")


def synthesize_alt_human(frame: np.ndarray, mask: MaskImage, prompt: str,
                         inpainter: ModelClient, seed: int = 0) -> np.ndarray:
    """Inpaint the masked region; anything changed outside the mask rejects the result."""
    if mask.empty:
        raise ValueError("inpaint mask is empty")
    if mask.shape != frame.shape[:2]:
        raise ValueError("mask and frame extents differ")
    out = inpainter.request("inpainter", {"image": frame, "mask": mask.data}, {"prompt": prompt},
                            seed=seed)["image"]
    if out.shape != frame.shape:
        raise StageError("synthesize", f"inpainter returned extents {out.shape}")
    outside = ~mask.data
    if not np.array_equal(out[outside], frame[outside]):
        raise StageError("synthesize", "inpainter changed pixels outside the mask")
    return out


# --- garment extraction -----------------------------------------------------------

GARMENT_CRITERIA = ("full_body", "sharpness", "occlusion", "lighting", "composition")


def rank_garment_frames(scores: dict[int, dict], k_top: int) -> int:
    """Top-``k_top`` by frontality, then lexicographic by the remaining criteria."""
    top = sorted(scores, key=lambda i: (-scores[i]["frontal"], i))[:k_top]
    return min(top, key=lambda i: tuple(-scores[i][c] for c in GARMENT_CRITERIA) + (i,))


def select_garment_frame(video, n_samples: int, k_top: int, vlm: ModelClient,
                         rng: np.random.Generator) -> int:
    video = check_video_u8(video)
    if not n_samples >= k_top >= 1:
        raise ValueError("require n_samples >= k_top >= 1")
    idx = sample_frames(len(video), n_samples, rng)
    scores = {i: vlm.request("vlm.garment_frame", {"image": video[i]}, seed=i) for i in idx}
    return rank_garment_frames(scores, k_top)


@dataclass
class GarmentExtraction:
    image: np.ndarray
    mask: MaskImage
    valid: bool
    offset: tuple = (0, 0)


def translate(image: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.empty_like(image)
    out[...] = fill
    h, w = image.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def translation_range(box: BBox, height: int, width: int) -> tuple[tuple, tuple]:
    """Inclusive ``(dy range, dx range)`` keeping ``box`` inside the canvas."""
    return ((-int(box.y0), height - int(box.y1)), (-int(box.x0), width - int(box.x1)))


def extract_garment_image(frame: np.ndarray, segmenter: ModelClient, vlm: ModelClient,
                          rng: np.random.Generator) -> GarmentExtraction:
    """Garment on white, randomly translated, with the validity verdict."""
    h, w = frame.shape[:2]
    mask = MaskImage(segmenter.request("segmenter", {"image": frame}, {"label": "upper-clothes"})["mask"])
    if mask.empty:
        return GarmentExtraction(np.full_like(frame, WHITE), mask, False)
    on_white = np.full_like(frame, WHITE)
    on_white[mask.data] = frame[mask.data]
    (dy0, dy1), (dx0, dx1) = translation_range(mask.bbox(), h, w)
    dy, dx = int(rng.integers(dy0, dy1 + 1)), int(rng.integers(dx0, dx1 + 1))
    image = translate(on_white, dy, dx, WHITE)
    moved = MaskImage(translate(mask.data, dy, dx, False))
    valid = bool(vlm.request("vlm.garment_valid", {"image": image})["valid"])
    return GarmentExtraction(image, moved, valid, (dy, dx))


# --- orchestration ---------------------------------------------------------------

@dataclass
class PipelineConfig:
    n_samples: int = 16
    k_top: int = 3
    face_scale: float = 3.0
    body_scale: float = 1.1
    retries: int = 3
    colors: tuple = DEFAULT_COLORS
    garment_types: tuple = DEFAULT_GARMENT_TYPES


@dataclass
class TripletResult:
    id: str
    mode: str
    sample: TripletSample | None
    provenance: dict = field(default_factory=dict)
    reason: str | None = None
    pose_keypoints: np.ndarray | None = None

    @property
    def rejected(self) -> bool:
        return self.sample is None


def extract_pose(video: np.ndarray, pose: ModelClient) -> PoseSequence:
    kps = [pose.request("pose", {"image": f})["keypoints"] for f in video]
    return PoseSequence(np.asarray(kps, dtype=np.float32), video.shape[1], video.shape[2])


def build_triplet(video, mode: str, suite: ModelClientSuite, seed: int, catalog_garment=None,
                  prompt: str = "", sample_id: str = "sample", source: str | None = None,
                  config: PipelineConfig | None = None) -> TripletResult:
    """Run the stages for one video; failures yield a rejected result with a stage-labeled reason."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    video = check_video_u8(video)
    if mode == "shop-pair" and catalog_garment is None:
        raise ValueError("shop-pair mode requires a catalog garment image")
    config = config or PipelineConfig()
    rng = np.random.default_rng(seed)
    prov: dict = {"mode": mode, "seed": int(seed), "clients": suite.describe()}
    try:
        try:
            pose = extract_pose(video, suite.pose)
        except ClientError as exc:
            raise StageError("pose", str(exc)) from exc
        garments = _garments(video, mode, suite, rng, catalog_garment, config, prov)
        human = _human(video, mode, suite, rng, config, prov)
    except StageError as exc:
        log.info("sample %s rejected: %s", sample_id, exc)
        return TripletResult(sample_id, mode, None, prov, str(exc))
    sample = TripletSample(
        human=video_from_uint8(human), garments=[video_from_uint8(g) for g in garments],
        pose=pose, prompt=prompt, truth=video_from_uint8(video),
        source=source or ("in-the-wild" if mode == "in-the-wild" else "internet"), id=sample_id)
    return TripletResult(sample_id, mode, sample, prov, None, pose.keypoints)


def _garments(video, mode, suite, rng, catalog, config, prov) -> list[np.ndarray]:
    if mode != "in-the-wild":
        catalog = np.asarray(catalog)
        if catalog.shape != video.shape[1:] or catalog.dtype != np.uint8:
            raise StageError("garment", f"catalog garment must be uint8 {video.shape[1:]}")
        prov["garment_source"] = "catalog"
        return [catalog]
    try:
        gi = select_garment_frame(video, config.n_samples, config.k_top, suite.vlm, rng)
        ext = extract_garment_image(video[gi], suite.segmenter, suite.vlm, rng)
    except ClientError as exc:
        raise StageError("garment-extract", str(exc)) from exc
    prov.update(garment_source="video", garment_frame=gi, garment_offset=list(ext.offset))
    if not ext.valid:
        raise StageError("garment-extract", "garment image rejected by validity check")
    return [ext.image]


def _human(video, mode, suite, rng, config, prov) -> np.ndarray:
    try:
        hi = select_human_frame(video, config.n_samples, suite.vlm, rng)
    except ClientError as exc:
        raise StageError("human-frame", str(exc)) from exc
    prov["human_frame"] = hi
    frame = video[hi]
    if mode == "no-synth-human":
        prov["human_source"] = "truth-frame"
        return frame.copy()
    try:
        face, body = detect_boxes(frame, suite.detector)
        spec = adaptive_crop(frame.shape[:2], face, body, (config.face_scale, config.body_scale), rng)
        cropped = crop_and_resize(frame, spec, frame.shape[:2])
        prov["crop"] = spec.to_dict()
        gender = classify_gender(cropped, suite.vlm)
        mask, aux_prompt = build_inpaint_mask(cropped, suite.t2i, suite.segmenter, suite.pose, rng,
                                              gender, config.retries, config.colors,
                                              config.garment_types)
        target = compose_inpaint_prompt(config.colors, config.garment_types, gender, rng)
        prov.update(gender=gender, aux_prompt=aux_prompt, inpaint_prompt=target,
                    mask_pixels=int(mask.data.sum()), human_source="synthesized")
        return synthesize_alt_human(cropped, mask, target, suite.inpainter, _seed(rng))
    except ClientError as exc:
        raise StageError("human-synthesis", str(exc)) from exc
