"""Turn triplet media into latents and condition tokens.

Videos are float32 arrays ``[F, 3, H, W]`` with values in ``[0, 1]``; single
images are one-frame videos. Latents are ``[T', C, h, w]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .autograd import ParamSet, Tensor
from .backbone import BackboneConfig, HiddenState, add_positions, extract_patches, linear

SPATIAL_STRIDE = 4
TEMPORAL_STRIDE = 1
LATENT_CHANNELS = 8
SOURCES = ("internet", "captured", "in-the-wild", "synthetic-toy")


# --- media types ----------------------------------------------------------------

def check_video(video, name: str = "video") -> np.ndarray:
    arr = np.asarray(video, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be [F, 3, H, W], got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} has no frames")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def video_from_uint8(frames: np.ndarray) -> np.ndarray:
    """``[F, H, W, 3]`` (or ``[H, W, 3]``) uint8 -> ``[F, 3, H, W]`` float32."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    return (frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0)


def video_to_uint8(video: np.ndarray) -> np.ndarray:
    video = np.clip(np.asarray(video, dtype=np.float32), 0.0, 1.0)
    return np.round(video * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


# 14-joint skeleton: head, neck, shoulders/elbows/wrists, hips/knees/ankles.
JOINT_NAMES = ("head", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
               "l_wrist", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle")
BONES = ((0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
         (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13))
LIMB_COLORS = np.array([
    (1.0, 0.0, 0.0), (1.0, 0.33, 0.0), (1.0, 0.66, 0.0), (1.0, 1.0, 0.0),
    (0.66, 1.0, 0.0), (0.33, 1.0, 0.0), (0.0, 1.0, 0.0), (0.0, 1.0, 0.33),
    (0.0, 1.0, 0.66), (0.0, 1.0, 1.0), (0.0, 0.66, 1.0), (0.0, 0.33, 1.0),
    (0.0, 0.0, 1.0),
], dtype=np.float32)
JOINT_COLOR = np.array((1.0, 1.0, 1.0), dtype=np.float32)


@dataclass
class PoseSequence:
    """Per-frame keypoints ``[F, J, 3]`` as normalized ``(x, y, confidence)``."""

    keypoints: np.ndarray
    height: int
    width: int
    rendered: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float32)
        if kp.ndim != 3 or kp.shape[-1] != 3:
            raise ValueError(f"keypoints must be [F, J, 3], got {kp.shape}")
        if np.any((kp[..., 2] < 0) | (kp[..., 2] > 1)):
            raise ValueError("keypoint confidence must lie in [0, 1]")
        self.keypoints = kp
        if self.rendered is None:
            self.rendered = render_pose(kp, self.height, self.width)

    @property
    def frames(self) -> int:
        return self.keypoints.shape[0]


def _draw_line(img, p0, p1, color):
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    xs = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    ys = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    h, w = img.shape[1:]
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[:, ys[ok], xs[ok]] = color[:, None]


def render_pose(keypoints: np.ndarray, height: int, width: int, min_conf: float = 0.3) -> np.ndarray:
    """Rasterize skeletons on black: 1-px color-coded bones, 3-px joint discs."""
    keypoints = np.asarray(keypoints, dtype=np.float32)
    out = np.zeros((keypoints.shape[0], 3, height, width), dtype=np.float32)
    yy, xx = np.mgrid[0:height, 0:width]
    for f, kp in enumerate(keypoints):
        px = kp[:, 0] * (width - 1)
        py = kp[:, 1] * (height - 1)
        for b, (i, j) in enumerate(BONES):
            if kp[i, 2] >= min_conf and kp[j, 2] >= min_conf:
                _draw_line(out[f], (px[i], py[i]), (px[j], py[j]), LIMB_COLORS[b])
        for i in range(kp.shape[0]):
            if kp[i, 2] >= min_conf:
                disc = (xx - np.rint(px[i])) ** 2 + (yy - np.rint(py[i])) ** 2 <= 2.25
                out[f][:, disc] = JOINT_COLOR[:, None]
    return out


@dataclass
class TripletSample:
    """Human image, garment images, pose, prompt and ground-truth video."""

    human: np.ndarray
    garments: list
    pose: PoseSequence
    prompt: str
    truth: np.ndarray
    source: str = "synthetic-toy"
    id: str = ""
    garment_masks: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.human = check_video(self.human, "human")
        if self.human.shape[0] != 1:
            raise ValueError("human image must be a single frame")
        if not self.garments:
            raise ValueError("at least one garment image is required")
        self.garments = [check_video(g, "garment") for g in self.garments]
        if any(g.shape[0] != 1 for g in self.garments):
            raise ValueError("garment images must be single frames")
        self.truth = check_video(self.truth, "truth")
        if self.pose.frames != self.truth.shape[0]:
            raise ValueError("pose and truth video frame counts differ")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def frames(self) -> int:
        return self.truth.shape[0]


# --- latent stand-in ------------------------------------------------------------

@dataclass
class LatentVolume:
    data: np.ndarray  # [T', C, h, w]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"latent must be [T', C, h, w], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latent contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple:
        return self.data.shape[1:]


@lru_cache(maxsize=None)
def latent_projection(stride: int = SPATIAL_STRIDE, channels: int = LATENT_CHANNELS,
                      seed: int = 20240) -> np.ndarray:
    """Orthonormal ``[channels, 3*stride*stride]`` patch projection.

    The first three rows are the normalized per-color patch-mean directions,
    the rest a fixed random orthonormal completion, so decoding always
    recovers at least the per-patch mean color.
    """
    dim = 3 * stride * stride
    if not 3 <= channels <= dim:
        raise ValueError("channels must be between 3 and the patch dimension")
    means = np.zeros((3, dim))
    for c in range(3):
        means[c, c * stride * stride:(c + 1) * stride * stride] = 1.0 / stride
    rng = np.random.default_rng(seed)
    rand = rng.normal(size=(channels - 3, dim))
    rand -= rand @ means.T @ means
    q, _ = np.linalg.qr(rand.T)
    proj = np.concatenate([means, q.T[: channels - 3]], axis=0)
    proj.setflags(write=False)
    return proj


def _spatial_patches(video: np.ndarray, stride: int) -> np.ndarray:
    f, c, h, w = video.shape
    if h % stride or w % stride:
        raise ValueError(f"frame extents {(h, w)} not divisible by stride {stride}")
    x = video.reshape(f, c, h // stride, stride, w // stride, stride)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(f, h // stride, w // stride, c * stride * stride)


def encode_latent(video, stride: int = SPATIAL_STRIDE) -> LatentVolume:
    """Training-free stand-in for a VAE encoder: fixed linear patch projection."""
    video = check_video(video)
    proj = latent_projection(stride)
    patches = _spatial_patches(video.astype(np.float64), stride)
    lat = patches @ proj.T  # [F, h, w, C]
    return LatentVolume(lat.transpose(0, 3, 1, 2).astype(np.float32))


def decode_latent(latent, stride: int = SPATIAL_STRIDE) -> np.ndarray:
    """Pseudo-inverse of :func:`encode_latent`; returns ``[F, 3, H, W]``."""
    data = latent.data if isinstance(latent, LatentVolume) else np.asarray(latent)
    proj = latent_projection(stride)
    f, c, h, w = data.shape
    patches = data.transpose(0, 2, 3, 1).astype(np.float64) @ proj  # [F, h, w, 3*s*s]
    x = patches.reshape(f, h, w, 3, stride, stride).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(f, 3, h * stride, w * stride).astype(np.float32)


# --- condition contexts ---------------------------------------------------------

def build_ham_context(z_h: LatentVolume, z_p: LatentVolume) -> LatentVolume:
    """Human latent followed by the pose latents along time."""
    if z_h.frames != 1:
        raise ValueError("human latent must have exactly one frame")
    if z_p.frames and z_p.spatial != z_h.spatial:
        raise ValueError(f"spatial/channel mismatch {z_h.spatial} vs {z_p.spatial}")
    if not z_p.frames:
        return LatentVolume(z_h.data.copy())
    return LatentVolume(np.concatenate([z_h.data, z_p.data], axis=0))


def build_gtm_context(z_g: Sequence[LatentVolume], target_frames: int) -> LatentVolume:
    """Garment latents in order, zero-padded to ``target_frames`` frames."""
    if not z_g:
        raise ValueError("at least one garment latent is required")
    if any(z.frames != 1 for z in z_g):
        raise ValueError("each garment latent must have exactly one frame")
    spatial = z_g[0].spatial
    if any(z.spatial != spatial for z in z_g):
        raise ValueError("garment latents have mismatched extents")
    if len(z_g) > target_frames:
        raise ValueError(f"{len(z_g)} garments do not fit in {target_frames} context frames")
    out = np.zeros((target_frames,) + spatial, dtype=np.float32)
    out[: len(z_g)] = np.concatenate([z.data for z in z_g], axis=0)
    return LatentVolume(out)


class TokenSeq(HiddenState):
    """Condition tokens ``[B, M, D]`` with their grid."""


def project_context(ctx, params: ParamSet, prefix: str, cfg: BackboneConfig) -> TokenSeq:
    """3D convolution with kernel = stride = patch extents, flattened to tokens.

    ``ctx`` is a :class:`LatentVolume` or a batched ``[B, T', C, h, w]`` array.
    """
    data = ctx.data if isinstance(ctx, LatentVolume) else ctx
    patches, grid = extract_patches(data, cfg.patch)
    dtype = params[prefix + ".w"].dtype
    return TokenSeq(linear(params, prefix, Tensor(patches.astype(dtype))), grid)


def embed_context(ctx, params: ParamSet, prefix: str, cfg: BackboneConfig) -> TokenSeq:
    """:func:`project_context` plus fixed positions on the context grid."""
    tok = project_context(ctx, params, prefix, cfg)
    return TokenSeq(add_positions(tok.tokens, tok.grid), tok.grid)


def sample_latents(sample: TripletSample, stride: int = SPATIAL_STRIDE):
    """``(truth, ham_ctx, gtm_ctx)`` latent arrays for one triplet."""
    z_truth = encode_latent(sample.truth, stride)
    z_h = encode_latent(sample.human, stride)
    z_p = encode_latent(sample.pose.rendered, stride)
    ham = build_ham_context(z_h, z_p)
    gtm = build_gtm_context([encode_latent(g, stride) for g in sample.garments], ham.frames)
    return z_truth.data, ham.data, gtm.data
