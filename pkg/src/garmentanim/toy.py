"""Synthetic-toy corpus: stick figures wearing solid-color garments.

Torso rectangles sit on the 4-pixel latent grid so that garment regions are
known exactly and survive the patch projection unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import PoseSequence, TripletSample

COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.75, 0.2), "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1), "orange": (0.95, 0.5, 0.05), "purple": (0.55, 0.15, 0.7),
    "cyan": (0.1, 0.8, 0.85), "pink": (0.95, 0.45, 0.7), "brown": (0.5, 0.3, 0.1),
    "black": (0.08, 0.08, 0.08), "white": (1.0, 1.0, 1.0), "gray": (0.5, 0.5, 0.5),
}

MOTIONS = ("walk-right", "walk-left", "wave", "jump")
MOTION_PROMPTS = {
    "walk-right": "a person walking right", "walk-left": "a person walking left",
    "wave": "a person waving arms", "jump": "a person jumping up",
}


@dataclass(frozen=True)
class ToyHuman:
    skin: tuple
    pants: tuple
    background: tuple


TOY_HUMANS = (
    ToyHuman((0.95, 0.8, 0.65), (0.1, 0.1, 0.35), (0.85, 0.85, 0.85)),
    ToyHuman((0.6, 0.4, 0.25), (0.25, 0.25, 0.25), (0.8, 0.9, 0.8)),
    ToyHuman((0.85, 0.65, 0.5), (0.35, 0.2, 0.1), (0.8, 0.8, 0.95)),
    ToyHuman((0.75, 0.55, 0.4), (0.05, 0.3, 0.3), (0.95, 0.9, 0.8)),
)


def toy_keypoints(motion: str, frames: int, size: int = 32) -> np.ndarray:
    """``[F, 14, 3]`` normalized keypoints for one of :data:`MOTIONS`."""
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion {motion!r}")
    s = size / 32.0
    out = np.zeros((frames, 14, 3), dtype=np.float32)
    for f in range(frames):
        cx, dy, arm = 16.0, 0.0, 0.0
        if motion == "walk-right":
            cx = 16.0 + 4.0 * (f - frames // 2)
        elif motion == "walk-left":
            cx = 16.0 - 4.0 * (f - frames // 2)
        elif motion == "wave":
            arm = 1.0 if f % 2 else -0.5
        elif motion == "jump":
            dy = -4.0 if f % 2 else 0.0
        cx = float(np.clip(cx, 8.0, 24.0))
        pts = [
            (cx, 4.5 + dy), (cx, 8.0 + dy),
            (cx - 4, 9 + dy), (cx - 7, 13 + dy - 6 * arm), (cx - 9, 17 + dy - 12 * arm),
            (cx + 4, 9 + dy), (cx + 7, 13 + dy - 6 * arm), (cx + 9, 17 + dy - 12 * arm),
            (cx - 2, 20 + dy), (cx - 3, 25 + dy), (cx - 3, 30 + dy),
            (cx + 2, 20 + dy), (cx + 3, 25 + dy), (cx + 3, 30 + dy),
        ]
        for j, (x, y) in enumerate(pts):
            out[f, j] = (np.clip(x * s / (size - 1), 0, 1), np.clip(y * s / (size - 1), 0, 1), 1.0)
    return out


def _thick_line(img, p0, p1, color, width):
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2) + 2
    h, w = img.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in zip(np.linspace(p0[0], p1[0], n), np.linspace(p0[1], p1[1], n)):
        m = (np.abs(xx - x) <= width / 2) & (np.abs(yy - y) <= width / 2)
        img[:, m] = np.asarray(color, dtype=np.float32)[:, None]


def render_figure(keypoints: np.ndarray, size: int, human: ToyHuman, garment) -> tuple[np.ndarray, np.ndarray]:
    """One frame ``[3, H, W]`` and its boolean torso (garment) mask."""
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(human.background, dtype=np.float32)[:, None, None]
    px = keypoints[:, 0] * (size - 1)
    py = keypoints[:, 1] * (size - 1)
    # legs, then torso, then arms and head on top
    for a, b in ((8, 9), (9, 10), (11, 12), (12, 13)):
        _thick_line(img, (px[a], py[a]), (px[b], py[b]), human.pants, 2)
    s = size // 32
    cx, top = int(round(px[1])), int(round(py[1]))
    x0, x1 = cx - 4 * s, cx + 4 * s
    y0, y1 = top, top + 12 * s
    mask = np.zeros((size, size), dtype=bool)
    mask[max(y0, 0):min(y1, size), max(x0, 0):min(x1, size)] = True
    img[:, mask] = np.asarray(garment, dtype=np.float32)[:, None]
    for a, b in ((2, 3), (3, 4), (5, 6), (6, 7)):
        _thick_line(img, (px[a], py[a]), (px[b], py[b]), human.skin, 1)
    yy, xx = np.mgrid[0:size, 0:size]
    head = (xx - px[0]) ** 2 + (yy - py[0]) ** 2 <= (3.2 * s) ** 2
    img[:, head] = np.asarray(human.skin, dtype=np.float32)[:, None]
    mask &= np.all(img == np.asarray(garment, dtype=np.float32)[:, None, None], axis=0)
    return img, mask


def garment_image(color, size: int = 32) -> np.ndarray:
    """Torso-shaped garment on a white canvas, ``[1, 3, H, W]``."""
    img = np.ones((1, 3, size, size), dtype=np.float32)
    s = size // 32
    img[0, :, 8 * s:20 * s, 12 * s:20 * s] = np.asarray(color, dtype=np.float32)[:, None, None]
    return img


def toy_triplet(human_index: int, garment: str, motion: str, alt_garment: str,
                frames: int = 4, size: int = 32, sample_id: str = "") -> TripletSample:
    human = TOY_HUMANS[human_index % len(TOY_HUMANS)]
    kps = toy_keypoints(motion, frames, size)
    truth, masks = zip(*(render_figure(kp, size, human, COLORS[garment]) for kp in kps))
    still = toy_keypoints("wave", 1, size)[0]
    still[3:5, 1] = still[6:8, 1] = 13.0 / (size - 1)
    portrait, _ = render_figure(still, size, human, COLORS[alt_garment])
    return TripletSample(
        human=portrait[None],
        garments=[garment_image(COLORS[garment], size)],
        pose=PoseSequence(kps, size, size),
        prompt=MOTION_PROMPTS[motion],
        truth=np.stack(truth),
        source="synthetic-toy",
        id=sample_id or f"toy-h{human_index}-{garment}-{motion}",
        garment_masks=np.stack(masks),
    )


# Training pairs: every human appears with two garments and one motion, so the
# garment image is the only cue that separates its two triplets.
TRAIN_PAIRS = (
    (0, "red", "walk-right", "gray"), (0, "blue", "walk-right", "gray"),
    (1, "green", "wave", "white"), (1, "yellow", "wave", "white"),
    (2, "purple", "walk-left", "black"), (2, "orange", "walk-left", "black"),
    (3, "cyan", "jump", "brown"), (3, "pink", "jump", "brown"),
)
HELDOUT_PAIRS = ((0, "green", "walk-right", "gray"), (2, "red", "walk-left", "black"))


def toy_corpus(frames: int = 4, size: int = 32, pairs=TRAIN_PAIRS) -> list[TripletSample]:
    return [toy_triplet(h, g, m, a, frames, size) for h, g, m, a in pairs]


def heldout_corpus(frames: int = 4, size: int = 32) -> list[TripletSample]:
    return toy_corpus(frames, size, HELDOUT_PAIRS)
