"""Evaluation metrics (L1, PSNR, SSIM, LPIPS proxy, FID, VFID) and report tables.

Videos are float arrays ``[F, 3, H, W]`` in ``[0, 1]``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SHRINKAGE = 1e-3
NEG_EIG_TOL = 1e-6


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if b.ndim == 3:
        b = b[None]
    if a.shape != b.shape or a.ndim != 4:
        raise MetricError(f"extent mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("non-finite pixel values")
    return a, b


# --- pixel metrics -------------------------------------------------------------------

def l1(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean([np.abs(x - y).mean() for x, y in zip(a, b)]))


def psnr_frame(x: np.ndarray, y: np.ndarray) -> float:
    mse = float(np.mean((x - y) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean([psnr_frame(x, y) for x, y in zip(a, b)]))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable window over the valid region of a 2-D image."""
    r = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray | None = None) -> float:
    win = gaussian_window() if win is None else win
    if min(x.shape) < len(win):
        raise MetricError(f"image {x.shape} smaller than the {len(win)}x{len(win)} SSIM window")
    mx, my = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mx * mx
    syy = _filter(y * y, win) - my * my
    sxy = _filter(x * y, win) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(pred, truth) -> float:
    """Per-channel Gaussian-window SSIM, averaged over channels then frames."""
    a, b = _pair(pred, truth)
    if np.array_equal(a, b):
        return 1.0
    win = gaussian_window()
    return float(np.mean([np.mean([ssim_channel(x[c], y[c], win) for c in range(x.shape[0])])
                          for x, y in zip(a, b)]))


def pixel_metrics(pred, truth) -> tuple[float, float, float]:
    """``(L1, PSNR, SSIM)`` per-frame means."""
    return l1(pred, truth), psnr(pred, truth), ssim(pred, truth)


# --- feature extractors -----------------------------------------------------------

@dataclass
class FeatureExtractor:
    """Image extractor (``layers``) or clip extractor (``clip``), deterministic."""

    kind: str
    dim: int
    name: str = "stub"
    layers: Callable[[np.ndarray], list] | None = None
    clip: Callable[[np.ndarray], np.ndarray] | None = None

    def image_layers(self, frame: np.ndarray) -> list[np.ndarray]:
        if self.kind != "image" or self.layers is None:
            raise MetricError(f"{self.name} is not an image extractor")
        return self.layers(frame)

    def image_vector(self, frame: np.ndarray) -> np.ndarray:
        return np.concatenate([f.mean(axis=(1, 2)) for f in self.image_layers(frame)])[: self.dim]

    def clip_vector(self, video: np.ndarray) -> np.ndarray:
        if self.kind != "video-clip" or self.clip is None:
            raise MetricError(f"{self.name} is not a clip extractor")
        v = np.asarray(self.clip(np.asarray(video, dtype=np.float64)), dtype=np.float64)
        if v.shape != (self.dim,) or not np.all(np.isfinite(v)):
            raise MetricError(f"{self.name}: bad feature vector {v.shape}")
        return v


def _conv3x3(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """``x [C, H, W]``, ``w [O, C, 3, 3]`` -> ``[O, H', W']`` with zero padding."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, i:i + h, j:j + wd] for i in range(3) for j in range(3)], axis=1)
    out = np.einsum("ockl,cklhw->ohw", w.reshape(w.shape[0], c, 3, 3),
                    cols.reshape(c, 3, 3, h, wd))
    return out[:, ::stride, ::stride]


def conv_stack_extractor(seed: int = 0, widths: Sequence[int] = (8, 16, 32)) -> FeatureExtractor:
    """Fixed random conv/ReLU stack; each layer output is one feature map."""
    rng = np.random.default_rng(seed)
    weights, c = [], 3
    for o in widths:
        weights.append(rng.normal(0, math.sqrt(2.0 / (9 * c)), size=(o, c, 3, 3)))
        c = o

    def layers(frame: np.ndarray) -> list[np.ndarray]:
        x, out = np.asarray(frame, dtype=np.float64) * 2 - 1, []
        for i, w in enumerate(weights):
            x = np.maximum(_conv3x3(x, w, 2 if i else 1), 0.0)
            out.append(x)
        return out

    return FeatureExtractor("image", int(sum(widths)), f"conv-stack-{seed}", layers=layers)


def pyramid_clip_extractor(name: str = "i3d", seed: int = 0, levels: int = 3) -> FeatureExtractor:
    """Spatio-temporal average-pool pyramid followed by a fixed random projection."""
    rng = np.random.default_rng(seed)
    dim = 16
    raw_dim = sum(3 * (2 ** l) ** 2 * 2 for l in range(levels))
    proj = rng.normal(0, 1 / math.sqrt(raw_dim), size=(raw_dim, dim))

    def clip(video: np.ndarray) -> np.ndarray:
        f = video.shape[0]
        halves = [video[: max(1, f // 2)], video[f // 2:] if f > 1 else video]
        feats = []
        for l in range(levels):
            g = 2 ** l
            for part in halves:
                m = part.mean(axis=0)
                c, h, w = m.shape
                hs, ws = np.array_split(np.arange(h), g), np.array_split(np.arange(w), g)
                feats.extend(m[:, ys][:, :, xs].mean(axis=(1, 2)) for ys in hs for xs in ws)
        x = np.concatenate(feats)
        return np.tanh(x @ proj * 4)

    return FeatureExtractor("video-clip", dim, name, clip=clip)


VFID_BACKENDS = {"i3d": 101, "resnext": 202}


def default_clip_extractors() -> dict[str, FeatureExtractor]:
    return {name: pyramid_clip_extractor(name, seed) for name, seed in VFID_BACKENDS.items()}


# --- perceptual distances ----------------------------------------------------------

def _unit(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt(np.sum(f * f, axis=0, keepdims=True)) + eps)


def lpips_proxy(pred, truth, fx: FeatureExtractor | None = None) -> float:
    """Mean over frames of unit-normalized feature distances averaged across layers."""
    a, b = _pair(pred, truth)
    fx = fx or conv_stack_extractor()
    out = []
    for x, y in zip(a, b):
        if np.array_equal(x, y):
            out.append(0.0)
            continue
        dists = [float(np.mean(np.sum((_unit(p) - _unit(q)) ** 2, axis=0)))
                 for p, q in zip(fx.image_layers(x), fx.image_layers(y))]
        out.append(float(np.mean(dists)))
    return float(np.mean(out))


def _covariance(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        cov = cov + SHRINKAGE * np.eye(d)
    return cov


def sqrtm_product_trace(s1: np.ndarray, s2: np.ndarray) -> float:
    """``tr((S1 S2)^{1/2})`` via the symmetric form ``S1^{1/2} S2 S1^{1/2}``."""
    w1, v1 = np.linalg.eigh((s1 + s1.T) / 2)
    if w1.min() < -NEG_EIG_TOL:
        raise MetricError(f"covariance has negative eigenvalue {w1.min():.3g}")
    r1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    m = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if w.min() < -NEG_EIG_TOL * max(1.0, abs(w).max()):
        raise MetricError(f"product has negative eigenvalue {w.min():.3g}")
    return float(np.sum(np.sqrt(np.clip(w, 0, None))))


def frechet_from_stats(mu1, s1, mu2, s2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(s1).astype(np.float64), np.atleast_2d(s2).astype(np.float64)
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * sqrtm_product_trace(s1, s2))
    return max(val, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets ``[N, d]``."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or not len(a) or not len(b):
        raise MetricError(f"feature sets must be [N, d] with equal d: {a.shape}, {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("non-finite features")
    if a.shape == b.shape and np.array_equal(a[np.lexsort(a.T)], b[np.lexsort(b.T)]):
        return 0.0  # same multiset of vectors
    return frechet_from_stats(a.mean(0), _covariance(a), b.mean(0), _covariance(b))


def fid(preds: Sequence, truths: Sequence, fx: FeatureExtractor | None = None) -> float:
    """Frame-level Fréchet distance over all frames of all videos."""
    fx = fx or conv_stack_extractor()
    fa = [fx.image_vector(f) for v in preds for f in np.asarray(v, dtype=np.float64)]
    fb = [fx.image_vector(f) for v in truths for f in np.asarray(v, dtype=np.float64)]
    return frechet_distance(np.stack(fa), np.stack(fb))


def vfid(preds: Sequence, truths: Sequence, fx: FeatureExtractor) -> float:
    if not preds or not truths:
        raise MetricError("vfid needs non-empty clip lists")
    fa = np.stack([fx.clip_vector(v) for v in preds])
    fb = np.stack([fx.clip_vector(v) for v in truths])
    return frechet_distance(fa, fb)


# --- reports ----------------------------------------------------------------------------

COLUMNS = ("L1", "PSNR", "SSIM", "LPIPS", "FID", "VFID_I3D", "VFID_ResNeXt")
HIGHER_BETTER = {"PSNR", "SSIM"}
PRECISION = {"L1": 4, "PSNR": 2, "SSIM": 4, "LPIPS": 4, "FID": 2, "VFID_I3D": 2, "VFID_ResNeXt": 2}
LAYOUTS = ("table1", "table2", "ablation")
LAYOUT_TITLES = {"table1": "Subject-to-image + animation baselines",
                 "table2": "Image try-on + animation baselines", "ablation": "Ablation"}


@dataclass
class MetricReport:
    method: str
    dataset: str
    values: dict
    per_pair: list = field(default_factory=list)

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.values]
        if missing:
            raise MetricError(f"report {self.method!r} lacks {missing}")
        self.values = {c: float(self.values[c]) for c in COLUMNS}

    def flagged(self) -> list[str]:
        return [c for c in COLUMNS if not math.isfinite(self.values[c])]


def evaluate_pairs(preds: Sequence, truths: Sequence, method: str = "ours", dataset: str = "toy",
                   image_fx: FeatureExtractor | None = None,
                   clip_fx: dict[str, FeatureExtractor] | None = None) -> MetricReport:
    if len(preds) != len(truths) or not preds:
        raise MetricError("need equally many (pred, truth) videos, at least one")
    image_fx = image_fx or conv_stack_extractor()
    clip_fx = clip_fx or default_clip_extractors()
    pairs = []
    for p, t in zip(preds, truths):
        l, ps, ss = pixel_metrics(p, t)
        pairs.append({"L1": l, "PSNR": ps, "SSIM": ss, "LPIPS": lpips_proxy(p, t, image_fx)})
    values = {k: float(np.mean([r[k] for r in pairs])) for k in ("L1", "PSNR", "SSIM", "LPIPS")}
    values["FID"] = fid(preds, truths, image_fx)
    values["VFID_I3D"] = vfid(preds, truths, clip_fx["i3d"])
    values["VFID_ResNeXt"] = vfid(preds, truths, clip_fx["resnext"])
    return MetricReport(method, dataset, values, pairs)


def best_rows(reports: Sequence[MetricReport]) -> dict[str, set]:
    """Indices of the best row per column (ties share the marker), compared at display precision."""
    out = {}
    for c in COLUMNS:
        vals = [round(r.values[c], PRECISION[c]) for r in reports]
        target = max(vals) if c in HIGHER_BETTER else min(vals)
        out[c] = {i for i, v in enumerate(vals) if v == target}
    return out


def _fmt(value: float, col: str) -> str:
    return "nan" if not math.isfinite(value) else f"{value:.{PRECISION[col]}f}"


def _ordered(items) -> list:
    return list(dict.fromkeys(items))


def _grid(reports: Sequence[MetricReport], layout: str):
    """Method rows by dataset blocks; each cell is a report or None."""
    methods = _ordered(r.method for r in reports)
    datasets = _ordered(r.dataset for r in reports)
    cells = {}
    for r in reports:
        if (r.method, r.dataset) in cells:
            raise MetricError(f"duplicate row for {r.method!r} on {r.dataset!r}")
        cells[(r.method, r.dataset)] = r
    return methods, datasets, cells


def render_text(reports: Sequence[MetricReport], layout: str = "table1") -> str:
    """Fixed-width table: one row per method, one column block per dataset.

    The best value of each column within a dataset block is wrapped in ``**``.
    """
    _check(reports, layout)
    methods, datasets, cells = _grid(reports, layout)
    marks = {}
    for d in datasets:
        block = [cells[(m, d)] for m in methods if (m, d) in cells]
        best = best_rows(block) if len(block) > 1 else {c: set() for c in COLUMNS}
        for c in COLUMNS:
            for i, r in enumerate(block):
                marks[(r.method, d, c)] = i in best[c]
    header = ["Method"] + [f"{d}:{c}" if len(datasets) > 1 else c for d in datasets for c in COLUMNS]
    rows = []
    for m in methods:
        row = [m]
        for d in datasets:
            r = cells.get((m, d))
            for c in COLUMNS:
                s = "-" if r is None else _fmt(r.values[c], c)
                row.append(f"**{s}**" if r is not None and marks[(m, d, c)] else s)
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]

    def line(cells_):
        return "  ".join(x.ljust(w) if j == 0 else x.rjust(w)
                         for j, (x, w) in enumerate(zip(cells_, widths))).rstrip()

    arrows = ", ".join(f"{c} {'higher' if c in HIGHER_BETTER else 'lower'}" for c in COLUMNS)
    title = f"{LAYOUT_TITLES[layout]} [datasets: {', '.join(datasets)}] ({arrows} is better)"
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule] + [line(r) for r in rows] + [rule]) + "\n"


def render_csv(reports: Sequence[MetricReport], layout: str = "table1") -> str:
    """Long-form CSV (one line per method and dataset); floats use ``repr`` so they round-trip."""
    _check(reports, layout)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset"] + list(COLUMNS))
    for r in reports:
        w.writerow([r.method, r.dataset] + [repr(r.values[c]) for c in COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[MetricReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["method", "dataset"] + list(COLUMNS):
        raise MetricError("CSV header does not match the report columns")
    return [MetricReport(r[0], r[1], dict(zip(COLUMNS, map(float, r[2:])))) for r in rows[1:]]


def parse_text(text: str) -> dict[tuple, dict]:
    """Numeric cells of a fixed-width table keyed by ``(method, dataset)``, markers stripped."""
    lines = text.splitlines()
    header = lines[2].split()[1:]
    out: dict[tuple, dict] = {}
    for line in lines[4:-1]:
        parts = line.split()
        method = " ".join(parts[: len(parts) - len(header)])
        for key, cell in zip(header, parts[-len(header):]):
            dataset, col = key.rsplit(":", 1) if ":" in key else ("", key)
            if cell != "-":
                out.setdefault((method, dataset), {})[col] = float(cell.strip("*"))
    return out


def render_report(reports: Sequence[MetricReport], layout: str = "table1") -> tuple[str, str]:
    """``(fixed-width text, CSV)`` renderings in the published column order."""
    return render_text(reports, layout), render_csv(reports, layout)


def _check(reports, layout):
    if layout not in LAYOUTS:
        raise MetricError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not reports:
        raise MetricError("no reports to render")
    if layout == "ablation" and len({r.dataset for r in reports}) > 1:
        raise MetricError("ablation rows must share one dataset tag")
    if any(" " in r.dataset or ":" in r.dataset for r in reports):
        raise MetricError("dataset tags may not contain spaces or ':'")
