"""External-model clients: wire format, response schemas, stubs and HTTP transport.

Every client exposes ``request(task, media, params, seed) -> dict``. Responses
are produced in wire form (images as base64 PNG), validated against the
task schema, and decoded to numpy arrays, whether they come from the
in-process stub or from a remote endpoint. Images are ``uint8 [H, W, 3]``,
masks ``bool [H, W]``.
"""
from __future__ import annotations

import base64
import hashlib
import io
import logging
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import jsonschema
import numpy as np

log = logging.getLogger(__name__)

ROLES = ("vlm", "detector", "segmenter", "t2i", "inpainter", "pose")
ENV_PREFIX = "GARMENTANIM_"
NUM_JOINTS = 14


class ClientError(RuntimeError):
    """A model client failed or returned an invalid response."""


# --- wire format -----------------------------------------------------------------

def encode_png(arr: np.ndarray) -> str:
    from PIL import Image

    arr = np.asarray(arr)
    if arr.dtype == bool:
        img = Image.fromarray(arr.astype(np.uint8) * 255, mode="L")
    else:
        img = Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(text: str, mask: bool = False) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(io.BytesIO(base64.b64decode(text, validate=True)))
        img.load()
    except Exception as exc:  # corrupt payloads surface as client errors
        raise ClientError(f"undecodable image payload: {exc}") from exc
    if mask:
        return np.asarray(img.convert("L")) >= 128
    return np.asarray(img.convert("RGB"))


_BOX = {"oneOf": [{"type": "null"},
                  {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}]}
_SCORE = {"type": "number", "minimum": 0, "maximum": 100}

SCHEMAS: dict[str, dict] = {
    "vlm.human_frame": {
        "type": "object",
        "required": ["face_unoccluded", "eyes_open", "frontal", "quality"],
        "properties": {"face_unoccluded": {"type": "boolean"}, "eyes_open": {"type": "boolean"},
                       "frontal": {"type": "boolean"}, "quality": _SCORE},
    },
    "vlm.garment_frame": {
        "type": "object",
        "required": ["frontal", "full_body", "sharpness", "occlusion", "lighting", "composition"],
        "properties": {k: _SCORE for k in ("frontal", "full_body", "sharpness", "occlusion",
                                           "lighting", "composition")},
    },
    "vlm.gender": {
        "type": "object", "required": ["gender"],
        "properties": {"gender": {"enum": ["male", "female", "unknown"]}},
    },
    "vlm.garment_valid": {
        "type": "object", "required": ["valid"], "properties": {"valid": {"type": "boolean"}},
    },
    "detector": {
        "type": "object", "required": ["face", "body"], "properties": {"face": _BOX, "body": _BOX},
    },
    "segmenter": {
        "type": "object", "required": ["mask"], "properties": {"mask": {"type": "string"}},
    },
    "pose": {
        "type": "object", "required": ["keypoints"],
        "properties": {"keypoints": {
            "type": "array", "minItems": NUM_JOINTS, "maxItems": NUM_JOINTS,
            "items": {"type": "array", "minItems": 3, "maxItems": 3,
                      "items": {"type": "number", "minimum": 0, "maximum": 1}}}},
    },
    "t2i": {"type": "object", "required": ["image"], "properties": {"image": {"type": "string"}}},
    "inpainter": {"type": "object", "required": ["image"], "properties": {"image": {"type": "string"}}},
}
IMAGE_FIELDS = {"segmenter": ("mask", True), "t2i": ("image", False), "inpainter": ("image", False)}


def decode_response(task: str, raw: Any) -> dict:
    """Validate a wire-form response and decode its image field, if any."""
    if task not in SCHEMAS:
        raise ClientError(f"unknown task {task!r}")
    try:
        jsonschema.validate(raw, SCHEMAS[task])
    except jsonschema.ValidationError as exc:
        raise ClientError(f"{task}: response failed schema validation: {exc.message}") from exc
    out = dict(raw)
    if task in IMAGE_FIELDS:
        key, is_mask = IMAGE_FIELDS[task]
        out[key] = decode_png(raw[key], mask=is_mask)
    return out


def encode_request(task: str, media: Mapping[str, np.ndarray], params: Mapping, seed: int) -> dict:
    return {"task": task, "media": {k: encode_png(v) for k, v in sorted(media.items())},
            "params": dict(params), "seed": int(seed)}


def decode_request(body: Mapping) -> tuple[str, dict, dict, int]:
    media = {k: decode_png(v, mask=k == "mask") for k, v in body.get("media", {}).items()}
    return body["task"], media, dict(body.get("params", {})), int(body.get("seed", 0))


# --- stub backend ----------------------------------------------------------------

PALETTE = {
    "red": (220, 30, 30), "green": (30, 180, 60), "blue": (40, 60, 220), "yellow": (235, 215, 30),
    "orange": (240, 130, 20), "purple": (140, 40, 180), "pink": (240, 120, 180),
    "black": (20, 20, 20), "white": (250, 250, 250), "gray": (128, 128, 128),
    "brown": (130, 80, 30), "navy": (20, 30, 90), "beige": (220, 200, 160),
}


def _digest_rng(*parts) -> np.random.Generator:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.tobytes() if isinstance(p, np.ndarray) else repr(p).encode())
        h.update(b"|")
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def foreground(image: np.ndarray, tol: int = 24) -> np.ndarray:
    """Pixels differing from the top-left corner color by more than ``tol``."""
    ref = image[0, 0].astype(np.int16)
    return np.any(np.abs(image.astype(np.int16) - ref) > tol, axis=-1)


def _body_box(image: np.ndarray):
    ys, xs = np.nonzero(foreground(image))
    if ys.size == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def stub_detect(image: np.ndarray) -> dict:
    body = _body_box(image)
    if body is None:
        return {"face": None, "body": None}
    x0, y0, x1, y1 = body
    band = max(1, (y1 - y0) // 5)
    ys, xs = np.nonzero(foreground(image)[y0:y0 + band])
    face = [int(xs.min()), y0, int(xs.max()) + 1, y0 + band]
    return {"face": face, "body": body}


def stub_segment(image: np.ndarray) -> np.ndarray:
    """Upper-clothes mask: the dominant foreground color of the torso band."""
    fg = foreground(image)
    body = _body_box(image)
    mask = np.zeros(fg.shape, dtype=bool)
    if body is None:
        return mask
    x0, y0, x1, y1 = body
    h = y1 - y0
    t0, t1 = y0 + int(0.25 * h), y0 + max(int(0.6 * h), int(0.25 * h) + 1)
    band = image[t0:t1, x0:x1][fg[t0:t1, x0:x1]]
    if band.size == 0:
        return mask
    colors, counts = np.unique(band.reshape(-1, 3), axis=0, return_counts=True)
    mode = colors[np.argmax(counts)].astype(np.int16)
    close = np.all(np.abs(image.astype(np.int16) - mode) <= 8, axis=-1)
    mask[y0:y1, x0:x1] = close[y0:y1, x0:x1] & fg[y0:y1, x0:x1]
    return mask


def stub_pose(image: np.ndarray) -> list:
    """Keypoints laid out proportionally inside the foreground box."""
    h, w = image.shape[:2]
    body = _body_box(image)
    if body is None:
        return [[0.0, 0.0, 0.0]] * NUM_JOINTS
    x0, y0, x1, y1 = body
    layout = [(0.5, 0.1), (0.5, 0.22), (0.2, 0.25), (0.1, 0.4), (0.05, 0.55), (0.8, 0.25),
              (0.9, 0.4), (0.95, 0.55), (0.38, 0.6), (0.35, 0.8), (0.35, 0.98), (0.62, 0.6),
              (0.65, 0.8), (0.65, 0.98)]
    out = []
    for fx, fy in layout:
        px = (x0 + fx * (x1 - x0 - 1)) / max(w - 1, 1)
        py = (y0 + fy * (y1 - y0 - 1)) / max(h - 1, 1)
        out.append([float(np.clip(px, 0, 1)), float(np.clip(py, 0, 1)), 1.0])
    return out


def parse_color(prompt: str, default=(128, 128, 128)) -> tuple:
    for word in str(prompt).lower().replace(",", " ").split():
        if word in PALETTE:
            return PALETTE[word]
    return default


def stub_t2i(keypoints, height: int, width: int, prompt: str, seed: int) -> np.ndarray:
    """Figure on white following ``keypoints``, torso wider than a typical fit."""
    rng = _digest_rng("t2i", prompt, seed)
    kp = np.asarray(keypoints, dtype=np.float64)
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    px, py = kp[:, 0] * (width - 1), kp[:, 1] * (height - 1)
    skin = rng.integers(90, 230, size=3).astype(np.uint8)
    garment = np.asarray(parse_color(prompt, tuple(rng.integers(0, 256, size=3))), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    span = max(abs(px[5] - px[2]), 2.0)
    top, bottom = py[1], max(py[8], py[11])
    cx = (px[2] + px[5]) / 2
    torso = (np.abs(xx - cx) <= 0.75 * span) & (yy >= top) & (yy <= bottom + 1)
    head = (xx - px[0]) ** 2 + (yy - py[0]) ** 2 <= max(span * 0.4, 1.5) ** 2
    img[torso] = garment
    img[head] = skin
    for a, b in ((8, 9), (9, 10), (11, 12), (12, 13)):
        for s in np.linspace(0, 1, 2 * height):
            x, y = px[a] + s * (px[b] - px[a]), py[a] + s * (py[b] - py[a])
            img[int(np.clip(round(y), 0, height - 1)), int(np.clip(round(x), 0, width - 1))] = skin
    return img


def stub_inpaint(image: np.ndarray, mask: np.ndarray, prompt: str) -> np.ndarray:
    out = image.copy()
    out[mask] = np.asarray(parse_color(prompt), dtype=np.uint8)
    return out


def stub_vlm(task: str, image: np.ndarray, seed: int) -> dict:
    rng = _digest_rng(task, image, seed)
    if task == "vlm.human_frame":
        flags = rng.uniform(size=3) < 0.8
        return {"face_unoccluded": bool(flags[0]), "eyes_open": bool(flags[1]),
                "frontal": bool(flags[2]), "quality": float(rng.integers(80, 101))}
    if task == "vlm.garment_frame":
        keys = ("frontal", "full_body", "sharpness", "occlusion", "lighting", "composition")
        return {k: float(v) for k, v in zip(keys, rng.integers(0, 101, size=len(keys)))}
    if task == "vlm.gender":
        return {"gender": ("male", "female")[int(rng.integers(2))]}
    if task == "vlm.garment_valid":
        non_white = np.any(image < 250, axis=-1).mean()
        return {"valid": bool(non_white >= 0.01)}
    raise ClientError(f"unknown vlm task {task!r}")


class StubBackend:
    """Deterministic stand-ins for every role; returns wire-form responses."""

    def handle(self, task: str, media: Mapping[str, np.ndarray], params: Mapping, seed: int) -> dict:
        if task.startswith("vlm."):
            return stub_vlm(task, media["image"], seed)
        if task == "detector":
            return stub_detect(media["image"])
        if task == "segmenter":
            return {"mask": encode_png(stub_segment(media["image"]))}
        if task == "pose":
            return {"keypoints": stub_pose(media["image"])}
        if task == "t2i":
            return {"image": encode_png(stub_t2i(params["keypoints"], int(params["height"]),
                                                 int(params["width"]), params.get("prompt", ""), seed))}
        if task == "inpainter":
            return {"image": encode_png(stub_inpaint(media["image"], media["mask"],
                                                     params.get("prompt", "")))}
        raise ClientError(f"unknown task {task!r}")


# --- clients ---------------------------------------------------------------------

class ModelClient:
    """Base client: subclasses implement ``_send`` returning a wire-form response."""

    role = "client"

    def request(self, task: str, media: Mapping[str, np.ndarray], params: Mapping | None = None,
                seed: int = 0) -> dict:
        raw = self._send(task, dict(media), dict(params or {}), int(seed))
        return decode_response(task, raw)

    def _send(self, task, media, params, seed) -> Any:  # pragma: no cover - interface
        raise NotImplementedError


class StubClient(ModelClient):
    def __init__(self, role: str = "stub", backend: StubBackend | None = None):
        self.role = role
        self.backend = backend or StubBackend()

    def _send(self, task, media, params, seed):
        return self.backend.handle(task, media, params, seed)


class FunctionClient(ModelClient):
    """Wraps ``fn(task, media, params, seed) -> wire response``; handy for custom stubs."""

    def __init__(self, fn: Callable[..., Any], role: str = "function"):
        self.fn = fn
        self.role = role

    def _send(self, task, media, params, seed):
        return self.fn(task, media, params, seed)


class HttpClient(ModelClient):
    """JSON-over-HTTP client with retries and exponential backoff."""

    def __init__(self, endpoint: str, role: str = "remote", retries: int = 3, backoff: float = 0.5,
                 timeout: float = 30.0, transport=None):
        import httpx

        self.endpoint = endpoint
        self.role = role
        self.retries = max(1, int(retries))
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _send(self, task, media, params, seed):
        import httpx

        body = encode_request(task, media, params, seed)
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._client.post(self.endpoint, json=body)
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"server error {resp.status_code}",
                                                request=resp.request, response=resp)
                if resp.status_code >= 400:
                    raise ClientError(f"{self.role}: HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                log.warning("client %s attempt %d/%d failed: %s", self.role, attempt + 1,
                            self.retries, exc)
                if attempt + 1 < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * 2 ** attempt)
        raise ClientError(f"{self.role}: failed after {self.retries} attempts: {last}")

    def close(self):
        self._client.close()


@dataclass
class ModelClientSuite:
    vlm: ModelClient
    detector: ModelClient
    segmenter: ModelClient
    t2i: ModelClient
    inpainter: ModelClient
    pose: ModelClient

    @classmethod
    def stub(cls, **overrides: ModelClient) -> "ModelClientSuite":
        backend = StubBackend()
        clients = {r: StubClient(r, backend) for r in ROLES}
        clients.update(overrides)
        return cls(**clients)

    def describe(self) -> dict:
        out = {}
        for f in fields(self):
            c = getattr(self, f.name)
            out[f.name] = getattr(c, "endpoint", None) or type(c).__name__
        return out


def load_suite(config: Mapping | str | Path | None = None, env: Mapping[str, str] | None = None
               ) -> ModelClientSuite:
    """Build a suite from a mapping or YAML file.

    Each role maps to ``"stub"`` or ``{endpoint, retries, backoff, timeout}``.
    ``GARMENTANIM_<ROLE>_ENDPOINT`` overrides the file.
    """
    import yaml

    env = os.environ if env is None else env
    if config is None:
        cfg: dict = {}
    elif isinstance(config, Mapping):
        cfg = dict(config)
    else:
        with open(config) as fh:
            cfg = yaml.safe_load(fh) or {}
    roles_cfg = cfg.get("clients", cfg)
    if not isinstance(roles_cfg, Mapping):
        raise ValueError("client config must be a mapping of role -> spec")
    unknown = set(roles_cfg) - set(ROLES)
    if unknown:
        raise ValueError(f"unknown client roles: {sorted(unknown)}")
    backend = StubBackend()
    clients = {}
    for role in ROLES:
        spec = roles_cfg.get(role, "stub")
        endpoint = env.get(f"{ENV_PREFIX}{role.upper()}_ENDPOINT")
        if endpoint:
            spec = {**(spec if isinstance(spec, Mapping) else {}), "endpoint": endpoint}
        if spec in (None, "stub"):
            clients[role] = StubClient(role, backend)
        elif isinstance(spec, Mapping) and "endpoint" in spec:
            clients[role] = HttpClient(spec["endpoint"], role, spec.get("retries", 3),
                                       spec.get("backoff", 0.5), spec.get("timeout", 30.0))
        else:
            raise ValueError(f"invalid client spec for {role}: {spec!r}")
    return ModelClientSuite(**clients)
