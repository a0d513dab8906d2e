"""Inference: Euler integration of the learned velocity field from noise to a try-on video."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import ParamSet
from .backbone import BackboneConfig
from .checkpoint import load_checkpoint
from .conditioning import (SPATIAL_STRIDE, PoseSequence, TripletSample, build_gtm_context,
                           build_ham_context, check_video, decode_latent, encode_latent)
from .dual_module import InjectionSchedule, dual_velocity
from .training import NumericalError, TrainConfig, apply_variant


@dataclass
class GenerationRequest:
    human: np.ndarray
    garments: list
    pose: PoseSequence
    prompt: str = ""
    steps: int = 20
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float | None = None

    def __post_init__(self):
        self.human = check_video(self.human, "human")
        if self.human.shape[0] != 1:
            raise ValueError("human image must be a single frame")
        self.garments = [check_video(g, "garment") for g in self.garments]
        if not self.garments:
            raise ValueError("at least one garment image is required")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.gamma is not None:
            if len(self.garments) != 2:
                raise ValueError("interpolation requests carry exactly two garments")
            if not 0.0 <= self.gamma <= 1.0:
                raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        elif len(self.garments) > 1 + self.pose.frames:
            raise ValueError("too many garments for the garment context")

    @property
    def frames(self) -> int:
        return self.pose.frames

    @classmethod
    def from_sample(cls, sample: TripletSample, **kw) -> "GenerationRequest":
        return cls(human=sample.human, garments=list(sample.garments), pose=sample.pose,
                   prompt=sample.prompt, **kw)


@dataclass
class Model:
    """Loaded checkpoint: parameters, backbone config and trained variant."""

    params: ParamSet
    cfg: BackboneConfig
    variant: str = "dual-module"
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Model":
        params, cfg, extra, _ = load_checkpoint(path)
        return cls(params, cfg, extra.get("variant", "dual-module"), extra)


def _as_model(model) -> Model:
    return model if isinstance(model, Model) else Model.load(model)


def _contexts(req: GenerationRequest, garments: Sequence[np.ndarray]):
    z_h = encode_latent(req.human)
    z_p = encode_latent(req.pose.rendered)
    ham = build_ham_context(z_h, z_p)
    gtm = build_gtm_context([encode_latent(g) for g in garments], ham.frames)
    return ham.data[None], gtm.data[None]


def _check_config(req: GenerationRequest, model: Model) -> None:
    h, w = req.human.shape[2:]
    if req.pose.rendered.shape[2:] != (h, w) or any(g.shape[2:] != (h, w) for g in req.garments):
        raise ValueError("human, pose and garment images must share extents")
    ph, pw = model.cfg.patch[1:]
    if (h // SPATIAL_STRIDE) % ph or (w // SPATIAL_STRIDE) % pw:
        raise ValueError(f"image extents {(h, w)} incompatible with backbone patch {model.cfg.patch}")
    if model.variant in ("dual-module", "no-synth-human"):
        if "ham.proj.w" not in model.params or "gtm.proj.w" not in model.params:
            raise ValueError("checkpoint lacks ham.*/gtm.* adapters")


def _velocity_fn(req: GenerationRequest, model: Model, gtm):
    cfg, params = model.cfg, model.params
    if model.variant in ("dual-module", "no-synth-human"):
        sched = InjectionSchedule(cfg.num_blocks, req.alpha, req.beta)

        def velocity(z, t, ham):
            return dual_velocity(z, t, [req.prompt], ham, gtm, params, cfg, sched, req.gamma)
        return velocity
    if req.gamma is not None:
        raise ValueError(f"interpolation requires a dual-module checkpoint, got {model.variant}")
    tcfg = TrainConfig(variant=model.variant, alpha=req.alpha, beta=req.beta)
    forward = apply_variant(tcfg, params, cfg).forward
    return lambda z, t, ham: forward(z, t, [req.prompt], ham, gtm, params)


def integrate(req: GenerationRequest, model: Model, ham: np.ndarray, gtm) -> np.ndarray:
    """Euler steps from noise (t=0) to data (t=1); returns the final latent."""
    h, w = req.human.shape[2:]
    shape = (1, req.frames, model.cfg.latent_channels, h // SPATIAL_STRIDE, w // SPATIAL_STRIDE)
    rng = np.random.default_rng(req.seed)
    z = rng.standard_normal(size=shape).astype(np.float32)
    velocity = _velocity_fn(req, model, gtm)
    dt = np.float32(1.0 / req.steps)
    for i in range(req.steps):
        v = velocity(z, np.array([i / req.steps]), ham).data
        z = (z + dt * v).astype(np.float32)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent at step {i}")
    return z[0]


def generate(req: GenerationRequest, model) -> np.ndarray:
    """Try-on animation ``[F, 3, H, W]`` in ``[0, 1]``."""
    model = _as_model(model)
    if req.gamma is not None:
        return generate_interpolated(req, model)
    _check_config(req, model)
    ham, gtm = _contexts(req, req.garments)
    return np.clip(decode_latent(integrate(req, model, ham, gtm)), 0.0, 1.0)


def generate_interpolated(req: GenerationRequest, model) -> np.ndarray:
    """Blend garments ``A = garments[0]`` and ``B = garments[1]`` with weight ``gamma``."""
    model = _as_model(model)
    if req.gamma is None:
        raise ValueError("interpolation request needs gamma")
    _check_config(req, model)
    ham, gtm_a = _contexts(req, req.garments[:1])
    _, gtm_b = _contexts(req, req.garments[1:])
    return np.clip(decode_latent(integrate(req, model, ham, (gtm_a, gtm_b))), 0.0, 1.0)
