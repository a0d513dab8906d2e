"""Rectified-flow training of the condition adapters on a frozen backbone.

Four variants share one loop:

* ``dual-module``     HAM + GTM adapter stacks (the full model)
* ``single-module``   one adapter stack fed ``[HAM ctx || GTM ctx]``
* ``backbone-lora``   no adapters; condition latents are prepended to the
                      backbone input and rank-r deltas on every block linear
                      are trained
* ``no-synth-human``  dual-module, but the loader replaces the human image
                      with a frame of the ground-truth video
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor
from .backbone import (BackboneConfig, HiddenState, add_positions,
                       backbone_block, block_linear_shapes, encode_text, head, init_backbone,
                       patchify, timestep_embedding)
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import TripletSample, embed_context, sample_latents
from .dual_module import (InjectionSchedule, Stream, dual_velocity, forward_streams,
                          init_adapter_stack)

log = logging.getLogger(__name__)

VARIANTS = ("dual-module", "single-module", "backbone-lora", "no-synth-human")
LOSS_LIMIT = 1e6


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(tcfg: "TrainConfig", step: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based)."""
    if tcfg.lr_schedule == "cosine" and tcfg.steps > 0:
        frac = min(step, tcfg.steps) / tcfg.steps
        return tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return tcfg.lr


class NumericalError(RuntimeError):
    """Training or sampling produced a non-finite or exploding value."""


@dataclass
class TrainConfig:
    variant: str = "dual-module"
    steps: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    lora_rank: int = 4
    weight_decay: float = 0.01
    alpha: float = 0.5
    beta: float = 0.5
    checkpoint_every: int = 0
    lr_schedule: str = "constant"
    recolor_prob: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")
        if not 0.0 <= self.recolor_prob <= 1.0:
            raise ValueError("recolor_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0 or self.lora_rank < 1:
            raise ValueError("invalid training hyper-parameters")


@dataclass
class LossRecord:
    step: int
    loss: float
    grad_norms: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --- variants -----------------------------------------------------------------------

ForwardFn = Callable[[np.ndarray, np.ndarray, Sequence[str], np.ndarray, np.ndarray, ParamSet], Tensor]


@dataclass
class Variant:
    name: str
    trainable: list
    forward: ForwardFn
    substitute_human: bool = False


def _single_velocity(cfg: BackboneConfig, weight: float):
    def forward(noisy, t, prompts, ham, gtm, params):
        t_embed = timestep_embedding(t, cfg, params)
        text = encode_text(prompts, cfg, params)
        h0 = _embed_main(noisy, cfg, params)
        ctx = embed_context(np.concatenate([ham, gtm], axis=1), params, "single.proj", cfg)
        h = forward_streams(h0, [[Stream("single", ctx, weight)]], text, t_embed, params, cfg)
        return head(h, cfg, params)
    return forward


def _embed_main(noisy, cfg, params) -> HiddenState:
    h = patchify(noisy, cfg, params)
    return HiddenState(add_positions(h.tokens, h.grid), h.grid)


def lora_velocity(cfg: BackboneConfig):
    """Backbone over ``[HAM ctx | GTM ctx | noisy]`` frames; head on the noisy part."""
    def forward(noisy, t, prompts, ham, gtm, params):
        noisy = np.asarray(noisy)
        t_embed = timestep_embedding(t, cfg, params)
        text = encode_text(prompts, cfg, params)
        seq = np.concatenate([ham, gtm, noisy], axis=1).astype(noisy.dtype)
        h = _embed_main(seq, cfg, params)
        for l in range(cfg.num_blocks):
            h = backbone_block(h, text, t_embed, params, l, cfg)
        main_frames = noisy.shape[1] // cfg.patch[0]
        per_frame = h.grid[1] * h.grid[2]
        tail = h.tokens[:, h.tokens.shape[1] - main_frames * per_frame:]
        return head(HiddenState(tail, (main_frames,) + h.grid[1:]), cfg, params)
    return forward


def add_lora(params: ParamSet, cfg: BackboneConfig, rank: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    names = []
    for l in range(cfg.num_blocks):
        for lin, (fi, fo) in block_linear_shapes(cfg).items():
            base = f"lora.backbone.blocks.{l}.{lin}"
            if base + ".a" not in params:
                params.add(base + ".a", rng.normal(0, 1 / math.sqrt(fi), size=(fi, rank)).astype(np.float32))
                params.add(base + ".b", np.zeros((rank, fo), dtype=np.float32))
            names += [base + ".a", base + ".b"]
    return names


def lora_parameter_count(cfg: BackboneConfig, rank: int) -> int:
    """Closed form ``sum rank * (fan_in + fan_out)`` over adapted block linears."""
    return cfg.num_blocks * sum(rank * (fi + fo) for fi, fo in block_linear_shapes(cfg).values())


def apply_variant(tcfg: TrainConfig, params: ParamSet, cfg: BackboneConfig) -> Variant:
    """Add the variant's parameters if missing and set the trainable partition."""
    if tcfg.variant not in VARIANTS:
        raise ValueError(f"unknown variant {tcfg.variant!r}; expected one of {VARIANTS}")
    params.freeze_all()
    sched = InjectionSchedule(cfg.num_blocks, tcfg.alpha, tcfg.beta)
    if tcfg.variant in ("dual-module", "no-synth-human"):
        for role in ("ham", "gtm"):
            if f"{role}.proj.w" not in params:
                init_adapter_stack(params, cfg, role, trainable=False)
        trainable = params.names("ham.") + params.names("gtm.")

        def forward(noisy, t, prompts, ham, gtm, p):
            return dual_velocity(noisy, t, prompts, ham, gtm, p, cfg, sched)
        variant = Variant(tcfg.variant, trainable, forward, tcfg.variant == "no-synth-human")
    elif tcfg.variant == "single-module":
        if "single.proj.w" not in params:
            init_adapter_stack(params, cfg, "single", trainable=False)
        variant = Variant(tcfg.variant, params.names("single."), _single_velocity(cfg, tcfg.alpha))
    else:
        trainable = add_lora(params, cfg, tcfg.lora_rank, tcfg.seed)
        variant = Variant(tcfg.variant, trainable, lora_velocity(cfg))
    params.set_trainable(variant.trainable, True)
    return variant


# --- loss -----------------------------------------------------------------------------

def substitute_human(sample: TripletSample, frame: int = 0) -> TripletSample:
    """Same triplet with the human image replaced by a ground-truth frame."""
    return TripletSample(human=sample.truth[frame:frame + 1].copy(), garments=sample.garments,
                         pose=sample.pose, prompt=sample.prompt, truth=sample.truth,
                         source=sample.source, id=sample.id, garment_masks=sample.garment_masks)


def recolor_garment(sample: TripletSample, color) -> TripletSample:
    """Repaint the worn garment and the matching garment-image pixels with ``color``.

    Needs ``garment_masks``; the garment images are repainted wherever they
    hold the original solid garment colour.
    """
    masks = sample.garment_masks
    if masks is None or not masks.any():
        raise ValueError(f"sample {sample.id!r} has no garment mask")
    color = np.asarray(color, dtype=np.float32)
    f = int(np.argmax(masks.reshape(len(masks), -1).any(axis=1)))
    old = sample.truth[f][:, masks[f]][:, 0]
    truth = sample.truth.copy()
    view = truth.transpose(0, 2, 3, 1)
    view[masks] = color
    garments = []
    for g in sample.garments:
        g = g.copy()
        gv = g.transpose(0, 2, 3, 1)
        gv[np.all(gv == old, axis=-1)] = color
        garments.append(g)
    return TripletSample(human=sample.human, garments=garments, pose=sample.pose,
                         prompt=sample.prompt, truth=truth, source=sample.source, id=sample.id,
                         garment_masks=masks)


def collate(samples: Sequence[TripletSample]) -> dict:
    lat = [sample_latents(s) for s in samples]
    return {
        "z": np.stack([l[0] for l in lat]),
        "ham": np.stack([l[1] for l in lat]),
        "gtm": np.stack([l[2] for l in lat]),
        "prompts": [s.prompt for s in samples],
    }


def velocity_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-sample mean squared error, averaged over the batch."""
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    per_sample = ag.mean(ag.square(diff).reshape(diff.shape[0], -1), axis=1)
    return ag.mean(per_sample)


def flow_matching_loss(batch: dict, t, noise: np.ndarray, forward: ForwardFn,
                       params: ParamSet) -> Tensor:
    """Rectified-flow velocity loss for one shape-homogeneous batch.

    ``x_t = (1 - t) * noise + t * z`` and the regression target is
    ``z - noise``; the loss only covers the ground-truth video tokens.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t <= 0) | (t >= 1)):
        raise ValueError("t must lie in the open interval (0, 1)")
    z = batch["z"]
    if noise.shape != z.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {z.shape}")
    dtype = params[params.names("backbone.")[0]].dtype
    tb = t.reshape(-1, 1, 1, 1, 1)
    x_t = ((1.0 - tb) * noise + tb * z).astype(dtype)
    target = (z - noise).astype(dtype)
    pred = forward(x_t, t, batch["prompts"], batch["ham"].astype(dtype), batch["gtm"].astype(dtype), params)
    loss = velocity_mse(pred, target)
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite loss")
    return loss


def group_by_shape(samples: Sequence[TripletSample]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        key = (s.truth.shape, s.human.shape, len(s.garments), s.garments[0].shape)
        groups.setdefault(key, []).append(i)
    return list(groups.values())


# --- optimizer / state ---------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay; moments kept in param dtype."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            if not params.is_trainable(name):
                continue
            p = params.array(name)
            g = g.astype(p.dtype, copy=False)
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = (b1 * m + (1 - b1) * g).astype(p.dtype)
            v = (b2 * v + (1 - b2) * g * g).astype(p.dtype)
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p
            params.assign(name, (p - self.lr * update).astype(p.dtype))


def grad_norms(grads: dict[str, np.ndarray], params: ParamSet) -> dict[str, float]:
    """Global L2 norm per top-level module; frozen modules report 0."""
    sq: dict[str, float] = {}
    for name in sorted(params):
        sq.setdefault(_module_of(name), 0.0)
    for name in sorted(grads):
        sq[_module_of(name)] += float(np.sum(np.square(grads[name], dtype=np.float64)))
    return {k: math.sqrt(v) for k, v in sorted(sq.items())}


def _module_of(name: str) -> str:
    return name.split(".", 1)[0]


class TrainState:
    """Parameters, optimizer moments, RNG and step counter of one run."""

    def __init__(self, params: ParamSet, cfg: BackboneConfig, tcfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.tcfg = tcfg
        self.variant = apply_variant(tcfg, params, cfg)
        self.optimizer = AdamW(tcfg.lr, weight_decay=tcfg.weight_decay)
        self.rng = np.random.default_rng(tcfg.seed)
        self.step = 0
        self.history: list[LossRecord] = []

    @classmethod
    def fresh(cls, cfg: BackboneConfig, tcfg: TrainConfig, backbone_seed: int = 0) -> "TrainState":
        return cls(init_backbone(cfg, backbone_seed), cfg, tcfg)

    def draw_batch(self, n_samples: int) -> np.ndarray:
        """Indices for one step; batches larger than the corpus repeat whole permutations."""
        if self.tcfg.batch_size > n_samples:
            reps = -(-self.tcfg.batch_size // n_samples)
            return np.concatenate([self.rng.permutation(n_samples) for _ in range(reps)])[: self.tcfg.batch_size]
        if self.tcfg.batch_size == n_samples:
            return self.rng.permutation(n_samples)
        return self.rng.choice(n_samples, size=self.tcfg.batch_size, replace=False)

    def save(self, path) -> Path:
        aux = {}
        for name, m in self.optimizer.m.items():
            aux["optim.m." + name] = m
            aux["optim.v." + name] = self.optimizer.v[name]
        extra = {
            "train_config": asdict(self.tcfg),
            "step": self.step,
            "optimizer_step": self.optimizer.step_count,
            "rng_state": self.rng.bit_generator.state,
            "variant": self.variant.name,
        }
        return save_checkpoint(path, self.params, self.cfg, extra, aux)

    @classmethod
    def load(cls, path) -> "TrainState":
        params, cfg, extra, aux = load_checkpoint(path)
        tcfg = TrainConfig(**extra["train_config"])
        state = cls(params, cfg, tcfg)
        state.step = int(extra["step"])
        state.optimizer.step_count = int(extra["optimizer_step"])
        state.rng.bit_generator.state = extra["rng_state"]
        for key, arr in aux.items():
            kind, name = key[len("optim."):].split(".", 1)
            (state.optimizer.m if kind == "m" else state.optimizer.v)[name] = arr
        return state


def batch_loss(samples: Sequence[TripletSample], state: TrainState, t: np.ndarray,
               noises: Sequence[np.ndarray], params: ParamSet | None = None) -> Tensor:
    """Mean per-sample loss over shape groups (invariant to sample order)."""
    params = state.params if params is None else params
    if state.variant.substitute_human:
        samples = [substitute_human(s) for s in samples]
    total = None
    for idx in group_by_shape(samples):
        batch = collate([samples[i] for i in idx])
        noise = np.stack([noises[i] for i in idx])
        part = flow_matching_loss(batch, t[idx], noise, state.variant.forward, params) * float(len(idx))
        total = part if total is None else total + part
    return total * (1.0 / len(samples))


def train_step(batch: Sequence[TripletSample], state: TrainState) -> LossRecord:
    """One optimizer step on the trainable partition."""
    if not batch:
        raise ValueError("empty batch")
    prob = state.tcfg.recolor_prob
    if prob > 0:
        batch = [recolor_garment(s, state.rng.uniform(size=3)) if state.rng.uniform() < prob else s
                 for s in batch]
    t = np.clip(state.rng.uniform(size=len(batch)), 1e-4, 1 - 1e-4)
    noises = [state.rng.standard_normal(size=(s.frames, state.cfg.latent_channels)
                                        + _latent_hw(s)).astype(np.float32) for s in batch]
    loss = batch_loss(batch, state, t, noises)
    value = float(loss.data)
    if not math.isfinite(value) or value > LOSS_LIMIT:
        raise NumericalError(f"loss exploded at step {state.step}: {value}")
    grads = ag.reverse_gradient(loss, state.params)
    record = LossRecord(state.step, value, grad_norms(grads, state.params))
    state.optimizer.lr = scheduled_lr(state.tcfg, state.step)
    state.optimizer.step(state.params, grads)
    state.step += 1
    state.history.append(record)
    return record


def _latent_hw(sample: TripletSample) -> tuple:
    from .conditioning import SPATIAL_STRIDE
    return (sample.truth.shape[2] // SPATIAL_STRIDE, sample.truth.shape[3] // SPATIAL_STRIDE)


def train(samples: Sequence[TripletSample], state: TrainState, steps: int | None = None,
          checkpoint_dir=None, on_record: Callable[[LossRecord], None] | None = None) -> list[LossRecord]:
    """Run ``steps`` optimizer steps (default: until ``tcfg.steps``)."""
    if not samples:
        raise ValueError("no training samples")
    target = state.tcfg.steps if steps is None else state.step + steps
    records = []
    while state.step < target:
        idx = state.draw_batch(len(samples))
        rec = train_step([samples[i] for i in idx], state)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        every = state.tcfg.checkpoint_every
        if checkpoint_dir is not None and every and state.step % every == 0:
            state.save(Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt")
    return records


def evaluation_loss(samples: Sequence[TripletSample], state: TrainState, draws: int = 4,
                    seed: int = 12345) -> float:
    """Loss averaged over a fixed set of ``(t, noise)`` draws (no parameter update)."""
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(draws):
        t = np.clip(rng.uniform(size=len(samples)), 1e-4, 1 - 1e-4)
        noises = [rng.standard_normal(size=(s.frames, state.cfg.latent_channels) + _latent_hw(s))
                  .astype(np.float32) for s in samples]
        values.append(float(batch_loss(samples, state, t, noises).data))
    return float(np.mean(values))
