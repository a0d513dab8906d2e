"""Estimator-style facade: ``fit`` trains the adapters, ``predict`` generates videos."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .conditioning import TripletSample
from .metrics import psnr
from .sampling import GenerationRequest, Model, generate
from .training import TrainConfig, TrainState, train


def check_triplets(X) -> list[TripletSample]:
    """Validate a non-empty sequence of :class:`TripletSample` with shared extents."""
    if isinstance(X, TripletSample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one triplet")
    bad = [type(x).__name__ for x in X if not isinstance(x, TripletSample)]
    if bad:
        raise TypeError(f"expected TripletSample items, got {sorted(set(bad))}")
    extents = {x.truth.shape[2:] for x in X}
    if len(extents) > 1:
        raise ValueError(f"triplets have mixed frame extents {sorted(extents)}")
    return X


def check_requests(X, steps: int, seed: int, alpha: float, beta: float) -> list[GenerationRequest]:
    """Turn triplets into generation requests; requests pass through unchanged."""
    if isinstance(X, (TripletSample, GenerationRequest)):
        X = [X]
    out = []
    for x in X:
        if isinstance(x, GenerationRequest):
            out.append(x)
        elif isinstance(x, TripletSample):
            out.append(GenerationRequest.from_sample(x, steps=steps, seed=seed, alpha=alpha, beta=beta))
        else:
            raise TypeError(f"cannot generate from {type(x).__name__}")
    if not out:
        raise ValueError("expected at least one request")
    return out


class TryOnAnimator(BaseEstimator):
    """Frozen toy backbone plus trained condition adapters.

    Parameters
    ----------
    num_blocks, model_dim, num_heads, patch
        Backbone shape; the backbone is drawn once from ``backbone_seed``.
    variant
        ``dual-module``, ``single-module``, ``backbone-lora`` or ``no-synth-human``.
    steps, batch_size, lr, seed, lora_rank, lr_schedule, recolor_prob
        Training settings.
    alpha, beta
        Adapter residual weights.
    sample_steps
        Euler steps used by :meth:`predict`.
    """

    def __init__(self, num_blocks=8, model_dim=64, num_heads=4, patch=(1, 2, 2),
                 variant="dual-module", steps=200, batch_size=8, lr=1e-3, seed=0, lora_rank=4,
                 alpha=0.5, beta=0.5, sample_steps=20, backbone_seed=0, lr_schedule="constant",
                 recolor_prob=0.0):
        self.num_blocks = num_blocks
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.patch = patch
        self.variant = variant
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.lora_rank = lora_rank
        self.alpha = alpha
        self.beta = beta
        self.sample_steps = sample_steps
        self.backbone_seed = backbone_seed
        self.lr_schedule = lr_schedule
        self.recolor_prob = recolor_prob

    def _configs(self) -> tuple[BackboneConfig, TrainConfig]:
        cfg = BackboneConfig(num_blocks=self.num_blocks, model_dim=self.model_dim,
                             num_heads=self.num_heads, patch=tuple(self.patch))
        tcfg = TrainConfig(variant=self.variant, steps=self.steps, batch_size=self.batch_size,
                           lr=self.lr, seed=self.seed, lora_rank=self.lora_rank,
                           alpha=self.alpha, beta=self.beta, lr_schedule=self.lr_schedule,
                           recolor_prob=self.recolor_prob)
        return cfg, tcfg

    def fit(self, X: Sequence[TripletSample], y=None, on_record=None) -> "TryOnAnimator":
        X = check_triplets(X)
        cfg, tcfg = self._configs()
        state = TrainState.fresh(cfg, tcfg, self.backbone_seed)
        train(X, state, on_record=on_record)
        self.state_ = state
        self.history_ = list(state.history)
        self.model_ = Model(state.params, cfg, tcfg.variant)
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        reqs = check_requests(X, self.sample_steps, self.seed, self.alpha, self.beta)
        return [generate(r, self.model_) for r in reqs]

    def score(self, X, y=None) -> float:
        """Mean PSNR of generated videos against the triplets' ground truth."""
        X = check_triplets(X)
        return float(np.mean([psnr(p, x.truth) for p, x in zip(self.predict(X), X)]))

    def save(self, path):
        check_is_fitted(self, "state_")
        return self.state_.save(path)

    @classmethod
    def load(cls, path) -> "TryOnAnimator":
        state = TrainState.load(path)
        cfg, tcfg = state.cfg, state.tcfg
        est = cls(num_blocks=cfg.num_blocks, model_dim=cfg.model_dim, num_heads=cfg.num_heads,
                  patch=tuple(cfg.patch), variant=tcfg.variant, steps=tcfg.steps,
                  batch_size=tcfg.batch_size, lr=tcfg.lr, seed=tcfg.seed, lora_rank=tcfg.lora_rank,
                  alpha=tcfg.alpha, beta=tcfg.beta, lr_schedule=tcfg.lr_schedule,
                  recolor_prob=tcfg.recolor_prob)
        est.state_ = state
        est.history_ = []
        est.model_ = Model(state.params, cfg, tcfg.variant)
        return est
