"""Human-animation and garment-transfer adapter stacks.

Each stack holds one adapter block per injection site (every even backbone
block). An adapter block keeps its own context token stream, runs a
backbone-shaped block over ``[context || main]`` tokens, hands the leading
positions on as the next context state, and maps the trailing (main-aligned)
positions through a zero-initialized projection into a residual that is added
to the backbone block output::

    h[l+1] = B_l(h[l])                                         l odd
    h[l+1] = B_l(h[l]) + alpha * HAM_l(h[l]) + beta * GTM_l(h[l])   l even

For garment interpolation the GTM term becomes
``gamma * GTM_l(h[l]; G_A) + (1 - gamma) * GTM_l(h[l]; G_B)`` with two
independent context cascades sharing GTM weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import ParamSet, Tensor, concat
from .backbone import (BackboneConfig, HiddenState, TextTokens, backbone_block, block_apply,
                       embed_latent, encode_text, head, linear, timestep_embedding)
from .conditioning import TokenSeq, embed_context

ROLES = ("ham", "gtm")


@dataclass(frozen=True)
class InjectionSchedule:
    num_blocks: int
    alpha: float = 0.5
    beta: float = 0.5
    sites: tuple = ()

    def __post_init__(self):
        sites = tuple(self.sites) or tuple(range(0, self.num_blocks, 2))
        object.__setattr__(self, "sites", sites)
        if any(s % 2 for s in sites):
            raise ValueError("injection sites must be even block indices")
        if any(b <= a for a, b in zip(sites, sites[1:])):
            raise ValueError("injection sites must be strictly increasing")
        if sites and (sites[0] < 0 or sites[-1] >= self.num_blocks):
            raise ValueError(f"injection site outside [0, {self.num_blocks})")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")

    def site_index(self, block: int) -> int | None:
        """Adapter block index ``k`` for backbone block ``l = 2k``, else None."""
        return block // 2 if block in self.sites else None


def init_adapter_stack(params: ParamSet, cfg: BackboneConfig, role: str,
                       trainable: bool = True) -> None:
    """Add ``<role>.*`` parameters copied from the backbone, with zero output projections."""
    d = cfg.model_dim
    params.add(f"{role}.proj.w", params.array("backbone.patch.w").copy(), trainable)
    params.add(f"{role}.proj.b", params.array("backbone.patch.b").copy(), trainable)
    for k in range(cfg.num_blocks // 2):
        src = f"backbone.blocks.{2 * k}."
        for name in params.names(src):
            params.add(f"{role}.blocks.{k}." + name[len(src):], params.array(name).copy(), trainable)
        params.add(f"{role}.blocks.{k}.zero.w", np.zeros((d, d), dtype=np.float32), trainable)
        params.add(f"{role}.blocks.{k}.zero.b", np.zeros(d, dtype=np.float32), trainable)


def init_adapters(params: ParamSet, cfg: BackboneConfig, roles: Sequence[str] = ROLES) -> ParamSet:
    for role in roles:
        init_adapter_stack(params, cfg, role)
    return params


def adapter_block(main_h: HiddenState, ctx_state: TokenSeq, params: ParamSet, prefix: str,
                  text: TextTokens, t_embed: Tensor, cfg: BackboneConfig):
    """Return ``(residual [B, N_main, D], new context state)``."""
    if ctx_state.tokens.shape[-1] != main_h.tokens.shape[-1]:
        raise ValueError("context and main token dimensions differ")
    m = ctx_state.tokens.shape[1]
    joint = concat([ctx_state.tokens, main_h.tokens], axis=1)
    joint = block_apply(joint, text, t_embed, params, prefix, cfg.num_heads)
    new_ctx = TokenSeq(joint[:, :m], ctx_state.grid)
    residual = linear(params, prefix + "zero", joint[:, m:])
    return residual, new_ctx


@dataclass
class Stream:
    """One adapter cascade: parameter role, current context state, weight."""

    role: str
    ctx: TokenSeq
    weight: float


def forward_streams(h0: HiddenState, groups: Sequence[Sequence[Stream]], text: TextTokens,
                    t_embed: Tensor, params: ParamSet, cfg: BackboneConfig,
                    sites: Sequence[int] | None = None, trace: list | None = None) -> HiddenState:
    """Run the backbone with weighted adapter residuals added at ``sites``.

    Residuals within a group are summed first, then groups are added to the
    block output in order. ``trace`` (if given) collects per-site
    ``(block, role, ctx_in, ctx_out)`` tuples for inspection.
    """
    sites = tuple(range(0, cfg.num_blocks, 2)) if sites is None else tuple(sites)
    if sites and sites[-1] >= cfg.num_blocks:
        raise ValueError(f"injection site {sites[-1]} >= number of blocks {cfg.num_blocks}")
    h = h0
    for l in range(cfg.num_blocks):
        out = backbone_block(h, text, t_embed, params, l, cfg)
        if l in sites:
            total = out.tokens
            for group in groups:
                mixed = None
                for stream in group:
                    prefix = f"{stream.role}.blocks.{l // 2}."
                    res, new_ctx = adapter_block(h, stream.ctx, params, prefix, text, t_embed, cfg)
                    if trace is not None:
                        trace.append((l, stream.role, stream.ctx, new_ctx))
                    stream.ctx = new_ctx
                    term = res * float(stream.weight)
                    mixed = term if mixed is None else mixed + term
                total = total + mixed
            out = HiddenState(total, out.grid)
        h = out
    return h


def forward_injected(h0: HiddenState, ham_ctx: TokenSeq, gtm_ctx: TokenSeq,
                     sched: InjectionSchedule, text: TextTokens, t_embed: Tensor,
                     params: ParamSet, cfg: BackboneConfig, trace: list | None = None) -> HiddenState:
    if sched.num_blocks != cfg.num_blocks:
        raise ValueError("schedule and backbone disagree on the number of blocks")
    groups = [[Stream("ham", ham_ctx, sched.alpha)], [Stream("gtm", gtm_ctx, sched.beta)]]
    return forward_streams(h0, groups, text, t_embed, params, cfg, sched.sites, trace)


def forward_interpolated(h0: HiddenState, ham_ctx: TokenSeq, gtm_ctx_a: TokenSeq,
                         gtm_ctx_b: TokenSeq, gamma: float, sched: InjectionSchedule,
                         text: TextTokens, t_embed: Tensor, params: ParamSet,
                         cfg: BackboneConfig) -> HiddenState:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if sched.num_blocks != cfg.num_blocks:
        raise ValueError("schedule and backbone disagree on the number of blocks")
    groups = [[Stream("ham", ham_ctx, sched.alpha)],
              [Stream("gtm", gtm_ctx_a, gamma), Stream("gtm", gtm_ctx_b, 1.0 - gamma)]]
    return forward_streams(h0, groups, text, t_embed, params, cfg, sched.sites)


# --- whole-model velocity ------------------------------------------------------

def dual_velocity(noisy: np.ndarray, t, prompts: Sequence[str], ham: np.ndarray,
                  gtm: np.ndarray | Sequence[np.ndarray], params: ParamSet, cfg: BackboneConfig,
                  sched: InjectionSchedule, gamma: float | None = None) -> Tensor:
    """Velocity for batched latents ``[B, T, C, h, w]``.

    ``gtm`` is one batched context, or two when ``gamma`` is given.
    """
    t_embed = timestep_embedding(t, cfg, params)
    text = encode_text(prompts, cfg, params)
    h0 = embed_latent(noisy, cfg, params)
    ham_ctx = embed_context(ham, params, "ham.proj", cfg)
    if gamma is None:
        gtm_ctx = embed_context(gtm, params, "gtm.proj", cfg)
        h = forward_injected(h0, ham_ctx, gtm_ctx, sched, text, t_embed, params, cfg)
    else:
        ga = embed_context(gtm[0], params, "gtm.proj", cfg)
        gb = embed_context(gtm[1], params, "gtm.proj", cfg)
        h = forward_interpolated(h0, ham_ctx, ga, gb, gamma, sched, text, t_embed, params, cfg)
    return head(h, cfg, params)
