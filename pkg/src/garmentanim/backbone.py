"""Toy text-to-video diffusion transformer used as the frozen backbone.

Latents enter as ``[B, T, C, h, w]`` arrays, are cut into non-overlapping
``(t_p, h_p, w_p)`` patches, run through ``num_blocks`` DiT blocks (adaLN
timestep modulation, self-attention, text cross-attention, MLP) and are
mapped back to latent space by a linear head. The head output is the
rectified-flow velocity.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor

# Fixed vocabulary of the toy text encoder; id 0 is the null token.
VOCAB: tuple[str, ...] = (
    "<null>", "a", "an", "the", "person", "man", "woman", "is", "walking", "walks",
    "waving", "waves", "dancing", "dances", "turning", "turns", "standing", "stands",
    "running", "jumping", "left", "right", "forward", "slowly", "quickly", "in", "on",
    "with", "and", "arms", "arm", "up", "down", "studio", "street", "room", "white",
    "gray", "background", "wearing", "shirt", "t-shirt", "jacket", "dress", "pants",
    "skirt", "red", "green", "blue", "yellow", "black", "orange", "purple", "pink",
    "cyan", "brown", "camera", "front", "of", "stick", "figure", "moves", "poses",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 8
    model_dim: int = 64
    num_heads: int = 4
    patch: tuple = (1, 4, 4)
    latent_channels: int = 8
    text_vocab: int = len(VOCAB)
    text_dim: int = 32
    text_len: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ConfigError("num_blocks must be even and >= 2")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError("patch must be three positive extents")
        if self.text_vocab < 1 or self.text_vocab > len(VOCAB):
            raise ConfigError(f"text_vocab must be in [1, {len(VOCAB)}]")

    @property
    def patch_volume(self) -> int:
        return self.patch[0] * self.patch[1] * self.patch[2]

    @property
    def token_in_dim(self) -> int:
        return self.latent_channels * self.patch_volume

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(**{k: (tuple(v) if k == "patch" else v) for k, v in d.items()})


@dataclass
class HiddenState:
    """Tokens ``[B, N, D]`` on a fixed ``(T', H', W')`` grid."""

    tokens: Tensor
    grid: tuple

    def __post_init__(self):
        n = int(np.prod(self.grid))
        if self.tokens.ndim != 3 or self.tokens.shape[1] != n:
            raise ValueError(f"tokens {self.tokens.shape} do not match grid {self.grid}")


@dataclass
class TextTokens:
    tokens: Tensor  # [B, N_text, text_dim]

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] < 1:
            raise ValueError("text tokens must be [B, N_text>=1, text_dim]")


# --- parameters -----------------------------------------------------------------

BLOCK_LINEARS = ("mod", "attn.qkv", "attn.out", "xattn.q", "xattn.kv", "xattn.out",
                 "mlp.fc1", "mlp.fc2")


def block_linear_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    d, dt = cfg.model_dim, cfg.text_dim
    return {
        "mod": (d, 6 * d),
        "attn.qkv": (d, 3 * d),
        "attn.out": (d, d),
        "xattn.q": (d, d),
        "xattn.kv": (dt, 2 * d),
        "xattn.out": (d, d),
        "mlp.fc1": (d, cfg.mlp_ratio * d),
        "mlp.fc2": (cfg.mlp_ratio * d, d),
    }


def _init_linear(rng, fan_in, fan_out, scale=1.0, dtype=np.float32):
    w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
    return w.astype(dtype), np.zeros(fan_out, dtype=dtype)


def init_block_arrays(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    depth_scale = 1.0 / math.sqrt(2 * cfg.num_blocks)
    for name, (fi, fo) in block_linear_shapes(cfg).items():
        scale = depth_scale if name in ("attn.out", "xattn.out", "mlp.fc2") else 1.0
        if name == "mod":
            scale = 0.5
        w, b = _init_linear(rng, fi, fo, scale)
        if name == "mod":
            # gates start open so the random "pretrained" blocks do something
            d = cfg.model_dim
            b[2 * d:3 * d] = 1.0
            b[5 * d:6 * d] = 1.0
        out[f"{name}.w"], out[f"{name}.b"] = w, b
    return out


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> ParamSet:
    """Random weights standing in for a pretrained backbone; all frozen."""
    rng = np.random.default_rng(seed)
    d = cfg.model_dim
    params = ParamSet()
    w, b = _init_linear(rng, cfg.token_in_dim, d)
    params.add("backbone.patch.w", w)
    params.add("backbone.patch.b", b)
    params.add("backbone.text.emb",
               rng.normal(0.0, 1.0, size=(cfg.text_vocab, cfg.text_dim)).astype(np.float32))
    for i, (fi, fo) in enumerate([(d, d), (d, d)], start=1):
        w, b = _init_linear(rng, fi, fo)
        params.add(f"backbone.time.fc{i}.w", w)
        params.add(f"backbone.time.fc{i}.b", b)
    for l in range(cfg.num_blocks):
        for name, arr in init_block_arrays(cfg, rng).items():
            params.add(f"backbone.blocks.{l}.{name}", arr)
    w, b = _init_linear(rng, d, cfg.token_in_dim)
    params.add("backbone.head.w", w)
    params.add("backbone.head.b", b)
    return params


def linear(params: ParamSet, name: str, x: Tensor) -> Tensor:
    """``x @ W + b`` plus an additive low-rank delta when ``lora.<name>`` exists."""
    y = ag.matmul(x, params[name + ".w"]) + params[name + ".b"]
    lora_a = "lora." + name + ".a"
    if lora_a in params:
        y = y + ag.matmul(ag.matmul(x, params[lora_a]), params["lora." + name + ".b"])
    return y


# --- text and timestep ----------------------------------------------------------

_WORD_INDEX = {w: i for i, w in enumerate(VOCAB)}


def tokenize(prompt: str | None, cfg: BackboneConfig) -> np.ndarray:
    """Whitespace tokenization onto the fixed vocabulary, padded with nulls."""
    ids = []
    for word in re.findall(r"[a-z\-]+", (prompt or "").lower()):
        idx = _WORD_INDEX.get(word, 0)
        ids.append(idx if idx < cfg.text_vocab else 0)
    ids = [i for i in ids if i != 0][: cfg.text_len]
    return np.array(ids + [0] * (cfg.text_len - len(ids)), dtype=np.int64)


def encode_text(prompts: Sequence[str | None], cfg: BackboneConfig, params: ParamSet) -> TextTokens:
    ids = np.stack([tokenize(p, cfg) for p in prompts])
    return TextTokens(ag.embedding(params["backbone.text.emb"], ids))


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = np.asarray(values, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def timestep_embedding(t, cfg: BackboneConfig, params: ParamSet) -> Tensor:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    dtype = params["backbone.time.fc1.w"].dtype
    feats = Tensor(sinusoidal(t * 1000.0, cfg.model_dim).astype(dtype))
    h = ag.silu(linear(params, "backbone.time.fc1", feats))
    return linear(params, "backbone.time.fc2", h)


def position_embedding(grid: Sequence[int], dim: int) -> np.ndarray:
    """Fixed 3D sinusoidal positions, ``[T'*H'*W', dim]``."""
    dt = dh = 2 * (dim // 6)
    dw = dim - dt - dh
    tt, hh, ww = np.meshgrid(*(np.arange(g) for g in grid), indexing="ij")
    parts = [sinusoidal(tt.ravel(), dt, 100.0), sinusoidal(hh.ravel(), dh, 100.0),
             sinusoidal(ww.ravel(), dw, 100.0)]
    return np.concatenate(parts, axis=-1)


def add_positions(tokens: Tensor, grid: Sequence[int]) -> Tensor:
    pos = position_embedding(grid, tokens.shape[-1]).astype(tokens.dtype)
    return tokens + Tensor(pos)


# --- patch embedding --------------------------------------------------------------

def _batched(latent) -> np.ndarray:
    arr = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ValueError(f"latent must be [T,C,h,w] or [B,T,C,h,w], got {arr.shape}")
    return arr


def patch_grid(shape: Sequence[int], patch: Sequence[int]) -> tuple:
    t, _, h, w = shape[-4:]
    for extent, p in zip((t, h, w), patch):
        if extent % p:
            raise ValueError(f"latent extents {(t, h, w)} not divisible by patch {tuple(patch)}")
    return (t // patch[0], h // patch[1], w // patch[2])


def extract_patches(latent, patch: Sequence[int]) -> tuple[np.ndarray, tuple]:
    """``[B,T,C,h,w]`` -> ``[B, N, C*pt*ph*pw]`` with the token grid."""
    arr = _batched(latent)
    b, t, c, h, w = arr.shape
    grid = patch_grid(arr.shape, patch)
    pt, ph, pw = patch
    x = arr.reshape(b, grid[0], pt, c, grid[1], ph, grid[2], pw)
    x = x.transpose(0, 1, 4, 6, 3, 2, 5, 7)
    return np.ascontiguousarray(x.reshape(b, int(np.prod(grid)), c * pt * ph * pw)), grid


def patchify(latent, cfg: BackboneConfig, params: ParamSet, prefix: str = "backbone.patch") -> HiddenState:
    """Linear projection of non-overlapping patches (no positional term)."""
    patches, grid = extract_patches(latent, cfg.patch)
    dtype = params[prefix + ".w"].dtype
    return HiddenState(linear(params, prefix, Tensor(patches.astype(dtype))), grid)


def unpatchify(tokens: Tensor, grid: Sequence[int], cfg: BackboneConfig) -> Tensor:
    b = tokens.shape[0]
    pt, ph, pw = cfg.patch
    c = cfg.latent_channels
    x = tokens.reshape(b, grid[0], grid[1], grid[2], c, pt, ph, pw)
    x = x.transpose(0, 1, 5, 4, 2, 6, 3, 7)
    return x.reshape(b, grid[0] * pt, c, grid[1] * ph, grid[2] * pw)


# --- transformer block --------------------------------------------------------------

def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    q, k, v = (_split_heads(z, num_heads) for z in (q, k, v))
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = ag.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    return _merge_heads(ag.matmul(ag.softmax(logits, axis=-1), v))


def block_apply(x: Tensor, text: TextTokens, t_embed: Tensor, params: ParamSet, prefix: str,
                num_heads: int) -> Tensor:
    """One DiT block on a token sequence ``[B, N, D]`` (residual form)."""
    d = x.shape[-1]
    if params[prefix + "attn.qkv.w"].shape[0] != d:
        raise ValueError(f"hidden dim {d} does not match block {prefix!r}")
    mod = linear(params, prefix + "mod", ag.silu(t_embed))
    mod = mod.reshape(mod.shape[0], 1, 6 * d)
    shift1, scale1, gate1 = mod[:, :, 0:d], mod[:, :, d:2 * d], mod[:, :, 2 * d:3 * d]
    shift2, scale2, gate2 = mod[:, :, 3 * d:4 * d], mod[:, :, 4 * d:5 * d], mod[:, :, 5 * d:]

    h = ag.layer_norm(x) * (scale1 + 1.0) + shift1
    qkv = linear(params, prefix + "attn.qkv", h)
    q, k, v = qkv[:, :, 0:d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]
    x = x + gate1 * linear(params, prefix + "attn.out", attention(q, k, v, num_heads))

    q = linear(params, prefix + "xattn.q", ag.layer_norm(x))
    kv = linear(params, prefix + "xattn.kv", text.tokens)
    x = x + linear(params, prefix + "xattn.out", attention(q, kv[:, :, 0:d], kv[:, :, d:], num_heads))

    h = ag.layer_norm(x) * (scale2 + 1.0) + shift2
    h = linear(params, prefix + "mlp.fc2", ag.gelu(linear(params, prefix + "mlp.fc1", h)))
    return x + gate2 * h


def backbone_block(h: HiddenState, text: TextTokens, t_embed: Tensor, params: ParamSet,
                   index: int, cfg: BackboneConfig) -> HiddenState:
    out = block_apply(h.tokens, text, t_embed, params, f"backbone.blocks.{index}.", cfg.num_heads)
    return HiddenState(out, h.grid)


def embed_latent(latent, cfg: BackboneConfig, params: ParamSet) -> HiddenState:
    h = patchify(latent, cfg, params)
    return HiddenState(add_positions(h.tokens, h.grid), h.grid)


def head(h: HiddenState, cfg: BackboneConfig, params: ParamSet) -> Tensor:
    return unpatchify(linear(params, "backbone.head", h.tokens), h.grid, cfg)


def backbone_forward(noisy, t, text: TextTokens, cfg: BackboneConfig, params: ParamSet) -> Tensor:
    """Velocity prediction of the plain backbone, same extents as ``noisy``."""
    t_embed = timestep_embedding(t, cfg, params)
    h = embed_latent(noisy, cfg, params)
    for l in range(cfg.num_blocks):
        h = backbone_block(h, text, t_embed, params, l, cfg)
    out = head(h, cfg, params)
    arr = noisy.data if isinstance(noisy, Tensor) else np.asarray(noisy)
    return out if arr.ndim == 5 else out[0]
