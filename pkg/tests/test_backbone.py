import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentanim.autograd import Tensor
from garmentanim.backbone import (BackboneConfig, ConfigError, HiddenState, TextTokens,
                                  backbone_block, backbone_forward, encode_text, init_backbone,
                                  patchify, position_embedding, timestep_embedding, tokenize)


def _text(cfg, params, prompts=("a person walking",)):
    return encode_text(list(prompts), cfg, params)


def test_config_invariants():
    BackboneConfig()
    with pytest.raises(ConfigError):
        BackboneConfig(num_blocks=3)
    with pytest.raises(ConfigError):
        BackboneConfig(num_blocks=0)
    with pytest.raises(ConfigError):
        BackboneConfig(model_dim=30, num_heads=4)
    cfg = BackboneConfig(patch=[1, 2, 2])
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_default_config_matches_documented_toy_scale():
    cfg = BackboneConfig()
    assert (cfg.num_blocks, cfg.model_dim, cfg.num_heads, cfg.patch) == (8, 64, 4, (1, 4, 4))


@pytest.mark.parametrize("shape, grid", [((4, 8, 16, 16), (4, 4, 4)), ((1, 8, 4, 4), (1, 1, 1))])
def test_patchify_grid(shape, grid):
    cfg = BackboneConfig(num_blocks=2, model_dim=16, num_heads=2)
    params = init_backbone(cfg, 0)
    h = patchify(np.zeros(shape, np.float32), cfg, params)
    assert h.grid == grid
    assert h.tokens.shape == (1, int(np.prod(grid)), 16)


def test_patchify_zero_latent_gives_bias():
    cfg = BackboneConfig(num_blocks=2, model_dim=16, num_heads=2)
    params = init_backbone(cfg, 0)
    params.assign("backbone.patch.b", np.arange(16, dtype=np.float32))
    h = patchify(np.zeros((2, 8, 8, 8), np.float32), cfg, params)
    np.testing.assert_array_equal(h.tokens.data[0], np.tile(np.arange(16, dtype=np.float32), (8, 1)))


def test_patchify_rejects_indivisible_extents():
    cfg = BackboneConfig(num_blocks=2, model_dim=16, num_heads=2)
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 8, 6, 8), np.float32), cfg, init_backbone(cfg, 0))


def test_hidden_state_grid_check():
    with pytest.raises(ValueError):
        HiddenState(Tensor(np.zeros((1, 5, 4))), (1, 2, 2))
    with pytest.raises(ValueError):
        TextTokens(Tensor(np.zeros((1, 0, 4))))


def test_empty_prompt_maps_to_null_token(tiny_cfg):
    ids = tokenize("", tiny_cfg)
    assert ids.shape == (tiny_cfg.text_len,) and not ids.any()
    assert tokenize("A person WALKING xyzzy", tiny_cfg)[:3].tolist() == [1, 4, 8]


def test_block_with_zero_output_projections_is_identity(tiny_cfg):
    params = init_backbone(tiny_cfg, 1)
    for lin in ("attn.out", "xattn.out", "mlp.fc2"):
        for suffix in ("w", "b"):
            name = f"backbone.blocks.0.{lin}.{suffix}"
            params.assign(name, np.zeros_like(params.array(name)))
    x = np.random.default_rng(0).normal(size=(1, 8, 16)).astype(np.float32)
    h = HiddenState(Tensor(x), (2, 2, 2))
    out = backbone_block(h, _text(tiny_cfg, params), timestep_embedding(0.3, tiny_cfg, params), params, 0, tiny_cfg)
    assert np.array_equal(out.tokens.data, x)
    assert out.grid == h.grid


def test_block_dimension_mismatch(tiny_cfg):
    params = init_backbone(tiny_cfg, 1)
    h = HiddenState(Tensor(np.zeros((1, 8, 12), np.float32)), (2, 2, 2))
    with pytest.raises(ValueError):
        backbone_block(h, _text(tiny_cfg, params), timestep_embedding(0.3, tiny_cfg, params), params, 0, tiny_cfg)


def test_block_batch_equivariance(tiny_cfg):
    params = init_backbone(tiny_cfg, 2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 8, 16)).astype(np.float32)
    prompts = ["a person walking", "a woman waving"]
    t = np.array([0.2, 0.7])
    a = backbone_block(HiddenState(Tensor(x), (2, 2, 2)), _text(tiny_cfg, params, prompts),
                       timestep_embedding(t, tiny_cfg, params), params, 0, tiny_cfg)
    b = backbone_block(HiddenState(Tensor(x[::-1].copy()), (2, 2, 2)), _text(tiny_cfg, params, prompts[::-1]),
                       timestep_embedding(t[::-1], tiny_cfg, params), params, 0, tiny_cfg)
    np.testing.assert_allclose(a.tokens.data[::-1], b.tokens.data, rtol=0, atol=1e-6)


def test_forward_shape_and_determinism(tiny_cfg):
    params = init_backbone(tiny_cfg, 3)
    z = np.random.default_rng(2).normal(size=(4, 8, 16, 16)).astype(np.float32)
    text = _text(tiny_cfg, params)
    a = backbone_forward(z, 0.5, text, tiny_cfg, params).data
    b = backbone_forward(z, 0.5, text, tiny_cfg, params).data
    assert a.shape == z.shape
    assert np.array_equal(a, b)
    assert np.array_equal(init_backbone(tiny_cfg, 3).digest(), params.digest())


def test_zero_head_gives_zero_velocity(tiny_cfg):
    params = init_backbone(tiny_cfg, 3)
    for s in ("w", "b"):
        params.assign(f"backbone.head.{s}", np.zeros_like(params.array(f"backbone.head.{s}")))
    z = np.random.default_rng(2).normal(size=(2, 8, 4, 4)).astype(np.float32)
    out = backbone_forward(z, 0.1, _text(tiny_cfg, params), tiny_cfg, params).data
    assert not out.any()


def test_timestep_range(tiny_cfg):
    params = init_backbone(tiny_cfg, 0)
    with pytest.raises(ValueError):
        timestep_embedding(1.5, tiny_cfg, params)


def test_backbone_is_frozen_by_default(tiny_cfg):
    params = init_backbone(tiny_cfg, 0)
    assert params.trainable_names() == []


def test_position_embedding_distinct():
    pos = position_embedding((2, 3, 3), 24)
    assert pos.shape == (18, 24)
    assert len({tuple(np.round(r, 6)) for r in pos}) == 18


@settings(max_examples=15, deadline=None)
@given(blocks=st.sampled_from([2, 4]), heads=st.sampled_from([1, 2, 4]), pt=st.sampled_from([1, 2]),
       ps=st.sampled_from([1, 2]), t=st.integers(1, 2), hw=st.integers(1, 3))
def test_forward_preserves_extents(blocks, heads, pt, ps, t, hw):
    cfg = BackboneConfig(num_blocks=blocks, model_dim=8 * heads, num_heads=heads, patch=(pt, ps, ps), text_dim=8)
    params = init_backbone(cfg, 0)
    shape = (t * pt, cfg.latent_channels, hw * ps, hw * ps)
    z = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    assert backbone_forward(z, 0.4, _text(cfg, params), cfg, params).shape == shape
