import numpy as np
import pytest

from garmentanim.backbone import BackboneConfig, init_backbone, patchify
from garmentanim.conditioning import (LatentVolume, PoseSequence, TripletSample, build_gtm_context,
                                      build_ham_context, decode_latent, encode_latent,
                                      latent_projection, project_context, render_pose,
                                      sample_latents, video_from_uint8, video_to_uint8)
from garmentanim.dual_module import init_adapters
from garmentanim.toy import toy_keypoints


def _lat(frames, c=8, h=4, w=4, seed=0):
    return LatentVolume(np.random.default_rng(seed).normal(size=(frames, c, h, w)))


def test_encode_shape_and_zero():
    v = np.random.default_rng(0).uniform(size=(8, 3, 64, 64))
    assert encode_latent(v).data.shape == (8, 8, 16, 16)
    assert not encode_latent(np.zeros((2, 3, 8, 8))).data.any()


def test_encode_rejects_bad_extents():
    with pytest.raises(ValueError):
        encode_latent(np.zeros((1, 3, 6, 8)))
    with pytest.raises(ValueError):
        encode_latent(np.full((1, 3, 8, 8), np.nan))


def test_encode_is_deterministic_and_linear():
    v = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    a, b = encode_latent(v).data, encode_latent(v).data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(encode_latent(2 * v).data, 2 * a, rtol=1e-6, atol=1e-6)


def test_projection_is_orthonormal():
    p = latent_projection()
    np.testing.assert_allclose(p @ p.T, np.eye(8), atol=1e-12)


def test_decode_error_below_patch_mean_bound():
    v = np.random.default_rng(2).uniform(size=(1, 3, 16, 16))
    rec = decode_latent(encode_latent(v))
    # The projection spans the per-colour patch means, so its reconstruction is at
    # least as good as replacing every 4x4 patch by its mean colour.
    means = v.reshape(1, 3, 4, 4, 4, 4).mean(axis=(3, 5), keepdims=True)
    mean_rec = np.broadcast_to(means, (1, 3, 4, 4, 4, 4)).reshape(v.shape)
    err = ((rec - v) ** 2).reshape(1, 3, 4, 4, 4, 4).sum(axis=(1, 3, 5))
    bound = ((mean_rec - v) ** 2).reshape(1, 3, 4, 4, 4, 4).sum(axis=(1, 3, 5))
    assert np.all(err <= bound + 1e-6)


def test_solid_patches_round_trip():
    v = np.zeros((1, 3, 8, 8), np.float32)
    v[:, :, :4, 4:] = np.array([0.2, 0.5, 0.9])[:, None, None]
    np.testing.assert_allclose(decode_latent(encode_latent(v)), v, atol=1e-6)


def test_ham_context_concatenation():
    zh, zp = _lat(1, seed=1), _lat(8, seed=2)
    ctx = build_ham_context(zh, zp)
    assert ctx.frames == 9
    assert np.array_equal(ctx.data[0], zh.data[0])
    assert np.array_equal(ctx.data[1:], zp.data)
    empty = LatentVolume(np.zeros((0, 8, 4, 4)))
    assert np.array_equal(build_ham_context(zh, empty).data, zh.data)


def test_ham_context_errors():
    with pytest.raises(ValueError):
        build_ham_context(_lat(1), _lat(2, h=8))
    with pytest.raises(ValueError):
        build_ham_context(_lat(2), _lat(2))


def test_gtm_context_padding():
    g = _lat(1, seed=3)
    ctx = build_gtm_context([g], 9)
    assert ctx.frames == 9
    assert np.array_equal(ctx.data[0], g.data[0])
    assert not ctx.data[1:].any()
    two = [_lat(1, seed=4), _lat(1, seed=5)]
    assert np.array_equal(build_gtm_context(two, 2).data, np.concatenate([z.data for z in two]))
    with pytest.raises(ValueError):
        build_gtm_context([_lat(1, seed=i) for i in range(3)], 2)
    with pytest.raises(ValueError):
        build_gtm_context([], 2)


def test_project_context_tokens():
    cfg = BackboneConfig(num_blocks=2, model_dim=16, num_heads=2, patch=(1, 4, 4))
    params = init_adapters(init_backbone(cfg, 0), cfg)
    ctx = _lat(9, h=16, w=16)
    tok = project_context(ctx, params, "ham.proj", cfg)
    assert tok.tokens.shape == (1, 144, 16)
    assert tok.grid == patchify(ctx.data, cfg, params).grid
    bias = params.array("ham.proj.b")
    zero = project_context(LatentVolume(np.zeros((9, 8, 16, 16))), params, "ham.proj", cfg)
    assert np.array_equal(zero.tokens.data[0], np.tile(bias, (144, 1)))
    double = project_context(LatentVolume(2 * ctx.data), params, "ham.proj", cfg)
    np.testing.assert_allclose(double.tokens.data - bias, 2 * (tok.tokens.data - bias), rtol=1e-5, atol=1e-5)
    with pytest.raises(ValueError):
        project_context(_lat(1, h=6, w=8), params, "ham.proj", cfg)


def test_pose_rendering():
    kp = toy_keypoints("wave", 2)
    img = render_pose(kp, 32, 32)
    assert img.shape == (2, 3, 32, 32)
    assert img.max() == 1.0 and img.min() == 0.0
    low = kp.copy()
    low[..., 2] = 0.0
    assert not render_pose(low, 32, 32).any()
    with pytest.raises(ValueError):
        PoseSequence(np.full((1, 14, 3), 2.0), 32, 32)


def test_triplet_invariants():
    frame = np.zeros((1, 3, 32, 32), np.float32)
    pose = PoseSequence(toy_keypoints("wave", 2), 32, 32)
    truth = np.zeros((2, 3, 32, 32), np.float32)
    TripletSample(frame, [frame], pose, "a person", truth)
    with pytest.raises(ValueError):
        TripletSample(frame, [], pose, "a person", truth)
    with pytest.raises(ValueError):
        TripletSample(frame, [frame], pose, "a person", truth[:1])
    with pytest.raises(ValueError):
        TripletSample(frame, [frame], pose, "a person", truth, source="web")


def test_sample_latents_lengths(small_samples):
    z, ham, gtm = sample_latents(small_samples[0])
    assert z.shape == (2, 8, 8, 8)
    assert ham.shape == gtm.shape == (3, 8, 8, 8)


def test_uint8_round_trip():
    frames = np.random.default_rng(0).integers(0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
    assert np.array_equal(video_to_uint8(video_from_uint8(frames)), frames)
