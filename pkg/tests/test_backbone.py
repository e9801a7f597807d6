"""Wave-MLP backbone: patching, mixers, wave representation, stage layout."""

import numpy as np
import pytest

import psl.tensorcore as tc
from psl.backbone import (BackboneConfig, ChannelMixerParams, WaveMlpBackbone,
                          _linear_params, _wave_params, backbone_forward,
                          channel_mix, count_params, extract_patches,
                          patch_partition, wave_block)
from psl.errors import ConfigError, DimensionError
from psl.tensorcore import Tensor, gradcheck


@pytest.fixture
def f64():
    with tc.default_dtype(np.float64):
        yield


# -- patch partition -----------------------------------------------------------


def test_patch_count_32(f64):
    rng = np.random.default_rng(0)
    proj = _linear_params(rng, 8, 3 * 16 * 16)
    tokens = patch_partition(Tensor(rng.normal(size=(3, 32, 32))), 16, proj)
    assert tokens.tokens.shape == (4, 8)


def test_patch_count_224():
    patches = extract_patches(Tensor(np.zeros((3, 224, 224), dtype=np.float32)), 16)
    assert patches.shape == (196, 3 * 16 * 16)


def test_constant_frame_identical_tokens(f64):
    patches = extract_patches(Tensor(np.full((3, 32, 32), 0.7)), 16)
    assert np.allclose(patches.data, patches.data[0])


def test_patch_indivisible_rejected():
    with pytest.raises(DimensionError):
        extract_patches(Tensor(np.zeros((3, 30, 30), dtype=np.float32)), 16)


def test_patch_raster_order(f64):
    # pixel values encode (row, col); token 1 must be the top-right patch
    frame = np.zeros((3, 4, 4))
    frame[:, :2, 2:] = 1.0  # top-right 2x2 patch
    patches = extract_patches(Tensor(frame), 2)
    assert np.allclose(patches.data[1], 1.0)
    assert np.allclose(patches.data[0], 0.0)


# -- channel mixer ----------------------------------------------------------------


def test_channel_mix_identity(f64):
    rng = np.random.default_rng(1)
    t = Tensor(rng.normal(size=(5, 4)))
    p = ChannelMixerParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.allclose(channel_mix(t, p).data, t.data)


def test_channel_mix_zero(f64):
    rng = np.random.default_rng(2)
    t = Tensor(rng.normal(size=(5, 4)))
    p = ChannelMixerParams(Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))
    assert np.allclose(channel_mix(t, p).data, 0.0)


def test_channel_mix_per_token_oracle(f64):
    rng = np.random.default_rng(3)
    t = rng.normal(size=(5, 4))
    w, b = rng.normal(size=(6, 4)), rng.normal(size=6)
    out = channel_mix(Tensor(t), ChannelMixerParams(Tensor(w), Tensor(b)))
    ref = np.stack([w @ t[j] + b for j in range(5)])
    assert np.allclose(out.data, ref, atol=1e-12)


def test_channel_mix_permutation_equivariance(f64):
    rng = np.random.default_rng(4)
    t = rng.normal(size=(5, 4))
    p = ChannelMixerParams(Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4)))
    perm = rng.permutation(5)
    a = channel_mix(Tensor(t[perm]), p).data
    b = channel_mix(Tensor(t), p).data[perm]
    assert np.allclose(a, b, atol=1e-12)


def test_channel_mix_dim_mismatch():
    p = ChannelMixerParams(Tensor(np.zeros((4, 4), dtype=np.float32)),
                           Tensor(np.zeros(4, dtype=np.float32)))
    with pytest.raises(DimensionError):
        channel_mix(Tensor(np.zeros((5, 3), dtype=np.float32)), p)


# -- wave block -----------------------------------------------------------------


def _scalar_wave_oracle(t, w_t, w_i, w_phase):
    n, d = t.shape
    out = np.zeros_like(t)
    for j in range(n):
        for k in range(n):
            theta = w_phase @ t[k]
            out[j] += w_t[j, k] * (t[k] * np.cos(theta))
            out[j] += w_i[j, k] * (t[k] * np.sin(theta))
    return out


def test_wave_block_phase_zero_reduction(f64):
    rng = np.random.default_rng(5)
    p = _wave_params(rng, 4, 3)
    p.w_c_phase = Tensor(np.zeros((3, 3)), requires_grad=True)
    t = rng.normal(size=(4, 3))
    out = wave_block(Tensor(t), p)
    assert np.array_equal(out.data, p.w_t.data @ t)  # exact, not approximate


def test_wave_block_zero_input(f64):
    rng = np.random.default_rng(6)
    p = _wave_params(rng, 4, 3)
    out = wave_block(Tensor(np.zeros((4, 3))), p)
    assert np.allclose(out.data, 0.0)


def test_wave_block_scalar_loop_oracle_20_instances(f64):
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(1, 5))
        p = _wave_params(rng, n, d)
        t = rng.normal(size=(n, d))
        ref = _scalar_wave_oracle(t, p.w_t.data, p.w_i.data, p.w_c_phase.data)
        assert np.allclose(wave_block(Tensor(t), p).data, ref, atol=1e-6)


def test_wave_block_complex_arithmetic_oracle(f64):
    # two-branch form equals Re[(W_t + i W_i) @ (f * e^{i theta})]
    rng = np.random.default_rng(8)
    for _ in range(5):
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        p = _wave_params(rng, n, d)
        t = rng.normal(size=(n, d))
        theta = t @ p.w_c_phase.data.T
        z = t * np.exp(1j * theta)
        ref = np.real(p.w_t.data @ z) + np.imag(p.w_i.data @ z)
        assert np.allclose(wave_block(Tensor(t), p).data, ref, atol=1e-10)


def test_wave_block_dim_mismatch():
    rng = np.random.default_rng(9)
    p = _wave_params(rng, 4, 3)
    with pytest.raises(DimensionError):
        wave_block(Tensor(np.zeros((5, 3))), p)


# -- full model -------------------------------------------------------------------


def test_backbone_toy_shape(f64):
    cfg = BackboneConfig(image_size=16, patch_size=4, stage_depths=(1, 1, 1, 1),
                         stage_dims=(4, 4, 4, 4), expansion=2)
    model = WaveMlpBackbone(cfg, np.random.default_rng(0))
    out = backbone_forward(Tensor(np.random.default_rng(1).normal(size=(3, 16, 16))), model)
    assert out.shape == (4,)


def test_backbone_full_config_shape():
    cfg = BackboneConfig()
    assert cfg.out_dim == 100
    assert cfg.token_counts[0] == 196


def test_backbone_deterministic(f64):
    cfg = BackboneConfig.toy()
    model = WaveMlpBackbone(cfg, np.random.default_rng(2))
    frame = Tensor(np.random.default_rng(3).normal(size=(3, 32, 32)))
    a = backbone_forward(frame, model).data
    b = backbone_forward(frame, model).data
    assert np.array_equal(a, b)


def test_backbone_batched_matches_single(f64):
    cfg = BackboneConfig.toy()
    model = WaveMlpBackbone(cfg, np.random.default_rng(4))
    frames = np.random.default_rng(5).normal(size=(3, 3, 32, 32))
    batched = model.forward(Tensor(frames)).data
    singles = np.stack([model.forward(Tensor(f)).data for f in frames])
    assert np.allclose(batched, singles, atol=1e-10)


def test_backbone_gradcheck_toy(f64):
    cfg = BackboneConfig(image_size=8, patch_size=4, stage_depths=(1, 1, 1, 1),
                         stage_dims=(3, 3, 3, 3), expansion=2)
    model = WaveMlpBackbone(cfg, np.random.default_rng(6))
    probe = Tensor(np.random.default_rng(7).normal(size=3))
    frame = Tensor(np.random.default_rng(8).normal(size=(3, 8, 8)), requires_grad=True)
    err = gradcheck(lambda t: tc.sum_(tc.mul(model.forward(t), probe)), frame)
    assert err < 1e-4


def test_count_params_closed_form_matches_model(f64):
    cfg = BackboneConfig.toy()
    model = WaveMlpBackbone(cfg, np.random.default_rng(9))
    assert count_params(cfg) == model.num_params()


def test_single_linear_layer_param_count():
    p = _linear_params(np.random.default_rng(0), 2, 3)
    assert int(p.w_c.size) + int(p.bias.size) == 8


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(stage_depths=(1, 1, 1), stage_dims=(4, 4, 4, 4))
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=30, patch_size=16)
