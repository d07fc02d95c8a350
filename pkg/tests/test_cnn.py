import numpy as np
import pytest

from fundusfuse import tensor as T
from fundusfuse.cnn import (CnnConfig, SqueezeExcite, StageSpec, build_backbone,
                            squeeze_excitation)
from fundusfuse.tensor import ConfigurationError, Tensor, grad_check


def test_full_b0_output_stride_and_grid():
    cfg = CnnConfig.full_b0()
    assert cfg.output_stride == 32
    assert 224 // cfg.output_stride == 7


def test_desk_backbone_gives_7x7_grid(rng):
    net = build_backbone(CnnConfig(), 0).eval()
    fmap = net(Tensor(rng.random((1, 3, 224, 224))))
    assert fmap.tensor.shape == (1, 256, 7, 7)
    assert fmap.stride == 32


def test_tiny_config_gives_56x56_grid(rng):
    cfg = CnnConfig.tiny()
    assert cfg.output_stride == 4
    fmap = build_backbone(cfg, 0).eval()(Tensor(rng.random((1, 3, 224, 224))))
    assert fmap.tensor.shape[2:] == (56, 56)


def test_same_seed_same_parameters():
    a = build_backbone(CnnConfig.micro(), 7).state_dict()
    b = build_backbone(CnnConfig.micro(), 7).state_dict()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    c = build_backbone(CnnConfig.micro(), 8).state_dict()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_invalid_stage_arithmetic():
    with pytest.raises(ConfigurationError):
        build_backbone(CnnConfig(stages=(StageSpec(1, 8, 4, 1, 1),)), 0)
    with pytest.raises(ConfigurationError):
        build_backbone(CnnConfig(stages=()), 0)
    with pytest.raises(ConfigurationError):
        build_backbone(CnnConfig(stages=(StageSpec(1, 8, 3, 0, 1),)), 0)


def test_zero_image_with_zero_init_last_bn_gives_bias_path():
    cfg = CnnConfig.micro()
    cfg.zero_init_last_bn = True
    net = build_backbone(cfg, 0).eval()
    out = net(Tensor(np.zeros((1, 3, 64, 64)))).tensor.data
    assert np.isfinite(out).all()
    # zero gain leaves silu(bias) = silu(0) = 0 everywhere
    np.testing.assert_array_equal(out, 0.0)
    net.head.bn.bias.data[...] = 1.5
    out = net(Tensor(np.zeros((1, 3, 64, 64)))).tensor.data
    np.testing.assert_allclose(out, T.silu(Tensor(1.5)).data, rtol=1e-6)


def test_batch_independence_in_eval(rng):
    net = build_backbone(CnnConfig.micro(), 0).eval()
    img = rng.random((1, 3, 64, 64))
    out = net(Tensor(np.concatenate([img, img]))).tensor.data
    np.testing.assert_array_equal(out[0], out[1])


def test_nan_aborts_with_layer_name():
    net = build_backbone(CnnConfig.micro(), 0).eval()
    img = np.zeros((1, 3, 32, 32))
    img[0, 0, 3, 3] = np.nan
    with pytest.raises(T.NonFiniteError, match="cnn.stem"):
        net(Tensor(img))


def test_backbone_gradients(rng):
    cfg = CnnConfig(stem_channels=4, stages=(StageSpec(2, 4, 3, 1, 1), StageSpec(2, 6, 3, 2, 1)),
                    feature_channels=6)
    net = build_backbone(cfg, 3)
    x = Tensor(rng.random((2, 3, 8, 8)))
    weights = Tensor(rng.normal(size=(2, 6, 2, 2)))
    loss = lambda _: T.tsum(net(x).tensor * weights)
    block = net.stage[0].block[0]
    for p in (net.stem.conv.weight, block.dw.conv.weight, block.se.fc1.weight,
              block.se.fc2.bias, block.dw.bn.weight, net.head.bn.bias):
        assert grad_check(loss, p) < 1e-3


def test_se_half_gate_when_zero_init(rng):
    se = SqueezeExcite(4, 2, rng)
    se.fc2.weight.data[...] = 0.0
    se.fc2.bias.data[...] = 0.0
    x = rng.normal(size=(2, 4, 3, 3))
    np.testing.assert_allclose(se(Tensor(x)).data, 0.5 * x.astype(np.float32), rtol=1e-6)


def test_se_zero_input_gives_zero(rng):
    out = squeeze_excitation(Tensor(np.zeros((1, 8, 4, 4))), 0.25, rng)
    np.testing.assert_array_equal(out.data, 0.0)


def test_se_ratio_is_hand_computed_gate(rng):
    se = SqueezeExcite(6, 3, rng)
    x = rng.normal(size=(2, 6, 5, 5)).astype(np.float32) + 0.1
    out = se(Tensor(x)).data
    pooled = x.astype(np.float64).mean(axis=(2, 3))
    h = pooled @ se.fc1.weight.data + se.fc1.bias.data
    h = h / (1 + np.exp(-h))
    gate = 1 / (1 + np.exp(-(h @ se.fc2.weight.data + se.fc2.bias.data)))
    ratio = out / x
    np.testing.assert_allclose(ratio, np.broadcast_to(gate[:, :, None, None], x.shape), rtol=1e-4)


def test_config_roundtrip():
    cfg = CnnConfig.micro()
    assert CnnConfig.from_dict(cfg.to_dict()) == cfg
