import logging

import numpy as np
import pytest

from errors import ConfigError, ContractError, ShapeError
from nn_layers import Linear
from ssm_head import (
    ParallelFCHead,
    SSMConfig,
    SSMHead,
    collapse_to_linear,
    parallel_fc_param_count,
    ssm_forward,
    ssm_param_count,
)
from tensor_autodiff import Tensor, backward, gradients, mul, sum as tensor_sum


def manual_head(features, bn, fc, transform=True, use_relu=True):
    """One head computed directly in numpy from the layer parameters (train-mode BN)."""
    out = features
    if transform and bn is not None:
        mu = out.mean(axis=0)
        var = out.var(axis=0)
        out = (out - mu) / np.sqrt(var + bn.eps) * bn.gamma.data + bn.beta.data
    if transform and use_relu:
        out = np.maximum(out, 0.0)
    return out @ fc.weight.data.T + fc.bias.data


class TestConfig:
    def test_width_not_divisible(self):
        with pytest.raises(ConfigError, match="divisible") as info:
            SSMConfig(num_channels=250, num_heads=4)
        assert info.value.key == "ssm.num_heads"

    def test_zero_heads(self):
        with pytest.raises(ConfigError):
            SSMConfig(num_heads=0)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            SSMConfig(scheme="greedy")

    def test_widths(self):
        cfg = SSMConfig(num_channels=12, num_heads=3, bn_relu_on_last=False)
        assert cfg.split_width == 4
        assert [cfg.prefix_width(i) for i in (1, 2, 3)] == [4, 8, 12]
        assert [cfg.transforms_head(i) for i in (1, 2, 3)] == [True, True, False]


class TestStructure:
    def test_layer_shapes(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        assert [fc.weight.shape for fc in head.fc] == [(3, 2), (3, 4), (3, 6), (3, 8)]
        assert [bn.num_features for bn in head.bn] == [2, 4, 6, 8]

    def test_last_head_without_bn(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3, bn_relu_on_last=False), rng=0)
        assert len(head.bn) == 3

    def test_channel_range_is_own_split(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        assert [head.channel_range(i) for i in (1, 2, 3, 4)] == [(0, 2), (2, 4), (4, 6), (6, 8)]
        assert head.input_width(3) == 6

    @pytest.mark.parametrize("bn_relu_on_last", [True, False])
    @pytest.mark.parametrize("use_bn", [True, False])
    def test_param_count_matches_module(self, bn_relu_on_last, use_bn):
        cfg = SSMConfig(num_channels=12, num_heads=3, num_classes=5, bn_relu_on_last=bn_relu_on_last, use_bn=use_bn)
        assert ssm_param_count(cfg) == SSMHead(cfg, rng=0).num_parameters()

    def test_param_count_small(self):
        assert ssm_param_count(SSMConfig(num_channels=8, num_heads=2, num_classes=3)) == 66

    def test_param_count_imagenet_head(self):
        cfg = SSMConfig(num_channels=2048, num_heads=4, num_classes=1000, bn_relu_on_last=False)
        single_fc = parallel_fc_param_count(2048, 1000)
        assert ssm_param_count(cfg) == 5_130_144
        assert ssm_param_count(cfg) - single_fc == 3_081_144
        assert ssm_param_count(cfg, include_bn=False) == 5_124_000
        assert parallel_fc_param_count(2048, 1000, 2) - single_fc == 2_049_000

    def test_single_head_without_bn_is_plain_fc(self):
        cfg = SSMConfig(num_channels=2048, num_heads=1, num_classes=1000, use_bn=False)
        assert ssm_param_count(cfg) == parallel_fc_param_count(2048, 1000)


class TestForward:
    def test_zero_weights(self, rng):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        for fc in head.fc:
            fc.weight.data[...] = 0.0
        out = head(Tensor(rng.normal(size=(5, 8))))
        assert all(np.all(h.data == 0.0) for h in out.head_logits)
        assert np.all(out.combined.data == 0.0)

    def test_single_head_with_transform(self, rng):
        head = SSMHead(SSMConfig(num_channels=6, num_heads=1, num_classes=3), rng=0)
        x = rng.normal(size=(7, 6))
        out = head(Tensor(x))
        expected = manual_head(x, head.bn[0], head.fc[0])
        np.testing.assert_allclose(out.combined.data, expected, rtol=1e-10, atol=1e-12)

    def test_single_head_without_transform(self, rng):
        head = SSMHead(SSMConfig(num_channels=6, num_heads=1, num_classes=3, bn_relu_on_last=False), rng=0)
        x = rng.normal(size=(7, 6))
        expected = x @ head.fc[0].weight.data.T + head.fc[0].bias.data
        np.testing.assert_allclose(head(Tensor(x)).combined.data, expected, rtol=1e-12)

    def test_heads_read_nested_prefixes(self, rng):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=3)
        for bn in head.bn:
            bn.gamma.data = rng.uniform(0.5, 1.5, size=bn.num_features)
            bn.beta.data = rng.normal(size=bn.num_features)
        x = rng.normal(size=(6, 8))
        out = head(Tensor(x))
        manual = [manual_head(x[:, :2 * i], head.bn[i - 1], head.fc[i - 1]) for i in range(1, 5)]
        for got, expected in zip(out.head_logits, manual):
            np.testing.assert_allclose(got.data, expected, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(out.combined.data, sum(manual) / 4.0, rtol=1e-10, atol=1e-12)

    def test_combined_is_ordered_sum_then_scale(self, rng):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        out = head(Tensor(rng.normal(size=(5, 8))))
        h = [t.data for t in out.head_logits]
        assert np.array_equal(out.combined.data, (((h[0] + h[1]) + h[2]) + h[3]) * 0.25)

    def test_forward_mode_propagates(self, rng):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=2, num_classes=3), rng=0)
        ssm_forward(head, Tensor(rng.normal(size=(1, 8))), "eval")
        assert not any(bn.training for bn in head.bn)

    def test_width_mismatch(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=2, num_classes=3), rng=0)
        with pytest.raises(ShapeError):
            head(Tensor(np.ones((4, 6))))

    def test_single_sample_in_train_mode(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=2, num_classes=3), rng=0)
        with pytest.raises(ContractError):
            ssm_forward(head, Tensor(np.ones((1, 8))), "train")


class TestGradientStructure:
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_head_gradient_vanishes_past_its_prefix(self, rng, mode):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        head.set_mode(mode)
        x = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        out = head(x)
        for i, logits in enumerate(out.head_logits, start=1):
            grad, = gradients(tensor_sum(mul(logits, Tensor(rng.normal(size=(6, 3))))), [x])
            assert np.all(grad[:, 2 * i:] == 0.0)

    def test_shared_channels_receive_one_gradient_per_head(self, rng):
        cfg = SSMConfig(num_channels=8, num_heads=4, num_classes=3)
        head = SSMHead(cfg, rng=0).eval()
        v = np.array([0.5, 1.0, 0.25])
        for fc in head.fc:
            fc.weight.data = np.tile(v[:, None], (1, fc.in_features))
        x = Tensor(rng.uniform(0.5, 1.5, size=(4, 8)), requires_grad=True)
        backward(tensor_sum(head(x).combined))

        per_block = x.grad.reshape(4, 4, 2)
        for k in range(4):
            np.testing.assert_allclose(per_block[:, k], per_block[:, 3] * (4 - k), rtol=1e-12)

    def test_every_fc_receives_a_gradient_under_joint_loss(self, rng):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=3), rng=0)
        out = head(Tensor(rng.normal(size=(6, 8))))
        backward(tensor_sum(mul(out.combined, Tensor(rng.normal(size=(6, 3))))))
        assert all(np.any(fc.weight.grad != 0.0) for fc in head.fc)


class TestCollapse:
    def test_single_head_without_transform(self):
        head = SSMHead(SSMConfig(num_channels=4, num_heads=1, num_classes=2, use_bn=False, use_relu=False), rng=0)
        collapsed = collapse_to_linear(head)
        np.testing.assert_array_equal(collapsed.weight.data, head.fc[0].weight.data)
        np.testing.assert_array_equal(collapsed.bias.data, head.fc[0].bias.data)

    def test_staircase_weights(self):
        head = SSMHead(SSMConfig(num_channels=8, num_heads=4, num_classes=1, use_bn=False, use_relu=False), rng=0)
        for fc in head.fc:
            fc.weight.data[...] = 1.0
        weight = collapse_to_linear(head).weight.data
        np.testing.assert_allclose(weight[0], [1.0, 1.0, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25], rtol=1e-15)

    @pytest.mark.parametrize("bn_relu_on_last", [True, False])
    def test_equivalent_to_head_without_relu(self, rng, bn_relu_on_last):
        cfg = SSMConfig(num_channels=8, num_heads=4, num_classes=3, use_relu=False, bn_relu_on_last=bn_relu_on_last)
        head = SSMHead(cfg, rng=5).eval()
        for fc in head.fc:
            fc.bias.data = rng.normal(size=3)
        for bn in head.bn:
            bn.gamma.data = rng.normal(size=bn.num_features)
            bn.beta.data = rng.normal(size=bn.num_features)
            bn.running_mean.data = rng.normal(size=bn.num_features)
            bn.running_var.data = rng.uniform(0.5, 2.0, size=bn.num_features)
        x = Tensor(rng.normal(size=(100, 8)))
        collapsed = collapse_to_linear(head)
        assert isinstance(collapsed, Linear)
        diff = np.abs(collapsed(x).data - head(x).combined.data)
        assert diff.max() < 1e-10

    def test_warns_when_relu_is_active(self, caplog):
        head = SSMHead(SSMConfig(num_channels=4, num_heads=2, num_classes=2), rng=0)
        with caplog.at_level(logging.WARNING, logger="ssm_head"):
            collapse_to_linear(head)
        assert "ReLU" in caplog.text


class TestParallelFC:
    def test_param_count(self):
        head = ParallelFCHead(8, 3, count=3, rng=0)
        assert head.num_parameters() == parallel_fc_param_count(8, 3, 3) == 81

    def test_combined_is_mean(self, rng):
        head = ParallelFCHead(8, 3, count=2, rng=0)
        out = head(Tensor(rng.normal(size=(4, 8))))
        assert out.num_heads == 2
        np.testing.assert_allclose(out.combined.data, (out.head_logits[0].data + out.head_logits[1].data) / 2)
        assert head.channel_range(2) == (0, 8)

    def test_zero_count(self):
        with pytest.raises(ConfigError):
            ParallelFCHead(8, 3, count=0)
