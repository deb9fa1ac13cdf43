import numpy as np
import pytest

from errors import ContractError, ShapeError
from nn_layers import (
    BatchNorm,
    Conv2d,
    Linear,
    batchnorm_forward,
    conv2d_forward,
    global_avg_pool,
    he_init,
    linear_forward,
    max_pool2d,
)
from tensor_autodiff import Tensor, backward, grad_check, mul, sum as tensor_sum


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(mul(out, Tensor(weights)))


class TestLinear:
    def test_identity_weights(self, rng):
        layer = Linear(3, 3, rng=0)
        layer.weight.data = np.eye(3)
        x = Tensor(rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(linear_forward(layer, x).data, x.data)

    def test_zero_weights_give_bias(self, rng):
        layer = Linear(5, 2, rng=0)
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = [1.5, -2.0]
        out = layer(Tensor(rng.normal(size=(3, 5))))
        np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))

    def test_gradients(self, rng):
        layer = Linear(4, 3, rng=1)
        layer.bias.data = rng.normal(size=3)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = rng.normal(size=(5, 3))
        assert grad_check(lambda: weighted_sum(layer(x), w), [x, layer.weight, layer.bias]) < 1e-6

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            Linear(4, 2, rng=0)(Tensor(np.ones((2, 3))))


class TestBatchNorm:
    def test_standardized_input_passes_through(self, rng):
        x = rng.normal(size=(16, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        out = batchnorm_forward(BatchNorm(3), Tensor(x), mode="train")
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_eval_with_default_statistics(self, rng):
        x = rng.normal(size=(4, 3))
        out = batchnorm_forward(BatchNorm(3), Tensor(x), mode="eval")
        np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5), rtol=1e-12)

    def test_train_output_statistics(self, rng):
        bn = BatchNorm(3)
        bn.gamma.data = np.array([0.5, 2.0, 1.5])
        bn.beta.data = np.array([1.0, -1.0, 0.0])
        out = bn(Tensor(rng.normal(3.0, 4.0, size=(64, 3)))).data
        np.testing.assert_allclose(out.mean(axis=0), bn.beta.data, atol=1e-3)
        np.testing.assert_allclose(out.var(axis=0), bn.gamma.data ** 2, rtol=1e-3)

    def test_running_statistics_update(self, rng):
        x = rng.normal(2.0, 3.0, size=(10, 4))
        bn = BatchNorm(4, momentum=0.1)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-12)

    def test_running_statistics_update_4d(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        bn = BatchNorm(2)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)

    def test_eval_mode_is_affine(self, rng):
        bn = BatchNorm(3).eval()
        bn.gamma.data = rng.normal(size=3)
        bn.beta.data = rng.normal(size=3)
        bn.running_mean.data = rng.normal(size=3)
        bn.running_var.data = rng.uniform(0.5, 2.0, size=3)
        x1, x2 = rng.normal(size=(2, 5, 3))

        def f(v):
            return bn(Tensor(v)).data

        np.testing.assert_allclose(f(x1) + f(x2) - f(np.zeros((5, 3))), f(x1 + x2), atol=1e-10)

    def test_eval_mode_leaves_running_statistics(self, rng):
        bn = BatchNorm(3).eval()
        bn(Tensor(rng.normal(size=(5, 3))))
        np.testing.assert_array_equal(bn.running_mean.data, np.zeros(3))
        np.testing.assert_array_equal(bn.running_var.data, np.ones(3))

    @pytest.mark.parametrize("shape", [(6, 3), (3, 3, 2, 2)])
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, rng, shape, mode):
        bn = BatchNorm(3)
        bn.set_mode(mode)
        bn.gamma.data = rng.uniform(0.5, 1.5, size=3)
        bn.beta.data = rng.normal(size=3)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        w = rng.normal(size=shape)
        assert grad_check(lambda: weighted_sum(bn(x), w), [x, bn.gamma, bn.beta]) < 1e-5

    def test_single_sample_in_train_mode(self):
        with pytest.raises(ContractError):
            BatchNorm(3)(Tensor(np.ones((1, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            BatchNorm(3)(Tensor(np.ones((4, 2))))


class TestConv2d:
    def test_unit_kernel_is_identity(self, rng):
        conv = Conv2d(1, 1, 1, bias=False, rng=0)
        conv.weight.data[...] = 1.0
        x = Tensor(rng.normal(size=(2, 1, 5, 5)))
        np.testing.assert_allclose(conv2d_forward(conv, x).data, x.data, rtol=1e-15)

    def test_averaging_kernel_on_constant_image(self):
        conv = Conv2d(1, 1, 3, bias=False, rng=0)
        conv.weight.data[...] = 1.0 / 9.0
        out = conv(Tensor(np.full((1, 1, 5, 5), 0.7))).data
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out, 0.7, rtol=1e-12)

    def test_output_geometry(self):
        conv = Conv2d(2, 3, 3, stride=2, padding=1, rng=0)
        assert conv(Tensor(np.ones((1, 2, 5, 5)))).shape == (1, 3, 3, 3)

    def test_invalid_geometry(self):
        with pytest.raises(ShapeError):
            Conv2d(1, 1, 7, rng=0)(Tensor(np.ones((1, 1, 5, 5))))

    def test_gradients(self, rng):
        conv = Conv2d(3, 2, 3, padding=1, rng=2)
        conv.bias.data = rng.normal(size=2)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        w = rng.normal(size=(2, 2, 5, 5))
        assert grad_check(lambda: weighted_sum(conv(x), w), [x, conv.weight, conv.bias]) < 1e-5

    def test_strided_gradients(self, rng):
        conv = Conv2d(1, 2, 3, stride=2, padding=1, bias=False, rng=3)
        x = Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
        w = rng.normal(size=(1, 2, 3, 3))
        assert grad_check(lambda: weighted_sum(conv(x), w), [x, conv.weight]) < 1e-5


class TestPooling:
    def test_global_avg_pool_of_constant(self):
        np.testing.assert_allclose(global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.25))).data, 1.25)

    def test_global_avg_pool_of_single_pixel(self, rng):
        x = rng.normal(size=(2, 3, 1, 1))
        np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])

    def test_global_avg_pool_gradient(self):
        x = Tensor(np.ones((1, 2, 3, 4)), requires_grad=True)
        backward(tensor_sum(global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, 1.0 / 12.0)

    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool2d(Tensor(x)).data, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_max_pool_routes_ties_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(tensor_sum(max_pool2d(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_max_pool_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 5)), requires_grad=True)
        w = rng.normal(size=(2, 2, 2, 2))
        assert grad_check(lambda: weighted_sum(max_pool2d(x), w), [x]) < 1e-6


class TestHeInit:
    def test_variance(self):
        samples = he_init((1_000_000,), 50, rng_seed=0).data
        assert abs(samples.var() / 0.04 - 1.0) < 0.02
        assert abs(samples.mean()) < 1e-3

    def test_unit_std_for_fan_in_two(self):
        assert abs(he_init((200_000,), 2, rng_seed=1).data.std() - 1.0) < 0.01

    def test_seeded(self):
        np.testing.assert_array_equal(he_init((3, 4), 4, 7).data, he_init((3, 4), 4, 7).data)

    def test_non_positive_fan_in(self):
        with pytest.raises(ContractError):
            he_init((2, 2), 0)


class TestModule:
    def test_state_dict_round_trip(self, rng):
        a, b = BatchNorm(3), BatchNorm(3)
        a.gamma.data = rng.normal(size=3)
        a.running_var.data = rng.uniform(size=3)
        b.load_state_dict(a.state_dict())
        for name, value in a.state_dict().items():
            np.testing.assert_array_equal(b.state_dict()[name], value)

    def test_load_state_dict_missing_key(self):
        state = BatchNorm(3).state_dict()
        del state["gamma"]
        with pytest.raises(ContractError):
            BatchNorm(3).load_state_dict(state)

    def test_load_state_dict_wrong_shape(self):
        with pytest.raises(ShapeError):
            BatchNorm(3).load_state_dict(BatchNorm(4).state_dict())

    def test_parameters_and_buffers_are_separate(self):
        bn = BatchNorm(2)
        assert [n for n, _ in bn.named_parameters()] == ["gamma", "beta"]
        assert [n for n, _ in bn.named_buffers()] == ["running_mean", "running_var"]
        assert bn.num_parameters() == 4

    def test_invalid_mode(self):
        with pytest.raises(ContractError):
            BatchNorm(2).set_mode("predict")
