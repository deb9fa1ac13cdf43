"""
Parameterized layers: linear, batch norm (1-D and 2-D), convolution,
pooling, and He initialization.

Layers are `Module`s: they own their parameters (trainable tensors) and
buffers (running statistics), expose them under stable dotted names, and
switch between train and eval mode recursively.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, ShapeError
from tensor_autodiff import Tensor, bias_add, matmul, record, reshape, transpose

logger = logging.getLogger(__name__)

RngLike = Union[int, np.random.Generator, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def he_init(shape: Sequence[int], fan_in: int, rng_seed: RngLike = None) -> Tensor:
    """Zero-mean normal samples with std sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ContractError(f"he_init: fan_in must be positive, got {fan_in}")
    rng = as_generator(rng_seed)
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True)


# ═══════════════════════════════════════════════════════════════════════════════
# MODULE BASE
# ═══════════════════════════════════════════════════════════════════════════════

class Module:
    def __init__(self):
        self._parameters: Dict[str, Tensor] = {}
        self._buffers: Dict[str, Tensor] = {}
        self._modules: Dict[str, "Module"] = {}
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        tensor.name = name
        self._parameters[name] = tensor
        return tensor

    def register_buffer(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = False
        tensor.name = name
        self._buffers[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_mode(self, mode: str) -> "Module":
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got '{mode}'")
        return self.train(mode == "train")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._buffers.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: t.data.copy() for name, t in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in own.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"load '{name}'", tensor.shape, value.shape)
            tensor.data = value.astype(tensor.dtype, copy=True)


# ═══════════════════════════════════════════════════════════════════════════════
# LAYERS
# ═══════════════════════════════════════════════════════════════════════════════

class Linear(Module):
    """y = x · Wᵀ + b"""

    def __init__(self, in_features: int, out_features: int, rng: RngLike = None, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.register_parameter("weight", he_init((out_features, in_features), in_features, rng))
        self.bias = None
        if bias:
            self.bias = self.register_parameter("bias", Tensor(np.zeros(out_features)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        out = matmul(x, transpose(self.weight))
        return bias_add(out, self.bias) if self.bias is not None else out


class BatchNorm(Module):
    """
    Batch normalization over axis 1 of a B×C or B×C×H×W input.

    Train mode normalizes with the biased batch variance and folds the
    unbiased one into the running statistics; eval mode is the fixed
    per-channel affine map given by the running statistics.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ContractError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.register_parameter("gamma", Tensor(np.ones(num_features)))
        self.beta = self.register_parameter("beta", Tensor(np.zeros(num_features)))
        self.running_mean = self.register_buffer("running_mean", Tensor(np.zeros(num_features)))
        self.running_var = self.register_buffer("running_var", Tensor(np.ones(num_features)))

    def forward(self, x: Tensor) -> Tensor:
        channels = self.num_features
        if x.ndim not in (2, 4) or x.shape[1] != channels:
            raise ShapeError("batchnorm", x.shape, (channels,))
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        view = (1, channels) + (1,) * (x.ndim - 2)
        gamma = self.gamma.data.reshape(view)
        beta = self.beta.data.reshape(view)

        if self.training:
            if x.shape[0] < 2:
                raise ContractError(f"batch norm in train mode needs a batch of at least 2, got {x.shape[0]}")
            count = x.data.size // channels
            mu = x.data.mean(axis=axes, keepdims=True)
            centered = x.data - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = centered * inv_std

            m = self.momentum
            self.running_mean.data[:] = (1.0 - m) * self.running_mean.data + m * mu.reshape(channels)
            unbiased = var.reshape(channels) * (count / (count - 1))
            self.running_var.data[:] = (1.0 - m) * self.running_var.data + m * unbiased

            def rule(g):
                g_sum = g.sum(axis=axes, keepdims=True)
                gx_sum = (g * x_hat).sum(axis=axes, keepdims=True)
                dx = (gamma * inv_std / count) * (count * g - g_sum - x_hat * gx_sum)
                return dx, gx_sum.reshape(channels), g_sum.reshape(channels)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.data.reshape(view) + self.eps)
            x_hat = (x.data - self.running_mean.data.reshape(view)) * inv_std

            def rule(g):
                dx = g * (gamma * inv_std)
                return dx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

        out = gamma * x_hat + beta
        return record("batchnorm", out.astype(x.dtype, copy=False), (x, self.gamma, self.beta), rule)


class Conv2d(Module):
    """Cross-correlation via im2col; weight is outC×inC×k×k."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: RngLike = None):
        super().__init__()
        if stride < 1 or padding < 0:
            raise ContractError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = self.register_parameter(
            "weight", he_init((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng))
        self.bias = None
        if bias:
            self.bias = self.register_parameter("bias", Tensor(np.zeros(out_channels)))

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError("conv2d", x.shape, self.weight.shape)
        batch, channels, height, width = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        out_h, out_w = self.output_size(height), self.output_size(width)
        if out_h < 1 or out_w < 1:
            raise ShapeError("conv2d geometry", x.shape, self.weight.shape)

        padded = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * k * k)
        w_mat = self.weight.data.reshape(self.out_channels, -1)
        out = (cols @ w_mat.T).reshape(batch, out_h, out_w, self.out_channels).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        w_shape = self.weight.shape

        def rule(g):
            g_mat = g.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
            d_weight = (g_mat.T @ cols).reshape(w_shape)
            d_cols = (g_mat @ w_mat).reshape(batch, out_h, out_w, channels, k, k)
            d_padded = np.zeros(padded.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    d_padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += d_cols[..., i, j].transpose(0, 3, 1, 2)
            return d_padded[:, :, p:p + height, p:p + width], d_weight

        out_t = record("conv2d", out, (x, self.weight), rule)
        return bias_add(out_t, self.bias) if self.bias is not None else out_t


# ═══════════════════════════════════════════════════════════════════════════════
# POOLING AND RESHAPING
# ═══════════════════════════════════════════════════════════════════════════════

def max_pool2d(x: Tensor) -> Tensor:
    """2×2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("max_pool2d", x.shape)
    batch, channels, height, width = x.shape
    out_h, out_w = height // 2, width // 2
    cropped = x.data[:, :, :2 * out_h, :2 * out_w]
    blocks = cropped.reshape(batch, channels, out_h, 2, out_w, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(batch, channels, out_h, out_w, 4)
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def rule(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, winner, g[..., None], axis=-1)
        routed = routed.reshape(batch, channels, out_h, out_w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, :2 * out_h, :2 * out_w] = routed.reshape(batch, channels, 2 * out_h, 2 * out_w)
        return (dx,)

    return record("max_pool2d", out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, B×C×H×W → B×C; channel identity is preserved."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    area = x.shape[2] * x.shape[3]
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / area, shape).copy(),)

    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), rule)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ═══════════════════════════════════════════════════════════════════════════════
# FUNCTIONAL ENTRY POINTS
# ═══════════════════════════════════════════════════════════════════════════════

def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


def batchnorm_forward(layer: BatchNorm, x: Tensor, mode: Optional[str] = None) -> Tensor:
    if mode is not None:
        layer.set_mode(mode)
    return layer(x)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    return layer(x)

