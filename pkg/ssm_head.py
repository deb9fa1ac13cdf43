"""
Split-and-Share classifier head.

The feature vector is cut into H equal splits of n = C / H channels. Head i
sees the prefix made of the first i splits (width i·n), normalizes it with
its own BatchNorm, applies ReLU and classifies it with its own FC layer. The
head outputs are averaged. The first split therefore feeds every head and is
back-propagated H times; the last split feeds only head H.

Also holds the parameter-matched baseline (N parallel full-width FC layers,
averaged) so that every classifier kind produces the same SSMOutput.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from nn_layers import BatchNorm, Linear, Module, RngLike, as_generator
from tensor_autodiff import Tensor, add, relu, scale, slice_channels

logger = logging.getLogger(__name__)

SCHEMES = ("joint", "individual")


@dataclass(frozen=True)
class SSMConfig:
    num_channels: int = 256
    num_heads: int = 4
    num_classes: int = 10
    bn_relu_on_last: bool = True
    scheme: str = "joint"
    use_bn: bool = True
    use_relu: bool = True

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError("ssm.num_heads", f"must be >= 1, got {self.num_heads}")
        if self.num_channels < 1:
            raise ConfigError("backbone.channels", f"feature width must be positive, got {self.num_channels}")
        if self.num_classes < 1:
            raise ConfigError("ssm.num_classes", f"must be >= 1, got {self.num_classes}")
        if self.num_channels % self.num_heads:
            raise ConfigError(
                "ssm.num_heads",
                f"feature width {self.num_channels} is not divisible by num_heads {self.num_heads} "
                f"(the feature width must be an exact multiple of the number of heads)")
        if self.scheme not in SCHEMES:
            raise ConfigError("train.scheme", f"must be one of {SCHEMES}, got '{self.scheme}'")

    @property
    def split_width(self) -> int:
        return self.num_channels // self.num_heads

    def prefix_width(self, head_index: int) -> int:
        """Input width of head `head_index` (1-based)."""
        return head_index * self.split_width

    def transforms_head(self, head_index: int) -> bool:
        """Whether head `head_index` gets the BN/ReLU transform."""
        return head_index < self.num_heads or self.bn_relu_on_last


@dataclass
class SSMOutput:
    head_logits: List[Tensor]
    combined: Tensor

    @property
    def num_heads(self) -> int:
        return len(self.head_logits)


def average_logits(head_logits: List[Tensor]) -> Tensor:
    """Sum in head order, then scale by 1/H; the order is fixed so repeated calls agree bitwise."""
    combined = head_logits[0]
    for logits in head_logits[1:]:
        combined = add(combined, logits)
    return scale(combined, 1.0 / len(head_logits))


# ═══════════════════════════════════════════════════════════════════════════════
# SPLIT-AND-SHARE HEAD
# ═══════════════════════════════════════════════════════════════════════════════

class SSMHead(Module):
    def __init__(self, config: SSMConfig, rng: RngLike = None, bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        super().__init__()
        self.config = config
        rng = as_generator(rng)
        self.bn: List[BatchNorm] = []
        self.fc: List[Linear] = []
        for i in range(1, config.num_heads + 1):
            width = config.prefix_width(i)
            if config.use_bn and config.transforms_head(i):
                self.bn.append(self.add_module(f"bn{i}", BatchNorm(width, eps=bn_eps, momentum=bn_momentum)))
            self.fc.append(self.add_module(f"fc{i}", Linear(width, config.num_classes, rng=rng)))

    @property
    def num_heads(self) -> int:
        return self.config.num_heads

    @property
    def num_channels(self) -> int:
        return self.config.num_channels

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def input_width(self, head_index: int) -> int:
        return self.config.prefix_width(head_index)

    def channel_range(self, head_index: int) -> Tuple[int, int]:
        """The split a head owns: its last n channels, not its whole prefix."""
        n = self.config.split_width
        return (head_index - 1) * n, head_index * n

    def forward(self, features: Tensor) -> SSMOutput:
        cfg = self.config
        if features.ndim != 2 or features.shape[1] != cfg.num_channels:
            raise ShapeError("ssm_forward", features.shape, (features.shape[0], cfg.num_channels))
        head_logits = []
        for i in range(1, cfg.num_heads + 1):
            out = slice_channels(features, cfg.prefix_width(i))
            if cfg.transforms_head(i):
                if cfg.use_bn:
                    out = self.bn[i - 1](out)
                if cfg.use_relu:
                    out = relu(out)
            head_logits.append(self.fc[i - 1](out))
        return SSMOutput(head_logits, average_logits(head_logits))


def ssm_forward(head: SSMHead, features: Tensor, mode: str) -> SSMOutput:
    head.set_mode(mode)
    return head(features)


def ssm_param_count(config: SSMConfig, include_bn: bool = True) -> int:
    """Trainable parameters of the head; running statistics are not counted."""
    total = 0
    for i in range(1, config.num_heads + 1):
        width = config.prefix_width(i)
        total += width * config.num_classes + config.num_classes
        if include_bn and config.use_bn and config.transforms_head(i):
            total += 2 * width
    return total


def collapse_to_linear(head: SSMHead) -> Linear:
    """
    Fold the head into one C → K linear layer.

    Exact when ReLU is bypassed (`use_relu=False`) and the BN layers are in
    eval mode: each eval BN is a per-channel affine map, folded into its FC
    before the zero-padded weights are averaged.
    """
    cfg = head.config
    if cfg.use_relu and any(cfg.transforms_head(i) for i in range(1, cfg.num_heads + 1)):
        logger.warning("collapse_to_linear on a head with ReLU enabled; the result is not equivalent")

    weight = np.zeros((cfg.num_classes, cfg.num_channels), dtype=head.fc[0].weight.dtype)
    bias = np.zeros(cfg.num_classes, dtype=weight.dtype)
    for i in range(1, cfg.num_heads + 1):
        width = cfg.prefix_width(i)
        w = head.fc[i - 1].weight.data
        b = head.fc[i - 1].bias.data
        if cfg.use_bn and cfg.transforms_head(i):
            bn = head.bn[i - 1]
            gain = bn.gamma.data / np.sqrt(bn.running_var.data + bn.eps)
            shift = bn.beta.data - bn.running_mean.data * gain
            b = b + w @ shift
            w = w * gain
        weight[:, :width] += w
        bias += b

    collapsed = Linear(cfg.num_channels, cfg.num_classes, rng=0)
    collapsed.weight.data = weight * (1.0 / cfg.num_heads)
    collapsed.bias.data = bias * (1.0 / cfg.num_heads)
    return collapsed


# ═══════════════════════════════════════════════════════════════════════════════
# PARALLEL FC BASELINE
# ═══════════════════════════════════════════════════════════════════════════════

class ParallelFCHead(Module):
    """N independent full-width FC classifiers, averaged (N=1 is the plain FC head)."""

    def __init__(self, num_channels: int, num_classes: int, count: int = 1, rng: RngLike = None):
        super().__init__()
        if count < 1:
            raise ConfigError("head.num_fc", f"must be >= 1, got {count}")
        self._num_channels = num_channels
        self._num_classes = num_classes
        rng = as_generator(rng)
        self.fc: List[Linear] = [
            self.add_module(f"fc{i}", Linear(num_channels, num_classes, rng=rng)) for i in range(1, count + 1)
        ]

    @property
    def num_heads(self) -> int:
        return len(self.fc)

    @property
    def num_channels(self) -> int:
        return self._num_channels

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def channel_range(self, head_index: int) -> Tuple[int, int]:
        return 0, self._num_channels

    def forward(self, features: Tensor) -> SSMOutput:
        if features.ndim != 2 or features.shape[1] != self._num_channels:
            raise ShapeError("parallel_fc", features.shape, (features.shape[0], self._num_channels))
        head_logits = [fc(features) for fc in self.fc]
        return SSMOutput(head_logits, average_logits(head_logits))


def parallel_fc_param_count(num_channels: int, num_classes: int, count: int = 1) -> int:
    return count * (num_channels * num_classes + num_classes)
