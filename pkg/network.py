"""
Backbone + classifier head.

ReferenceCNN is the fixed desk backbone:
    conv3×3·BN·ReLU·pool2 → conv3×3·BN·ReLU·pool2 → conv3×3·BN·ReLU → global_avg_pool
Its last conv activation is exposed so Grad-CAM can map pooled feature
channels back to spatial maps one-to-one.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ContractError, ShapeError
from nn_layers import BatchNorm, Conv2d, Linear, Module, flatten, global_avg_pool, max_pool2d
from ssm_head import ParallelFCHead, SSMConfig, SSMHead, SSMOutput
from tensor_autodiff import Tensor, relu

logger = logging.getLogger(__name__)

BACKBONE_KINDS = ("cnn", "mlp")
HEAD_KINDS = ("ssm", "fc")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "cnn"
    channels: Tuple[int, ...] = (32, 64, 256)
    in_channels: int = 1

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError("backbone.kind", f"must be one of {BACKBONE_KINDS}, got '{self.kind}'")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("backbone.channels", f"need at least one positive width, got {list(self.channels)}")
        if self.in_channels < 1:
            raise ConfigError("backbone.in_channels", f"must be >= 1, got {self.in_channels}")

    @property
    def feature_width(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "ssm"
    num_fc: int = 1

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError("head.kind", f"must be one of {HEAD_KINDS}, got '{self.kind}'")
        if self.num_fc < 1:
            raise ConfigError("head.num_fc", f"must be >= 1, got {self.num_fc}")


# ═══════════════════════════════════════════════════════════════════════════════
# BACKBONES
# ═══════════════════════════════════════════════════════════════════════════════

class ConvBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, pool: bool, rng):
        super().__init__()
        # no conv bias: BN right after removes it
        self.conv = self.add_module("conv", Conv2d(in_channels, out_channels, 3, padding=1, bias=False, rng=rng))
        self.bn = self.add_module("bn", BatchNorm(out_channels))
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn(self.conv(x)))
        return max_pool2d(out) if self.pool else out


class ReferenceCNN(Module):
    def __init__(self, in_channels: int = 1, channels: Sequence[int] = (32, 64, 256), rng=None):
        super().__init__()
        self.blocks: List[ConvBlock] = []
        previous = in_channels
        for i, width in enumerate(channels, start=1):
            pool = i < len(channels)
            self.blocks.append(self.add_module(f"block{i}", ConvBlock(previous, width, pool, rng)))
            previous = width
        self.feature_width = previous

    def activation(self, images: Tensor) -> Tensor:
        """Output of the last conv block, B×C×h×w."""
        out = images
        for block in self.blocks:
            out = block(out)
        return out

    def forward(self, images: Tensor) -> Tensor:
        return global_avg_pool(self.activation(images))


class MLPBackbone(Module):
    def __init__(self, input_size: int, hidden: Sequence[int], rng=None):
        super().__init__()
        self.layers: List[Tuple[Linear, BatchNorm]] = []
        previous = input_size
        for i, width in enumerate(hidden, start=1):
            fc = self.add_module(f"fc{i}", Linear(previous, width, rng=rng))
            bn = self.add_module(f"bn{i}", BatchNorm(width))
            self.layers.append((fc, bn))
            previous = width
        self.feature_width = previous

    def forward(self, images: Tensor) -> Tensor:
        out = flatten(images) if images.ndim > 2 else images
        for fc, bn in self.layers:
            out = relu(bn(fc(out)))
        return out


# ═══════════════════════════════════════════════════════════════════════════════
# NETWORK
# ═══════════════════════════════════════════════════════════════════════════════

class Network(Module):
    def __init__(self, backbone: Module, head: Module, input_shape: Sequence[int]):
        super().__init__()
        self.backbone = self.add_module("backbone", backbone)
        self.head = self.add_module("head", head)
        self.input_shape = tuple(int(d) for d in input_shape)

    @property
    def num_heads(self) -> int:
        return self.head.num_heads

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def supports_grad_cam(self) -> bool:
        return isinstance(self.backbone, ReferenceCNN)

    def channel_range(self, head_index: int) -> Tuple[int, int]:
        return self.head.channel_range(head_index)

    def _check_input(self, images: Tensor) -> None:
        if tuple(images.shape[1:]) != self.input_shape:
            raise ShapeError("network input", images.shape, (images.shape[0],) + self.input_shape)

    def forward(self, images: Tensor) -> SSMOutput:
        self._check_input(images)
        return self.head(self.backbone(images))

    def forward_with_activation(self, images: Tensor) -> Tuple[Tensor, SSMOutput]:
        if not self.supports_grad_cam:
            raise ContractError("the MLP backbone has no conv activation to attribute")
        self._check_input(images)
        activation = self.backbone.activation(images)
        return activation, self.head(global_avg_pool(activation))

    def head_from_activation(self, activation: Tensor) -> SSMOutput:
        return self.head(global_avg_pool(activation))


def build_network(backbone: BackboneConfig, head: HeadConfig, ssm: SSMConfig,
                  input_shape: Sequence[int], seed: Optional[int] = 0) -> Network:
    """Backbone and head are initialized from independent child streams of `seed`."""
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or input_shape[0] != backbone.in_channels:
        raise ConfigError("backbone.in_channels",
                          f"input shape {input_shape} does not start with {backbone.in_channels} channels")
    if ssm.num_channels != backbone.feature_width:
        raise ConfigError("backbone.channels",
                          f"feature width {backbone.feature_width} differs from head width {ssm.num_channels}")

    backbone_seq, head_seq = np.random.SeedSequence(seed).spawn(2)
    backbone_rng = np.random.default_rng(backbone_seq)
    head_rng = np.random.default_rng(head_seq)

    if backbone.kind == "cnn":
        body = ReferenceCNN(backbone.in_channels, backbone.channels, rng=backbone_rng)
    else:
        body = MLPBackbone(int(np.prod(input_shape)), backbone.channels, rng=backbone_rng)

    if head.kind == "ssm":
        classifier = SSMHead(ssm, rng=head_rng)
    else:
        classifier = ParallelFCHead(ssm.num_channels, ssm.num_classes, head.num_fc, rng=head_rng)

    network = Network(body, classifier, input_shape)
    logger.info("built %s backbone + %s head: %d parameters", backbone.kind, head.kind, network.num_parameters())
    return network


def backbone_param_count(backbone: BackboneConfig, input_shape: Sequence[int]) -> int:
    """Trainable parameters of the backbone alone (the CNN count does not depend on the image size)."""
    if backbone.kind == "cnn":
        body = ReferenceCNN(backbone.in_channels, backbone.channels, rng=0)
    else:
        body = MLPBackbone(int(np.prod(input_shape)), backbone.channels, rng=0)
    return body.num_parameters()
