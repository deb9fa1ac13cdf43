"""
Evaluation beyond plain accuracy: split-wise Grad-CAM, oracle head selection,
model ensembles and the per-head gradient-mask report.

Grad-CAM for head i attributes only the head's own split of the last conv
layer, channels [(i-1)·n, i·n), even though the head itself reads the whole
prefix [0, i·n).
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage, special

from data import Batch, Dataset, NormalizationStats, normalize
from errors import ConfigError, ContractError, RangeError, ShapeError
from network import Network
from nn_layers import Module
from tensor_autodiff import Tensor, gradients, mul, no_grad, sum as tensor_sum
from training import MetricsReport, Predictions, cross_entropy, predict

logger = logging.getLogger(__name__)

ENSEMBLE_RULES = ("mean_softmax", "mean_logits")


# ═══════════════════════════════════════════════════════════════════════════════
# GRAD-CAM
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class GradCamMap:
    values: np.ndarray
    source_shape: Tuple[int, int]
    head_index: int
    channel_range: Tuple[int, int]
    target_class: int

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


def _normalize_map(cam: np.ndarray) -> np.ndarray:
    peak = cam.max()
    if peak <= 0.0:
        return np.zeros_like(cam)
    return np.clip(cam / peak, 0.0, 1.0)


def upsample_bilinear(values: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D grid."""
    rows = np.linspace(0.0, values.shape[0] - 1, size[0])
    cols = np.linspace(0.0, values.shape[1] - 1, size[1])
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(values, grid, order=1, mode="nearest")


def _check_cam_args(model: Network, target_class: int, head_index: int) -> None:
    if not model.supports_grad_cam:
        raise ContractError("Grad-CAM needs a convolutional backbone")
    if not 1 <= head_index <= model.num_heads:
        raise RangeError(f"head_index {head_index} outside [1, {model.num_heads}]")
    if not 0 <= target_class < model.num_classes:
        raise RangeError(f"target_class {target_class} outside [0, {model.num_classes})")


def grad_cam_from_activation(model: Network, activation: np.ndarray, target_class: int, head_index: int,
                             output_size: Tuple[int, int]) -> GradCamMap:
    """Grad-CAM from a given last-conv activation (1×C×h×w); the model is used in its current mode."""
    _check_cam_args(model, target_class, head_index)
    leaf = Tensor(activation, requires_grad=True)
    output = model.head_from_activation(leaf)
    logits = output.head_logits[head_index - 1]
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[:, target_class] = 1.0
    score = tensor_sum(mul(logits, Tensor(one_hot)))
    (grad,) = gradients(score, [leaf])

    lo, hi = model.channel_range(head_index)
    weights = grad[0, lo:hi].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation[0, lo:hi], axes=1), 0.0)
    cam = _normalize_map(cam)
    upsampled = _normalize_map(upsample_bilinear(cam, output_size))
    return GradCamMap(upsampled, tuple(cam.shape), head_index, (lo, hi), target_class)


def _last_activation(model: Network, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim != 3:
        raise ShapeError("grad_cam image", image.shape, model.input_shape)
    with no_grad():
        activation, _ = model.forward_with_activation(Tensor(image[None]))
    return activation.data


def grad_cam_split(model: Network, image: np.ndarray, target_class: int, head_index: int) -> GradCamMap:
    """Grad-CAM of one head for one C×H×W image, in eval mode."""
    _check_cam_args(model, target_class, head_index)
    previous = model.mode
    model.eval()
    try:
        activation = _last_activation(model, image)
        return grad_cam_from_activation(model, activation, target_class, head_index, model.input_shape[1:])
    finally:
        model.set_mode(previous)


def grad_cam_all_heads(model: Network, image: np.ndarray, target_class: int) -> List[GradCamMap]:
    _check_cam_args(model, target_class, 1)
    previous = model.mode
    model.eval()
    try:
        activation = _last_activation(model, image)
        return [grad_cam_from_activation(model, activation, target_class, i, model.input_shape[1:])
                for i in range(1, model.num_heads + 1)]
    finally:
        model.set_mode(previous)


# ═══════════════════════════════════════════════════════════════════════════════
# ORACLE AND ENSEMBLES
# ═══════════════════════════════════════════════════════════════════════════════

def oracle_accuracy(model: Module, dataset: Dataset, predictions: Optional[Predictions] = None,
                    batch_size: int = 512) -> float:
    """A sample counts as correct when any head or the averaged output predicts its label."""
    if predictions is None:
        predictions = predict(model, dataset, batch_size)
    return predictions.oracle_accuracy()


@dataclass
class EnsembleMember:
    model: Module
    name: str = ""
    stats: Optional[NormalizationStats] = None


@dataclass
class EnsembleSpec:
    members: List[EnsembleMember]
    rule: str = "mean_softmax"

    def __post_init__(self):
        self.members = [m if isinstance(m, EnsembleMember) else EnsembleMember(m, f"member{i + 1}")
                        for i, m in enumerate(self.members)]
        if len(self.members) < 2:
            raise ContractError(f"an ensemble needs at least 2 members, got {len(self.members)}")
        if self.rule not in ENSEMBLE_RULES:
            raise ConfigError("ensemble.rule", f"must be one of {ENSEMBLE_RULES}, got '{self.rule}'")
        classes = [m.model.num_classes for m in self.members]
        if len(set(classes)) != 1:
            raise ShapeError("ensemble members", *[(k,) for k in classes])


@dataclass
class EnsembleReport:
    accuracy: float
    member_accuracies: List[float]
    member_names: List[str]
    rule: str
    count: int
    member_reports: List[MetricsReport] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "ensemble_accuracy": self.accuracy,
            "rule": self.rule,
            "count": self.count,
            "members": [{"name": n, "accuracy": a} for n, a in zip(self.member_names, self.member_accuracies)],
        }


def ensemble_eval(spec: EnsembleSpec, dataset: Dataset, batch_size: int = 512) -> EnsembleReport:
    """Average the members' combined outputs (softmax or raw logits), summed in member order."""
    scores = None
    member_accuracies, member_reports = [], []
    labels = dataset.labels
    for member in spec.members:
        data = normalize(dataset, member.stats) if member.stats is not None else dataset
        predictions = predict(member.model, data, batch_size)
        if predictions.combined.shape[1] != spec.members[0].model.num_classes:
            raise ShapeError("ensemble output", predictions.combined.shape)
        combined = predictions.combined
        if spec.rule == "mean_softmax":
            combined = special.softmax(combined, axis=1)
        scores = combined.copy() if scores is None else scores + combined
        accuracy = predictions.combined_accuracy()
        member_accuracies.append(accuracy)
        member_reports.append(MetricsReport(accuracy, predictions.head_accuracies(), float("nan"),
                                            len(predictions), predictions.oracle_accuracy()))
        logger.info("ensemble member %s: accuracy %.4f", member.name, accuracy)

    scores = scores / len(spec.members)
    accuracy = float((scores.argmax(axis=1) == labels).mean())
    return EnsembleReport(accuracy, member_accuracies, [m.name for m in spec.members], spec.rule,
                          len(labels), member_reports)


# ═══════════════════════════════════════════════════════════════════════════════
# GRADIENT MASK REPORT
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class GradientMaskReport:
    block_norms: List[List[float]]    # [head][block], L2 norm of the feature gradient
    gradients: List[np.ndarray]       # per head, B×C
    block_width: int

    @property
    def num_heads(self) -> int:
        return len(self.block_norms)

    @property
    def summed(self) -> List[float]:
        return [float(v) for v in np.sum(np.asarray(self.block_norms), axis=0)]

    def leaked_channels(self, head_index: int) -> np.ndarray:
        """Channels >= head_index·n whose gradient is not exactly zero (should be empty)."""
        grad = self.gradients[head_index - 1]
        tail = grad[:, head_index * self.block_width:]
        return np.unique(np.nonzero(tail != 0.0)[1]) + head_index * self.block_width


def gradient_mask_report(model: Module, batch: Batch, mode: str = "train") -> GradientMaskReport:
    """
    Back-propagate each head's own loss alone down to the feature vector and
    report the gradient norm per channel block.

    `model` is a Network (features come from its backbone) or a bare head
    (the batch images are the features). BN running statistics are restored.
    """
    head = model.head if isinstance(model, Network) else model
    channels, heads = head.num_channels, head.num_heads
    if channels % heads:
        raise ContractError(f"{channels} channels do not split into {heads} equal blocks")
    width = channels // heads

    saved = {name: t.data.copy() for name, t in model.named_buffers()}
    previous = model.mode
    model.set_mode(mode)
    try:
        if isinstance(model, Network):
            with no_grad():
                features = model.backbone(batch.images).data
        else:
            features = batch.images.data
        leaf = Tensor(features, requires_grad=True)
        output = head(leaf)
        grads, norms = [], []
        for i in range(heads):
            (grad,) = gradients(cross_entropy(output.head_logits[i], batch.labels), [leaf])
            grads.append(grad)
            norms.append([float(np.linalg.norm(grad[:, k * width:(k + 1) * width])) for k in range(heads)])
    finally:
        model.set_mode(previous)
        for name, t in model.named_buffers():
            t.data[...] = saved[name]
    return GradientMaskReport(norms, grads, width)


# ═══════════════════════════════════════════════════════════════════════════════
# PGM EXPORT
# ═══════════════════════════════════════════════════════════════════════════════

def image_to_unit(image: np.ndarray, stats: Optional[NormalizationStats] = None) -> np.ndarray:
    """First channel of a C×H×W image mapped to [0, 1] for export."""
    plane = np.asarray(image, dtype=np.float64)[0]
    if stats is not None:
        return np.clip(plane * stats.std[0] + stats.mean[0], 0.0, 1.0)
    lo, hi = plane.min(), plane.max()
    return np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)


def write_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    """8-bit binary PGM (P5); values in [0, 1] are scaled by 255 and rounded."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError("write_pgm", values.shape)
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    os.replace(tmp, path)


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ContractError(f"{path}: not an 8-bit P5 file")
    width, height = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos + 1)
    return data.reshape(height, width).copy()
