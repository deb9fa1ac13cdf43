"""
Losses, momentum SGD, the step learning-rate schedule, evaluation, and the
epoch loop.

Both loss schemes are supported: `joint` puts the loss on the averaged output
only, `individual` averages one cross-entropy per head. Evaluation always
scores the averaged output alongside every head.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from data import Batch, Dataset, augment, batch_indices, make_batch
from errors import ConfigError, ContractError, EmptyDatasetError, RangeError, ShapeError
from nn_layers import Module
from ssm_head import SCHEMES, SSMOutput
from tensor_autodiff import Tensor, add, backward, no_grad, record, scale

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.05
    batch_size: int = 128
    epochs: int = 15
    milestones: Tuple[int, ...] = (8, 12)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0001
    scheme: str = "joint"
    seed: int = 0
    augment_pad: int = 2
    flip_prob: float = 0.0
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr", f"must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            raise ConfigError("train.eval_batch_size", f"must be >= 1, got {self.eval_batch_size}")
        if self.epochs < 0:
            raise ConfigError("train.epochs", f"must be >= 0, got {self.epochs}")
        milestones = list(self.milestones)
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ConfigError("train.milestones", f"must be strictly increasing, got {milestones}")
        if any(m < 0 or m >= self.epochs for m in milestones):
            raise ConfigError("train.milestones", f"every milestone must lie in [0, {self.epochs}), got {milestones}")
        if self.lr_decay <= 0:
            raise ConfigError("train.lr_decay", f"must be positive, got {self.lr_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum", f"must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.scheme not in SCHEMES:
            raise ConfigError("train.scheme", f"must be one of {SCHEMES}, got '{self.scheme}'")
        if self.augment_pad < 0:
            raise ConfigError("train.augment_pad", f"must be >= 0, got {self.augment_pad}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("train.flip_prob", f"must lie in [0, 1], got {self.flip_prob}")
        if self.seed < 0:
            raise ConfigError("train.seed", f"must be >= 0, got {self.seed}")


@dataclass
class SGDState:
    """Velocity buffer per parameter name; missing entries start at zero."""
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{name}": v.copy() for name, v in self.velocities.items()}

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray]) -> "SGDState":
        prefix = "velocity."
        return cls({k[len(prefix):]: np.array(v) for k, v in state.items() if k.startswith(prefix)})


# ═══════════════════════════════════════════════════════════════════════════════
# LOSSES
# ═══════════════════════════════════════════════════════════════════════════════

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    batch, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise RangeError(f"cross_entropy: labels must lie in [0, {classes}), "
                         f"found [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp_shifted = np.exp(shifted)
    total = exp_shifted.sum(axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = np.mean(np.log(total[:, 0]) - shifted[rows, labels])

    def rule(g):
        grad = exp_shifted / total
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def ssm_loss(output: SSMOutput, labels: np.ndarray, scheme: str = "joint") -> Tensor:
    if scheme == "joint":
        return cross_entropy(output.combined, labels)
    if scheme != "individual":
        raise ConfigError("train.scheme", f"must be one of {SCHEMES}, got '{scheme}'")
    total = cross_entropy(output.head_logits[0], labels)
    for logits in output.head_logits[1:]:
        total = add(total, cross_entropy(logits, labels))
    return scale(total, 1.0 / output.num_heads)


# ═══════════════════════════════════════════════════════════════════════════════
# OPTIMIZER AND SCHEDULE
# ═══════════════════════════════════════════════════════════════════════════════

def sgd_step(params: Iterable[Tuple[str, Tensor]], state: SGDState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """
    v ← momentum·v + grad + weight_decay·param;  param ← param − lr·v

    Only the given trainable parameters are touched, so BN running statistics
    never see weight decay. Gradients are cleared afterwards.
    """
    params = list(params)
    missing = [name for name, p in params if p.grad is None]
    if missing:
        raise ContractError(f"sgd_step: no gradient for {missing}")

    for name, p in params:
        velocity = state.velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(p.data)
        velocity = momentum * velocity + p.grad + weight_decay * p.data
        p.data -= (lr * velocity).astype(p.dtype, copy=False)
        state.velocities[name] = velocity
        p.grad = None


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base_lr times lr_decay once per milestone already reached."""
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.base_lr * config.lr_decay ** passed


# ═══════════════════════════════════════════════════════════════════════════════
# EVALUATION
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class Predictions:
    head_logits: np.ndarray  # H×N×K
    combined: np.ndarray     # N×K
    labels: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.head_logits.shape[0]

    def __len__(self) -> int:
        return len(self.labels)

    def head_correct(self) -> np.ndarray:
        """H×N boolean; argmax ties resolve to the lowest class index."""
        return self.head_logits.argmax(axis=2) == self.labels[None]

    def combined_correct(self) -> np.ndarray:
        return self.combined.argmax(axis=1) == self.labels

    def head_accuracies(self) -> List[float]:
        return [float(v) for v in self.head_correct().mean(axis=1)]

    def combined_accuracy(self) -> float:
        return float(self.combined_correct().mean())

    def oracle_accuracy(self) -> float:
        """Fraction of samples that any head or the averaged output gets right."""
        any_correct = self.head_correct().any(axis=0) | self.combined_correct()
        return float(any_correct.mean())


@dataclass
class MetricsReport:
    combined_accuracy: float
    head_accuracies: List[float]
    loss: float
    count: int
    oracle_accuracy: Optional[float] = None

    def to_record(self) -> dict:
        record_ = {
            "combined_accuracy": self.combined_accuracy,
            "head_accuracies": list(self.head_accuracies),
            "loss": self.loss,
            "count": self.count,
        }
        if self.oracle_accuracy is not None:
            record_["oracle_accuracy"] = self.oracle_accuracy
        return record_


def predict(model: Module, dataset: Dataset, batch_size: int = 512, progress: bool = False) -> Predictions:
    """One eval-mode pass over `dataset`; the model's previous mode is restored."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    previous = model.mode
    model.eval()
    heads, combined = [], []
    try:
        with no_grad():
            chunks = batch_indices(len(dataset), batch_size)
            for indices in tqdm(chunks, desc="eval", leave=False, disable=not progress):
                out = model(make_batch(dataset, indices).images)
                heads.append(np.stack([h.data for h in out.head_logits]))
                combined.append(out.combined.data)
    finally:
        model.set_mode(previous)
    return Predictions(np.concatenate(heads, axis=1), np.concatenate(combined), dataset.labels.copy())


def evaluate(model: Module, dataset: Dataset, batch_size: int = 512, scheme: str = "joint",
             predictions: Optional[Predictions] = None, progress: bool = False) -> MetricsReport:
    """Top-1 accuracy of the averaged output and of every head, from a single pass."""
    if predictions is None:
        predictions = predict(model, dataset, batch_size, progress)
    with no_grad():
        output = SSMOutput([Tensor(h) for h in predictions.head_logits], Tensor(predictions.combined))
        loss = ssm_loss(output, predictions.labels, scheme).item()
    return MetricsReport(
        combined_accuracy=predictions.combined_accuracy(),
        head_accuracies=predictions.head_accuracies(),
        loss=loss,
        count=len(predictions),
        oracle_accuracy=predictions.oracle_accuracy(),
    )


# ═══════════════════════════════════════════════════════════════════════════════
# TRAINING LOOP
# ═══════════════════════════════════════════════════════════════════════════════

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    batches: int
    seconds: float
    eval: Optional[MetricsReport] = None

    def to_record(self) -> dict:
        record_ = {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "batches": self.batches,
        }
        if self.eval is not None:
            record_["eval"] = self.eval.to_record()
        return record_


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


EpochCallback = Callable[[EpochRecord, SGDState], None]


def _prepare_batch(dataset: Dataset, indices: np.ndarray, config: TrainConfig, epoch: int, index: int) -> Batch:
    rng = np.random.default_rng([config.seed, epoch, index])
    return augment(make_batch(dataset, indices), config.augment_pad, config.flip_prob, rng)


def _epoch_batches(dataset: Dataset, index_sets: Sequence[np.ndarray], config: TrainConfig, epoch: int,
                   parallel: bool, n_jobs: Optional[int]):
    if not parallel:
        for i, indices in enumerate(index_sets):
            yield _prepare_batch(dataset, indices, config, epoch, i)
        return
    jobs = n_jobs or 2
    chunk = max(1, 4 * jobs)
    with Parallel(n_jobs=jobs, backend="threading") as pool:
        for start in range(0, len(index_sets), chunk):
            yield from pool(delayed(_prepare_batch)(dataset, index_sets[i], config, epoch, i)
                            for i in range(start, min(start + chunk, len(index_sets))))


def fit(model: Module, dataset: Dataset, config: TrainConfig, eval_dataset: Optional[Dataset] = None,
        start_epoch: int = 0, state: Optional[SGDState] = None, on_epoch_end: Optional[EpochCallback] = None,
        parallel_data: bool = False, n_jobs: Optional[int] = None, progress: bool = False) -> TrainingLog:
    """
    Train for epochs [start_epoch, config.epochs).

    Epoch e shuffles with the generator seeded by (seed, e) and augments batch b
    with (seed, e, b), so resuming at an epoch boundary with the saved
    parameters and SGDState reproduces an uninterrupted run exactly. Training
    batches smaller than 2 are dropped.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    state = state if state is not None else SGDState()
    named = list(model.named_parameters())
    model.zero_grad()
    log = TrainingLog()

    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, config)
        model.train()
        index_sets = batch_indices(len(dataset), config.batch_size, shuffle=True,
                                   seed=[config.seed, epoch], min_size=2)
        if not index_sets:
            raise EmptyDatasetError(f"no training batch of at least 2 samples ({len(dataset)} samples)")

        loss_sum, correct, seen = 0.0, 0, 0
        bar = tqdm(total=len(index_sets), desc=f"epoch {epoch + 1}/{config.epochs}", leave=False,
                   disable=not progress)
        for batch in _epoch_batches(dataset, index_sets, config, epoch, parallel_data, n_jobs):
            output = model(batch.images)
            loss = ssm_loss(output, batch.labels, config.scheme)
            backward(loss)
            sgd_step(named, state, lr, config.momentum, config.weight_decay)

            size = len(batch)
            loss_sum += loss.item() * size
            correct += int((output.combined.data.argmax(axis=1) == batch.labels).sum())
            seen += size
            bar.update(1)
            bar.set_postfix(loss=f"{loss.item():.4f}")
            logger.debug("epoch %d batch of %d: loss %.6f", epoch, size, loss.item())
        bar.close()

        report = None
        if eval_dataset is not None:
            report = evaluate(model, eval_dataset, config.eval_batch_size, config.scheme)
        record_ = EpochRecord(epoch, lr, loss_sum / seen, correct / seen, len(index_sets),
                              time.perf_counter() - started, report)
        log.records.append(record_)
        logger.info("epoch %d/%d lr=%.5g loss=%.4f train_acc=%.4f%s", epoch + 1, config.epochs, lr,
                    record_.train_loss, record_.train_accuracy,
                    f" eval_acc={report.combined_accuracy:.4f}" if report else "")
        if on_epoch_end is not None:
            on_epoch_end(record_, state)
    return log
