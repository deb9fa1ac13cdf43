"""Stub models whose outputs are fixed per sample, for oracle/ensemble/evaluate tests."""

from typing import Optional

import numpy as np

from data import Dataset
from nn_layers import Module
from ssm_head import SSMOutput, average_logits
from tensor_autodiff import Tensor


def index_dataset(labels, num_classes: int) -> Dataset:
    """Images are 1×1×1 and hold their own sample index."""
    labels = np.asarray(labels, dtype=np.int64)
    images = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1)
    return Dataset(images, labels, num_classes, split="test")


class FixedLogitsModel(Module):
    def __init__(self, head_logits: np.ndarray, combined: Optional[np.ndarray] = None):
        super().__init__()
        self.head_logits = np.asarray(head_logits, dtype=np.float64)
        self.combined = None if combined is None else np.asarray(combined, dtype=np.float64)

    @property
    def num_heads(self) -> int:
        return self.head_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_logits.shape[2]

    def forward(self, images: Tensor) -> SSMOutput:
        rows = images.data[:, 0, 0, 0].astype(np.int64)
        heads = [Tensor(h[rows]) for h in self.head_logits]
        combined = average_logits(heads) if self.combined is None else Tensor(self.combined[rows])
        return SSMOutput(heads, combined)
