"""
task.py
Pluggable task loss and the plain gradient step used by the baseline modes
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from engine.ops import cross_entropy
from engine.tensor import Tensor, backward
from models.backbone import MultimodalModel
from utils.errors import ShapeError


@dataclass
class Batch:
    """Paired inputs, one [N, C, H, W] array per modality, and class labels"""
    xs: List[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        sizes = {x.shape[0] for x in self.xs} | {len(self.labels)}
        if len(sizes) > 1:
            raise ShapeError(
                f"batch size mismatch: inputs {[x.shape for x in self.xs]}, labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return len(self.labels)


LossFn = Callable[[MultimodalModel, Batch], Tuple[Tensor, Tensor]]


def classification_loss(model: MultimodalModel, batch: Batch) -> Tuple[Tensor, Tensor]:
    """Cross-entropy of the fused logits; returns (loss, logits)"""
    logits = model.forward_fused([Tensor(x) for x in batch.xs])
    return cross_entropy(logits, batch.labels), logits


def shared_parameters(model: MultimodalModel) -> Dict[str, Tensor]:
    """Every parameter that is not part of an adaptor (shared kernels, biases, head)"""
    adaptor_ids = {
        id(t) for _, adaptor in model.adaptor_entries() for t in adaptor.parameters().values()
    }
    return {name: t for name, t in model.parameters().items() if id(t) not in adaptor_ids}


def gradient_step(model: MultimodalModel, batch: Batch, optimizer, loss_fn: LossFn = classification_loss):
    """
    One forward/backward/update over every parameter.

    Returns:
        (loss value, logits array)
    """
    model.zero_grad()
    loss, logits = loss_fn(model, batch)
    backward(loss)
    for name, p in model.parameters().items():
        p.data = optimizer.update(name, p.data, p.grad)
    return loss.item(), logits.data
