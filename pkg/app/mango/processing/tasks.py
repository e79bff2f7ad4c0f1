"""
tasks.py

Task heads on top of the flow output z and the joint objective
nll + weight_task * task_loss.
"""

import logging
from dataclasses import dataclass

import numpy as np

from mango.core.tensor import Parameter, Tensor, as_tensor, logsumexp, take
from mango.errors import ConfigError, DimensionError, InputError
from mango.flows.partition import ModalityLayout

logger = logging.getLogger(__name__)

TASK_KINDS = ("classification", "translation")


def pooled(z, pad_mask=None) -> Tensor:
    """Mean over the token axis, skipping pad positions. [B, n, d] -> [B, d]."""
    z = as_tensor(z)
    if pad_mask is None:
        return z.mean(axis=-2)
    keep = 1.0 - np.asarray(pad_mask, dtype=np.float64)
    counts = keep.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise InputError("every sequence needs at least one non-pad token")
    return (z * keep[..., None]).sum(axis=-2) * (1.0 / counts)


class TaskHead:
    """Linear projection of z.

    classification: pooled z -> logits over `out_dim` classes.
    translation: the A-origin rows of z -> predicted B tokens, one [d, d] map
    shared across positions.
    """

    def __init__(self, kind: str, d_model: int, out_dim: int, rng: np.random.Generator | None = None):
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {kind!r}; expected one of {TASK_KINDS}", "task.kind")
        if kind == "translation" and out_dim != d_model:
            raise DimensionError("translation head", (d_model,), (out_dim,))
        self.kind = kind
        self.d_model = d_model
        self.out_dim = out_dim
        init = np.zeros((d_model, out_dim)) if rng is None else rng.normal(0.0, 0.02, (d_model, out_dim))
        self.projection = Parameter(init, "head.projection")
        self.bias = Parameter(np.zeros(out_dim), "head.bias")

    def parameters(self) -> list[Parameter]:
        return [self.projection, self.bias]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"head/projection": self.projection.data.copy(), "head/bias": self.bias.data.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.projection.assign(state["head/projection"])
        self.bias.assign(state["head/bias"])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_model": self.d_model, "out_dim": self.out_dim}

    def __call__(self, z, layout: ModalityLayout | None = None, pad_mask=None) -> Tensor:
        z = as_tensor(z)
        if self.kind == "classification":
            return pooled(z, pad_mask) @ self.projection + self.bias
        m = layout.m if layout is not None else z.shape[-2] // 2
        return take(z, np.arange(m), axis=-2) @ self.projection + self.bias


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    one_hot = np.eye(classes)[labels.astype(np.intp)]
    picked = (logits * one_hot).sum(axis=-1)
    return (logsumexp(logits, axis=-1) - picked).mean()


def mean_squared_error(prediction, target) -> Tensor:
    prediction = as_tensor(prediction)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise DimensionError("mean_squared_error", prediction.shape, target.shape)
    diff = prediction - target
    return (diff * diff).mean()


def task_loss(head: TaskHead, z, target, layout: ModalityLayout | None = None, pad_mask=None) -> Tensor:
    """Cross-entropy (classification) or MSE to the B tokens (translation)."""
    output = head(z, layout=layout, pad_mask=pad_mask)
    if head.kind == "classification":
        return cross_entropy(output, target)
    return mean_squared_error(output, target)


def accuracy(head: TaskHead, z, labels, pad_mask=None) -> float:
    if head.kind != "classification":
        raise ConfigError("accuracy needs a classification head", "task.kind")
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    logits = head(z, pad_mask=pad_mask).data
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def task_target(head: TaskHead, batch):
    target = batch.labels if head.kind == "classification" else batch.targets
    if target is None:
        raise InputError(f"dataset has no {'labels' if head.kind == 'classification' else 'targets'} "
                         f"for a {head.kind} head")
    return target


@dataclass
class JointLoss:
    """Terms of one objective evaluation; all are scalars except z."""

    total: Tensor
    nll: Tensor
    task: Tensor | None
    z: Tensor
    log_det: Tensor


def joint_loss(model, head: TaskHead | None, batch, weight_task: float = 1.0) -> JointLoss:
    """Mean per-sample nll plus weight_task * task_loss from the same forward pass.

    With no head or weight_task == 0 the total is the nll tensor itself.
    """
    if weight_task < 0:
        raise ConfigError("must be >= 0", "train.weight_task")
    x = model.embed(batch.tokens, batch.pad_mask)
    z, log_det = model.forward(x)
    nll = model.nll_from(z, log_det).mean()
    if head is None or weight_task == 0:
        return JointLoss(total=nll, nll=nll, task=None, z=z, log_det=log_det)
    task = task_loss(head, z, task_target(head, batch), layout=batch.layout, pad_mask=batch.pad_mask)
    return JointLoss(total=nll + task * float(weight_task), nll=nll, task=task, z=z, log_det=log_det)
