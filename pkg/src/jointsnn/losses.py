"""Branch-wise cross-entropy, KL and L2 distillation losses.

All three losses sum one term per branch exit; inside a term the batch is
reduced by its mean. The ANN side of the KL and L2 terms is detached, so
those terms never push gradient into the ANN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError


@dataclass
class BranchOutputs:
    """Per-exit logits of both networks, shallowest exit first."""

    ann_logits: list[Tensor]
    snn_logits: list[Tensor]
    stages: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ann_logits) != len(self.snn_logits):
            raise DimensionError(
                f"{len(self.ann_logits)} ANN exits but {len(self.snn_logits)} SNN exits"
            )
        for i, (a, s) in enumerate(zip(self.ann_logits, self.snn_logits)):
            if a.shape != s.shape:
                raise DimensionError(f"branch {i + 1}: ANN logits {a.shape} vs SNN logits {s.shape}")
        if not self.stages:
            self.stages = list(range(1, len(self.ann_logits) + 1))

    def __len__(self):
        return len(self.ann_logits)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.3

    def __post_init__(self):
        for name, value in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise DataError(f"label {int(bad)} outside [0, {classes})")
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    n, classes = logits.shape
    target = Tensor(one_hot(labels, classes))
    return ad.mul_scalar(ad.sum(ad.mul(ad.log_softmax(logits), target)), -1.0 / n)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def ce_loss(branches: BranchOutputs, labels: np.ndarray, ann: bool = True, snn: bool = True,
            exits: Optional[Sequence[int]] = None) -> Tensor:
    """Sum of per-exit cross-entropies over the ANN and SNN exits.

    ``ann``/``snn`` mask whole sides; ``exits`` restricts to a subset of
    exit indices (0-based). With everything enabled this is 2 x #exits terms.
    """
    idx = range(len(branches)) if exits is None else exits
    terms = []
    if ann:
        terms += [cross_entropy(branches.ann_logits[i], labels) for i in idx]
    if snn:
        terms += [cross_entropy(branches.snn_logits[i], labels) for i in idx]
    if not terms:
        return Tensor(0.0)
    return _sum(terms)


def kl_divergence(teacher_logits: Tensor, student_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax(teacher) || softmax(student)), teacher detached."""
    t = ad.detach(teacher_logits).data
    p = ad.softmax_array(t)
    log_p = ad.log_softmax_array(t)
    # p * log p is 0 where p underflows to 0
    entropy_term = float(np.sum(np.where(p > 0, p * log_p, 0.0)))
    n = student_logits.shape[0]
    cross = ad.sum(ad.mul(ad.log_softmax(student_logits), Tensor(p)))
    return ad.mul_scalar(ad.add(Tensor(entropy_term), ad.mul_scalar(cross, -1.0)), 1.0 / n)


def kld_loss(branches: BranchOutputs, exits: Optional[Sequence[int]] = None) -> Tensor:
    idx = range(len(branches)) if exits is None else exits
    return _sum([kl_divergence(branches.ann_logits[i], branches.snn_logits[i]) for i in idx])


def squared_distance(teacher: Tensor, student: Tensor) -> Tensor:
    """Batch-mean squared Frobenius distance, teacher detached."""
    if teacher.shape != student.shape:
        raise DimensionError(f"norm loss: feature shapes {teacher.shape} and {student.shape} differ")
    diff = ad.sub(ad.detach(teacher), student)
    return ad.mul_scalar(ad.sum(ad.mul(diff, diff)), 1.0 / student.shape[0])


def norm_loss(ann_feats: Sequence[Tensor], snn_feats: Sequence[Tensor],
              exits: Optional[Sequence[int]] = None) -> Tensor:
    if len(ann_feats) != len(snn_feats):
        raise DimensionError(f"{len(ann_feats)} ANN feature tensors but {len(snn_feats)} SNN ones")
    idx = range(len(ann_feats)) if exits is None else exits
    return _sum([squared_distance(ann_feats[i], snn_feats[i]) for i in idx])


def total_loss(ce: Tensor, kld: Tensor, norm: Tensor, w: LossWeights) -> Tensor:
    return ad.add(ad.add(ce, ad.mul_scalar(kld, w.lambda1)), ad.mul_scalar(norm, w.lambda2))
