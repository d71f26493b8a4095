"""Class-balanced cross-entropy and the joint side + fusion objective."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, mul, weighted_logistic_loss


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LabelMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.isin(v, (0, 1)).all():
            raise LabelError("label map values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def num_pos(self) -> int:
        return int(self.values.sum())

    @property
    def num_neg(self) -> int:
        return int(self.values.size - self.values.sum())

    @property
    def beta(self) -> float:
        """Fraction of non-edge pixels; weights the edge term."""
        return self.num_neg / self.values.size

    @property
    def beta_exact(self) -> Fraction:
        """``beta`` as an exact rational; the float above is its rounding."""
        return Fraction(self.num_neg, self.values.size)


def as_label_map(labels) -> LabelMap:
    return labels if isinstance(labels, LabelMap) else LabelMap(np.asarray(labels))


def balanced_bce(activations: Tensor, labels, balanced: bool = True) -> Tensor:
    """Summed cross-entropy with edge pixels weighted by beta, non-edge by 1 - beta."""
    lab = as_label_map(labels)
    a_shape = activations.shape[-2:]
    if a_shape != lab.shape or activations.data.size != lab.values.size:
        raise LabelError(f"activation shape {activations.shape} does not match labels {lab.shape}")
    y = lab.values.reshape(activations.shape).astype(np.float64)
    beta = lab.beta if balanced else 0.5
    # unbalanced cross-entropy is the beta = 1/2 case scaled by 2
    scale = 1.0 if balanced else 2.0
    return weighted_logistic_loss(activations, scale * beta * y, scale * (1.0 - beta) * (1.0 - y))


def closed_form_at_half(labels) -> float:
    """Loss of an all-zero activation map: log 2 * 2|Y+||Y-|/|Y|."""
    lab = as_label_map(labels)
    return float(np.log(2.0) * 2.0 * lab.num_pos * lab.num_neg / lab.values.size)


@dataclass
class LossReport:
    sides: list
    fuse: float
    total: float
    alphas: tuple
    deep_supervision: bool = True

    def as_row(self) -> list:
        return list(self.sides) + [self.fuse, self.total]


def side_objective(side_activations: Sequence[Tensor], labels, alphas: Sequence[float]):
    """Weighted sum of per-side balanced losses, each against the full-resolution labels.

    Returns ``(weighted_total, per_side_losses)``. Sides with zero weight contribute
    neither value nor gradient.
    """
    if len(side_activations) != len(alphas):
        raise ValueError(f"{len(side_activations)} side outputs but {len(alphas)} loss weights")
    lab = as_label_map(labels)
    per_side = [balanced_bce(a, lab) for a in side_activations]
    total = None
    for loss, alpha in zip(per_side, alphas):
        if alpha == 0.0:
            continue
        term = mul(loss, float(alpha))
        total = term if total is None else add(total, term)
    if total is None:
        total = Tensor(0.0)
    return total, per_side


def fuse_objective(fused_activation: Tensor, labels, balanced: bool = True) -> Tensor:
    return balanced_bce(fused_activation, labels, balanced=balanced)


def total_objective(side_activations, fused_activation, labels, alphas, deep_supervision: bool = True, balanced_fuse: bool = True):
    """Joint objective; without deep supervision only the fusion loss is optimized.

    Returns ``(loss_tensor, LossReport)``. Side losses are always reported.
    """
    lab = as_label_map(labels)
    side_total, per_side = side_objective(side_activations, lab, alphas)
    fuse = fuse_objective(fused_activation, lab, balanced=balanced_fuse)
    total = add(side_total, fuse) if deep_supervision else fuse
    report = LossReport(
        sides=[float(s.data) for s in per_side],
        fuse=float(fuse.data),
        total=float(total.data),
        alphas=tuple(alphas),
        deep_supervision=deep_supervision,
    )
    return total, report
