"""Distillation objectives: CE, temperature soft-CE, PKD and the gradient
alignment losses, plus the combined objectives used for training.

Sums over examples are divided by the batch size so magnitudes do not
depend on how the data is batched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    tau: float = 10.0
    beta: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


@dataclass(frozen=True)
class SkipMap:
    student_layers: tuple[int, ...]
    teacher_layers: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.student_layers)

    def __post_init__(self):
        if len(self.student_layers) != len(self.teacher_layers):
            raise ValueError("skip map lists differ in length")
        for seq in (self.student_layers, self.teacher_layers):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise ValueError("skip map entries must be strictly increasing")


def build_skip_map(student_depth: int, teacher_depth: int) -> SkipMap:
    """Student layer j aligns with teacher layer 2j; the final student layer is skipped."""
    if student_depth < 1 or teacher_depth != 2 * student_depth:
        raise ValueError(
            f"skip mapping is defined only for a 2:1 depth ratio, got "
            f"student={student_depth}, teacher={teacher_depth}"
        )
    s = tuple(range(1, student_depth))
    return SkipMap(s, tuple(2 * j for j in s))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum_(ad.mul(probs, onehot), axis=-1)
    return ad.mul(ad.mean(ad.log(picked)), -1.0)


def log_softmax(z: Tensor) -> Tensor:
    shift = z - np.max(z.data, axis=-1, keepdims=True)
    return shift - ad.log(ad.sum_(ad.exp(shift), axis=-1, keepdims=True))


def soft_ce(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """tau^2 * mean KL(softmax(t/tau) || softmax(s/tau)); the teacher is a constant."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    t = np.asarray(ad.as_tensor(teacher_logits).data) / tau
    student_logits = ad.as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ad.ShapeError(f"soft_ce: shapes {t.shape} and {student_logits.shape} differ")
    t = t - t.max(axis=-1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = log_softmax(ad.mul(student_logits, 1.0 / tau))
    kl = ad.sum_(ad.mul(ad.sub(log_pt, log_ps), pt), axis=-1)
    return ad.mul(ad.mean(kl), tau * tau)


def _normalized_sq_diff(u, v) -> Tensor:
    """||u/|u| - v/|v|||^2 over the last axis, epsilon-guarded norms."""
    u, v = ad.as_tensor(u), ad.as_tensor(v)
    if u.shape != v.shape:
        raise ad.ShapeError(f"shapes {u.shape} and {v.shape} differ")
    du = ad.divide(u, ad.l2norm(u))
    dv = ad.divide(v, ad.l2norm(v))
    return ad.sum_(ad.square(du - dv), axis=-1)


def gkd_loss(student_grads, teacher_grads, lengths) -> Tensor:
    """Normalized-gradient MSE over real token positions, per example averaged."""
    per_tok = _normalized_sq_diff(student_grads, teacher_grads)
    b, t = per_tok.shape
    lengths = np.asarray(lengths)
    if lengths.shape != (b,):
        raise ad.ShapeError(f"lengths shape {lengths.shape} does not match batch of {b}")
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
    return ad.mul(ad.sum_(ad.mul(per_tok, mask)), 1.0 / b)


def _layerwise(student: Sequence, teacher: Sequence, skip: SkipMap) -> Tensor:
    if len(student) != skip.m or len(teacher) != skip.m:
        raise ValueError(
            f"expected {skip.m} aligned layers, got student={len(student)}, teacher={len(teacher)}"
        )
    if skip.m == 0:
        return Tensor(0.0)
    total = None
    for s, t in zip(student, teacher):
        term = ad.sum_(_normalized_sq_diff(s, t))
        total = term if total is None else total + term
    return ad.mul(total, 1.0 / ad.as_tensor(student[0]).shape[0])


def pkd_loss(student_cls: Sequence, teacher_cls: Sequence, skip: SkipMap) -> Tensor:
    return _layerwise(student_cls, teacher_cls, skip)


def gkd_cls_loss(student_cls_grads: Sequence, teacher_cls_grads: Sequence, skip: SkipMap) -> Tensor:
    return _layerwise(student_cls_grads, teacher_cls_grads, skip)


def combined_gkd(ce, soft, gkd, w: LossWeights):
    beta = w.beta if w.beta is not None else 0.0
    return (1.0 - w.alpha) * ce + w.alpha * soft + beta * gkd


def combined_gkd_cls(ce, soft, pkd, gkd, gkd_cls, w: LossWeights):
    beta = w.beta if w.beta is not None else 0.0
    gamma = w.gamma if w.gamma is not None else 0.0
    return (1.0 - w.alpha) * ce + w.alpha * soft + beta * pkd + gamma * (gkd + gkd_cls)
