"""Hybrid incremental loss: seen-class cross-entropy plus weighted distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ControllerConfig:
    gamma: float = 2.5
    temperature: float = 2.0
    first_switch: int | None = None  # S_0; None until the first switch happens

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_seen(logits: Tensor, targets: np.ndarray, k: int, U: int) -> Tensor:
    """Mean cross-entropy with the softmax restricted to the first k*U classes.

    ``targets`` is either an (n, C) one-hot matrix or an (n,) label vector.
    """
    seen = k * U
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.size and (targets.min() < 0 or targets.max() >= seen):
            raise ValueError(f"labels must lie in the {seen} seen classes")
        t = one_hot(targets, seen)
    else:
        if targets[:, seen:].any():
            raise ValueError(f"one-hot targets must lie in the {seen} seen classes")
        t = targets[:, :seen]
    n = logits.shape[0]
    logp = ad.log_softmax(_head(logits, seen))
    return ad.scale(ad.total(ad.mul_const(logp, t)), -1.0 / n)


def distillation_kl(logits: Tensor, prev_logits: np.ndarray, k: int, U: int, temperature: float) -> Tensor:
    """Mean KL(softmax(q'/T) || softmax(q/T)) over the (k-1)*U old classes.

    Returns a constant zero for k == 1 since there are no old classes.
    """
    if k <= 1:
        return Tensor(0.0)
    old = (k - 1) * U
    prev = np.asarray(prev_logits.data if isinstance(prev_logits, Tensor) else prev_logits)[:, :old]
    log_target = ad.log_softmax_np(prev, temperature)
    n = logits.shape[0]
    logp = ad.log_softmax(_head(logits, old), temperature)
    # identical logits give log_target - logp == 0 elementwise, hence exactly 0
    gap = ad.add(Tensor(log_target), ad.scale(logp, -1.0))
    return ad.scale(ad.total(ad.mul_const(gap, np.exp(log_target))), 1.0 / n)


def controller_phi(k: int, cfg: ControllerConfig) -> float:
    """Distillation weight: 1 up to the first switch task, then grows linearly by gamma."""
    if k < 1:
        raise ValueError("task index starts at 1")
    s0 = cfg.first_switch
    if s0 is None or k <= s0:
        return 1.0
    return (k - s0) * cfg.gamma


def total_loss(ce: Tensor, dist: Tensor, phi: float) -> Tensor:
    if phi == 0 or (not dist.requires_grad and float(dist.data) == 0.0):
        return ce
    return ce + ad.scale(dist, phi)


def _head(logits: Tensor, cols: int) -> Tensor:
    return logits if cols == logits.shape[1] else ad.slice_cols(logits, cols)
