"""Diagonal Fisher information over the exemplars and the saturation coefficient.

The Fisher diagonal of one example is the squared gradient of its
log-likelihood. Exemplar Fisher values are folded with an element-wise max,
not averaged, and saturation compares the mean Fisher trace of the tensors
at the end of the trainable path with those at its start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import kernels
from .model import CLASSIFIER_NAMES, Network, forward, module_names
from .objective import one_hot
from .paths import Path


@dataclass
class FisherAccumulator:
    values: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0

    @classmethod
    def for_params(cls, net: Network, names: Iterable[str]) -> "FisherAccumulator":
        return cls({n: np.zeros_like(net.params[n].data) for n in names})

    def trace(self, name: str) -> float:
        return float(self.values[name].sum())

    def scaled(self, c: float) -> "FisherAccumulator":
        return FisherAccumulator({n: v * c for n, v in self.values.items()}, self.count)


@dataclass
class LayerSets:
    el: list[str]
    fl: list[str]

    def __post_init__(self):
        if set(self.el) & set(self.fl):
            raise ValueError("early and final layer sets must be disjoint")

    @property
    def names(self) -> list[str]:
        return self.el + self.fl


def layer_sets(net: Network, train_path: Path) -> LayerSets:
    """Parameter tensors at the start and end of the trainable path.

    The early set is the unfrozen block(s) of the first layer that has any
    on ``train_path``; the final set is the unfrozen block(s) of the last such
    layer plus the classifier. With a single trainable layer the final set is
    the classifier alone. A fully frozen path leaves the early set empty.
    """
    trainable_layers = []
    for layer in range(net.cfg.L):
        names = [
            n
            for m in train_path.active(layer)
            if not net.frozen[layer, m]
            for n in module_names(layer, m)
        ]
        if names:
            trainable_layers.append(names)
    el = trainable_layers[0] if trainable_layers else []
    fl = (trainable_layers[-1] if len(trainable_layers) > 1 else []) + list(CLASSIFIER_NAMES)
    return LayerSets(el, fl)


def fisher_diagonal(net: Network, path: Path, x: np.ndarray, label: int, k: int, U: int,
                    names: Iterable[str]) -> dict[str, np.ndarray]:
    """Squared log-likelihood gradient of one example for the named parameters.

    Frozen parameters are skipped. The likelihood is the softmax over the
    classes seen up to task ``k``.
    """
    names = [n for n in names if not net.params[n].frozen]
    saved = {p.name: p.requires_grad for p in net.params}
    try:
        for p in net.params:
            p.set_trainable(p.name in names)
            p.grad[...] = 0.0
        logits = forward(net, path, np.asarray(x, dtype=float).reshape(1, -1))
        logp = ad.log_softmax(_seen(logits, k * U))
        ad.backward(ad.total(ad.mul_const(logp, one_hot([label], k * U))))
        return {n: net.params[n].grad ** 2 for n in names}
    finally:
        _restore(net, saved)


def fold_max(acc: FisherAccumulator, f: dict[str, np.ndarray], count: int = 1) -> None:
    for name, v in f.items():
        cur = acc.values.get(name)
        if cur is None:
            acc.values[name] = np.array(v, dtype=float, copy=True)
        else:
            if cur.shape != v.shape:
                raise ValueError(f"shape mismatch for {name}: {cur.shape} vs {v.shape}")
            np.maximum(cur, v, out=cur)
    acc.count += count


def exemplar_fisher(net: Network, path: Path, x: np.ndarray, y: np.ndarray, k: int, U: int,
                    sets: LayerSets, batch_size: int = 256) -> FisherAccumulator:
    """Element-wise max of per-example Fisher diagonals over a whole example set.

    One batched backward pass per chunk; per-example gradients of an affine
    weight are outer(input_i, delta_i), folded by the compiled kernel.
    """
    names = [n for n in sets.names if not net.params[n].frozen]
    acc = FisherAccumulator.for_params(net, names)
    weights = {n for n in names if net.params[n].data.ndim == 2}
    saved = {p.name: p.requires_grad for p in net.params}
    try:
        for p in net.params:
            p.set_trainable(p.name in names)
        seen = k * U
        for s in range(0, len(x), batch_size):
            xb, yb = x[s : s + batch_size], y[s : s + batch_size]
            logits = forward(net, path, xb)
            logp = ad.log_softmax(_seen(logits, seen))
            order = ad.backward(ad.total(ad.mul_const(logp, one_hot(yb, seen))), retain=True)
            for node in order:
                if node.op != "affine":
                    continue
                w = node._parents[1]
                if not isinstance(w, ad.Param) or w.name not in weights:
                    continue
                kernels.outer_sq_max(node._parents[0].data, node.grad, acc.values[w.name])
                if len(node._parents) == 3 and node._parents[2].name in acc.values:
                    kernels.sq_max(node.grad, acc.values[node._parents[2].name])
            for n in names:
                net.params[n].grad[...] = 0.0
            acc.count += len(xb)
    finally:
        _restore(net, saved)
    return acc


@dataclass
class Saturation:
    mu: float | None  # None when the early-layer mass is zero or the set is empty
    fl_mass: float
    el_mass: float


def saturation_coefficient(acc: FisherAccumulator, sets: LayerSets) -> Saturation:
    """log of (mean trace over the final set) / (mean trace over the early set)."""
    fl = [n for n in sets.fl if n in acc.values]
    el = [n for n in sets.el if n in acc.values]
    fl_mass = sum(acc.trace(n) for n in fl) / len(fl) if fl else 0.0
    el_mass = sum(acc.trace(n) for n in el) / len(el) if el else 0.0
    if el_mass <= 0.0:
        return Saturation(None, fl_mass, el_mass)
    if fl_mass <= 0.0:
        return Saturation(-math.inf, fl_mass, el_mass)
    return Saturation(math.log(fl_mass / el_mass), fl_mass, el_mass)


def should_switch(mu: float | None, th: float) -> bool:
    """Switch when mu >= th; an undefined coefficient switches unless th is +inf."""
    if math.isinf(th) and th > 0:
        return False
    if mu is None:
        return True
    return mu >= th


def _seen(logits: ad.Tensor, cols: int) -> ad.Tensor:
    return logits if cols == logits.shape[1] else ad.slice_cols(logits, cols)


def _restore(net: Network, saved: dict[str, bool]) -> None:
    for p in net.params:
        p.requires_grad = saved[p.name] and not p.frozen
