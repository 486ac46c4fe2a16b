"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of operations an MLP with residual aggregation needs are
provided. A graph is recorded during a forward pass and released by
:func:`backward`; there is no persistent tape.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import kernels

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (e.g. double backward)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by the loss code
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other))


class Param(Tensor):
    """A named leaf tensor owned by a :class:`ParamStore`."""

    __slots__ = ("name", "_frozen")

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, op="param")
        self.name = name
        self._frozen = False
        self.grad = np.zeros_like(self.data)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True
        self.requires_grad = False
        self.grad[...] = 0.0

    def set_trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag) and not self._frozen


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, True, _parents=parents, _backward=backward, op=op)


# ---------------------------------------------------------------- operations


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (n, d_in) and ``w`` of shape (d_in, d_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"affine: bias shape {b.shape} does not match output width {w.shape[1]}")
    out = x.data @ w.data
    if b is not None:
        out += b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, backward, "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def add(*xs: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ValueError(f"add: shape mismatch {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return _node(out, tuple(xs), lambda g: tuple(g for _ in xs), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_rows(x: Tensor, s: np.ndarray) -> Tensor:
    """Multiply row ``i`` of ``x`` by the constant ``s[i]`` (no gradient to ``s``)."""
    s = np.asarray(s, dtype=DTYPE).reshape(-1, 1)
    if s.shape[0] != x.shape[0]:
        raise ValueError("scale_rows: one coefficient per row required")
    return _node(x.data * s, (x,), lambda g: (g * s,), "scale_rows")


def slice_cols(x: Tensor, stop: int) -> Tensor:
    n, c = x.shape
    if not 0 < stop <= c:
        raise ValueError(f"slice_cols: stop={stop} outside 1..{c}")

    def backward(g):
        full = np.zeros((n, c), dtype=DTYPE)
        full[:, :stop] = g
        return (full,)

    return _node(x.data[:, :stop].copy(), (x,), backward, "slice_cols")


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise ``log(softmax(x / temperature))``, max-shifted for stability."""
    out = log_softmax_np(x.data, temperature)
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)

    return _node(out, (x,), backward, "log_softmax")


def log_softmax_np(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(x, dtype=DTYPE) / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_np(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax_np(x, temperature))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.data.size)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=DTYPE)
    return _node(x.data * c, (x,), lambda g: (g * c,), "mul_const")


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, *, retain: bool = False) -> list[Tensor]:
    """Accumulate d(loss)/d(param) into ``Param.grad`` for trainable params.

    With ``retain=True`` intermediate nodes keep their ``grad`` and the
    topologically ordered node list is returned; otherwise the graph is
    released.
    """
    if loss.data.size != 1:
        raise GraphError("backward needs a scalar loss")
    if loss._backward is None:
        raise GraphError("loss has no recorded graph (no trainable inputs, or already released)")
    _check_finite(loss.data, "loss")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            if node.requires_grad:
                node.grad += g
            continue
        if retain:
            node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain:
        for node in order:
            if not isinstance(node, Param):
                node._parents = ()
                node._backward = None
    return order


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Ordered collection of named parameters."""

    def __init__(self, params: Iterable[Param] = ()):
        self._params: OrderedDict[str, Param] = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, p: Param) -> Param:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def trainable(self) -> list[Param]:
        return [p for p in self._params.values() if p.requires_grad]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore | Iterable[Param], state: AdamState) -> None:
    """One Adam update over the non-frozen params, then clear their gradients."""
    state.step += 1
    t = state.step
    step = state.lr / (1.0 - state.beta1**t)
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - state.beta2**t)
    for p in params:
        if p.frozen or not p.requires_grad:
            continue
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        kernels.adam_update(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), state.v[p.name].reshape(-1),
                            step, state.beta1, state.beta2, state.eps, inv_sqrt_bc2)


def step_lr(initial: float, epoch: int, milestones: Sequence[int], factor: float = 0.5) -> float:
    """Learning rate for a 0-based ``epoch`` under a multi-step decay."""
    return initial * factor ** sum(1 for m in milestones if epoch >= m)


def scaled_milestones(epochs: int, reference: Sequence[int] = (20, 30, 40), reference_epochs: int = 50) -> list[int]:
    """Rescale decay epochs defined for a 50-epoch budget to ``epochs``."""
    if epochs >= reference_epochs:
        return list(reference)
    return [max(1, round(m * epochs / reference_epochs)) for m in reference]


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore | Sequence[Param],
    h: float = 1e-5,
    *,
    samples: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. Up to
    ``samples`` coordinates per trainable parameter are probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    plist = [p for p in params if p.requires_grad]
    for p in plist:
        p.grad[...] = 0.0
    backward(f())
    worst = 0.0
    for p in plist:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
            flat[i] = old
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        p.grad[...] = 0.0
    return worst
