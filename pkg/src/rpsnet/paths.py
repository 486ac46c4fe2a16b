"""Binary L x M path matrices and the logic that combines them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class Path:
    """Immutable boolean matrix; row ``l`` marks the modules used in layer ``l``."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"path must be a non-empty 2-d matrix, got shape {arr.shape}")
        arr.setflags(write=False)
        self._bits = arr

    @classmethod
    def zeros(cls, L: int, M: int) -> "Path":
        return cls(np.zeros((L, M), dtype=bool))

    @classmethod
    def from_indices(cls, indices: Sequence[int], M: int) -> "Path":
        bits = np.zeros((len(indices), M), dtype=bool)
        bits[np.arange(len(indices)), list(indices)] = True
        return cls(bits)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def L(self) -> int:
        return self._bits.shape[0]

    @property
    def M(self) -> int:
        return self._bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    def __getitem__(self, idx):
        return self._bits[idx]

    def active(self, layer: int) -> list[int]:
        return [int(m) for m in np.flatnonzero(self._bits[layer])]

    def popcount(self) -> int:
        return int(self._bits.sum())

    def is_one_hot(self) -> bool:
        return bool((self._bits.sum(axis=1) == 1).all())

    def covers_every_layer(self) -> bool:
        return bool(self._bits.any(axis=1).all())

    def issubset(self, other: "Path") -> bool:
        _same_shape(self, other)
        return not (self._bits & ~other._bits).any()

    def to_list(self) -> list[list[int]]:
        return self._bits.astype(int).tolist()

    @classmethod
    def from_list(cls, rows: Iterable[Iterable[int]]) -> "Path":
        return cls([[bool(v) for v in row] for row in rows])

    def __or__(self, other: "Path") -> "Path":
        return path_or(self, other)

    def __and__(self, other: "Path") -> "Path":
        return path_and(self, other)

    def __xor__(self, other: "Path") -> "Path":
        return path_xor(self, other)

    def __eq__(self, other) -> bool:
        return isinstance(other, Path) and self.shape == other.shape and bool((self._bits == other._bits).all())

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __repr__(self) -> str:
        return f"Path({self.to_list()})"


def _same_shape(a: Path, b: Path) -> None:
    if a.shape != b.shape:
        raise ValueError(f"path shapes differ: {a.shape} vs {b.shape}")


def sample_training_path(L: int, M: int, rng: np.random.Generator) -> Path:
    """One module per layer, each drawn uniformly and independently."""
    if L < 1 or M < 1:
        raise ValueError("L and M must be >= 1")
    return Path.from_indices(rng.integers(0, M, size=L).tolist(), M)


def path_or(a: Path, b: Path) -> Path:
    _same_shape(a, b)
    return Path(a.bits | b.bits)


def path_and(a: Path, b: Path) -> Path:
    _same_shape(a, b)
    return Path(a.bits & b.bits)


def path_xor(a: Path, b: Path) -> Path:
    _same_shape(a, b)
    return Path(a.bits ^ b.bits)


def trainable_portion(p_tr: Path, p_ts_prev: Path) -> Path:
    """Modules of ``p_tr`` that no earlier task has trained: p_tr XOR (p_tr AND p_ts_prev)."""
    return path_xor(p_tr, path_and(p_tr, p_ts_prev))


def frozen_mask(p_ts_at_switch: Path, p_tr: Path) -> Path:
    """XOR of the inference path at the last switch and a training path."""
    return path_xor(p_ts_at_switch, p_tr)


@dataclass
class SwitchLog:
    """Tasks after which the training path was replaced (S in the method)."""

    entries: list[int] = field(default_factory=list)

    def record(self, task: int) -> None:
        if self.entries and task <= self.entries[-1]:
            raise ValueError(f"switch log must be strictly increasing, got {task} after {self.entries[-1]}")
        self.entries.append(task)

    @property
    def first(self) -> int | None:
        return self.entries[0] if self.entries else None

    @property
    def last(self) -> int | None:
        return self.entries[-1] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


def path_log_entry(task: int, train_path: Path, inference_path: Path, switched: bool) -> dict:
    return {
        "task": int(task),
        "train_path": train_path.to_list(),
        "inference_path": inference_path.to_list(),
        "switched": bool(switched),
    }


def dump_path_log(entries: list[dict]) -> str:
    return json.dumps(entries, indent=1)


def load_path_log(text: str) -> list[dict]:
    entries = json.loads(text)
    for e in entries:
        e["train_path"] = Path.from_list(e["train_path"])
        e["inference_path"] = Path.from_list(e["inference_path"])
    return entries
