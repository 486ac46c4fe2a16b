"""Datasets, task streams and the fixed-budget exemplar memory."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BudgetError(ValueError):
    """Budget cannot hold one exemplar per seen class."""


# ---------------------------------------------------------------- IDX files


def _read_idx(path: str | FsPath, magic: int, ndim: int) -> np.ndarray:
    raw = FsPath(path).read_bytes()
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    size = int(np.prod(dims))
    payload = raw[4 + 4 * ndim :]
    if len(payload) < size:
        raise OSError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=size).reshape(dims)


def ingest_idx(images_path: str | FsPath, labels_path: str | FsPath) -> tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label pair into (n, rows*cols) floats in [0, 1] and int labels."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"label {labels.max()} outside 0..9")
    return images.reshape(len(images), -1).astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | FsPath, labels_path: str | FsPath,
              rows: int = 28, cols: int = 28) -> None:
    """Inverse of :func:`ingest_idx` for data on the 1/255 grid."""
    pix = np.rint(np.asarray(images) * 255.0).astype(np.uint8)
    n = len(pix)
    FsPath(images_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + pix.tobytes())
    FsPath(labels_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, n) + np.asarray(labels, np.uint8).tobytes())


# ---------------------------------------------------------------- task streams


@dataclass
class Task:
    index: int  # 1-based
    classes: list[int]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    U: int
    dim: int

    @property
    def K(self) -> int:
        return len(self.tasks)

    @property
    def C(self) -> int:
        return self.K * self.U

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, k: int) -> Task:
        return self.tasks[k - 1]


def split_into_tasks(x_train, y_train, x_test, y_test, K: int, U: int, class_order=None) -> TaskStream:
    """Group U consecutive classes per task; labels are re-indexed 0..K*U-1 in task order."""
    order = list(range(K * U)) if class_order is None else [int(c) for c in class_order]
    if len(order) != K * U or len(set(order)) != K * U:
        raise ValueError("class_order must list K*U distinct classes")
    remap = {c: i for i, c in enumerate(order)}
    tasks = []
    for k in range(K):
        own = order[k * U : (k + 1) * U]
        tr = np.isin(y_train, own)
        te = np.isin(y_test, own)
        tasks.append(Task(
            index=k + 1,
            classes=list(range(k * U, (k + 1) * U)),
            x_train=x_train[tr],
            y_train=np.array([remap[int(c)] for c in y_train[tr]], dtype=np.int64),
            x_test=x_test[te],
            y_test=np.array([remap[int(c)] for c in y_test[te]], dtype=np.int64),
        ))
    return TaskStream(tasks, U, x_train.shape[1])


def load_mnist_stream(directory: str | FsPath, K: int = 5, U: int = 2) -> TaskStream:
    d = FsPath(directory)
    x_tr, y_tr = ingest_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    x_te, y_te = ingest_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    return split_into_tasks(x_tr, y_tr, x_te, y_te, K, U)


def make_synthetic_stream(K: int, U: int, dim: int, per_class: int, separation: float,
                          rng: np.random.Generator, test_per_class: int | None = None,
                          noise: float = 1.0) -> TaskStream:
    """Gaussian blobs: class means at random directions scaled by ``separation``."""
    if separation <= 0:
        raise ValueError("separation must be positive")
    C = K * U
    test_per_class = per_class if test_per_class is None else test_per_class
    dirs = rng.standard_normal((C, dim))
    means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def draw(n):
        xs = [means[c] + noise * rng.standard_normal((n, dim)) for c in range(C)]
        return np.concatenate(xs), np.repeat(np.arange(C), n)

    x_tr, y_tr = draw(per_class)
    x_te, y_te = draw(test_per_class)
    return split_into_tasks(x_tr, y_tr, x_te, y_te, K, U)


# ---------------------------------------------------------------- exemplars


@dataclass
class ExemplarMemory:
    budget: int
    x: np.ndarray | None = None
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    task: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.y.size)

    @property
    def tasks_seen(self) -> set[int]:
        return set(int(t) for t in np.unique(self.task))

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(c): int(n) for c, n in zip(labels, counts)}


def class_quotas(budget: int, available: dict[int, int]) -> dict[int, int]:
    """Equal split of ``budget`` across classes, capped by availability.

    Leftover slots from capped classes are redistributed; uncapped quotas
    differ by at most one (lower class ids get the extra slot).
    """
    quotas = {c: 0 for c in available}
    open_ = sorted(c for c in available if available[c] > 0)
    left = budget
    while left > 0 and open_:
        share, extra = divmod(left, len(open_))
        capped = False
        for i, c in enumerate(open_):
            want = share + (1 if i < extra else 0)
            room = available[c] - quotas[c]
            if want >= room:
                quotas[c] += room
                left -= room
                capped = True
        if capped:
            open_ = [c for c in open_ if quotas[c] < available[c]]
            continue
        for i, c in enumerate(open_):
            quotas[c] += share + (1 if i < extra else 0)
        left = 0
    return quotas


def update_exemplars(mem: ExemplarMemory, task: Task, rng: np.random.Generator) -> None:
    """Rebalance memory to the budget with equal per-class random exemplars."""
    if task.index in mem.tasks_seen:
        raise ValueError(f"task {task.index} is already in memory")
    new_counts = {int(c): int((task.y_train == c).sum()) for c in task.classes}
    available = {**mem.class_counts(), **new_counts}
    if mem.budget < len(available):
        raise BudgetError(f"budget {mem.budget} cannot hold {len(available)} classes")
    quotas = class_quotas(mem.budget, available)
    xs, ys, ts = [], [], []
    for c in sorted(available):
        if c in new_counts:
            idx = np.flatnonzero(task.y_train == c)
            src_x, src_t = task.x_train, np.full(len(task.y_train), task.index)
        else:
            idx = np.flatnonzero(mem.y == c)
            src_x, src_t = mem.x, mem.task
        keep = np.sort(rng.choice(idx, size=quotas[c], replace=False))
        xs.append(src_x[keep])
        ys.append(np.full(len(keep), c, dtype=np.int64))
        ts.append(np.asarray(src_t[keep], dtype=np.int64))
    mem.x = np.concatenate(xs)
    mem.y = np.concatenate(ys)
    mem.task = np.concatenate(ts)


def replay_batch(mem: ExemplarMemory, x_cur: np.ndarray, y_cur: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draw (without replacement within the batch) from memory plus current data."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_mem = len(mem)
    total = n_mem + len(y_cur)
    idx = rng.choice(total, size=min(batch_size, total), replace=False)
    from_mem = idx < n_mem
    x = np.empty((idx.size, x_cur.shape[1]))
    y = np.empty(idx.size, dtype=np.int64)
    if from_mem.any():
        x[from_mem] = mem.x[idx[from_mem]]
        y[from_mem] = mem.y[idx[from_mem]]
    x[~from_mem] = x_cur[idx[~from_mem] - n_mem]
    y[~from_mem] = y_cur[idx[~from_mem] - n_mem]
    return x, y


def epoch_batches(n_mem: int, n_cur: int, batch_size: int, rng: np.random.Generator,
                  replay_ratio: float | None = None) -> list[np.ndarray]:
    """Index batches over the union ``[memory | current]`` for one epoch.

    Without ``replay_ratio`` the union is shuffled and partitioned, so every
    example is visited once. With a ratio, each batch holds that fraction of
    memory samples (drawn with replacement across batches) and the rest is a
    pass over the current data.
    """
    if replay_ratio is None or n_mem == 0:
        perm = rng.permutation(n_mem + n_cur)
        return [perm[s : s + batch_size] for s in range(0, len(perm), batch_size)]
    n_old = int(round(replay_ratio * batch_size))
    n_new = max(1, batch_size - n_old)
    perm = n_mem + rng.permutation(n_cur)
    out = []
    for s in range(0, n_cur, n_new):
        out.append(np.concatenate([rng.integers(0, n_mem, size=n_old), perm[s : s + n_new]]))
    return out
