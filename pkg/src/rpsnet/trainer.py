"""Task-by-task orchestration of path selection, training and saturation checks."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .memory import ExemplarMemory, Task, TaskStream, epoch_batches, update_exemplars
from .model import (Network, NetworkConfig, active_module_mflops, apply_freeze, build_network, forward,
                    frozen_first_layer, predict_logits)
from .objective import ControllerConfig, controller_phi, cross_entropy_seen, distillation_kl, total_loss
from .paths import Path, SwitchLog, path_or, sample_training_path, trainable_portion
from .saturation import Saturation, exemplar_fisher, layer_sets, saturation_coefficient, should_switch

log = logging.getLogger(__name__)

# purposes for the per-use random streams
_INIT, _PATH, _SPLIT, _BATCH, _MEMORY, _FISHER = range(6)


def stream_rng(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Independent generator per (seed, purpose, keys); order of use never matters."""
    return np.random.default_rng([seed, purpose, *keys])


@dataclass
class TrainerConfig:
    candidates: int = 8
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    lr_milestones: list[int] = field(default_factory=lambda: [20, 30, 40])
    threshold: float = 0.0
    switch_every: int | None = None  # fixed-interval (J) switching; disables the threshold rule
    gamma: float = 2.5
    gamma_mode: str = "fixed"  # or "ratio": task train size / memory budget
    temperature: float = 2.0
    val_fraction: float = 0.1
    fisher_cap: int | None = None
    replay_ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.switch_every is not None and self.switch_every < 1:
            raise ValueError("switch_every must be >= 1")
        if self.gamma_mode not in ("fixed", "ratio"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @property
    def uses_interval(self) -> bool:
        return self.switch_every is not None


@dataclass
class MetricsRow:
    task: int
    task_accuracies: list[float]
    average: float
    confusion: np.ndarray


@dataclass
class TaskReport:
    task: int
    switched: bool  # a new training path was selected for this task
    train_path: Path
    inference_path: Path
    saturation: Saturation
    switch_next: bool
    phi: float
    candidate_accuracies: list[float]
    metrics: MetricsRow
    seconds: float
    mflops: float
    trainable_modules: int


@dataclass
class RunState:
    net: Network
    memory: ExemplarMemory
    inference_path: Path
    train_path: Path | None = None
    switches: SwitchLog = field(default_factory=SwitchLog)
    snapshot: tuple[Network, Path] | None = None
    saturation: Saturation | None = None
    k: int = 0
    selected_paths: list[Path] = field(default_factory=list)

    @property
    def distinct_paths(self) -> int:
        return len(set(self.selected_paths))


@dataclass
class CandidateResult:
    path: Path
    net: Network
    accuracy: float


@dataclass
class TaskData:
    """Everything one task's candidates train and validate on."""

    k: int
    U: int
    x: np.ndarray  # union of exemplars and current training data
    y: np.ndarray
    n_mem: int
    prev_logits: np.ndarray | None
    x_val: np.ndarray
    y_val: np.ndarray


def init_state(net_cfg: NetworkConfig, budget: int, seed: int) -> RunState:
    net = build_network(net_cfg, stream_rng(seed, _INIT))
    return RunState(net=net, memory=ExemplarMemory(budget), inference_path=Path.zeros(net_cfg.L, net_cfg.M))


def accuracy(net: Network, path: Path, x: np.ndarray, y: np.ndarray, seen: int) -> float:
    if len(y) == 0:
        return 0.0
    pred = predict_logits(net, path, x)[:, :seen].argmax(axis=1)
    return float((pred == y).mean())


def select_best(accuracies: list[float]) -> int:
    """Index of the highest accuracy; ties go to the lowest index."""
    if not accuracies:
        raise ValueError("no candidates to select from")
    return int(np.argmax(accuracies))


def train_path_on(net: Network, fused: Path, trainable: Path | None, data: TaskData, cfg: TrainerConfig,
                  phi: float, rng: np.random.Generator, distill: bool = True) -> None:
    """Run ``cfg.epochs`` of Adam on ``net`` in place.

    The forward pass uses ``fused``; only unfrozen modules of ``trainable``
    plus skips and classifier receive updates.
    """
    net.set_trainable(trainable)
    params = net.params.trainable()
    state = ad.AdamState(lr=cfg.lr)
    milestones = _milestones(cfg)
    k, U = data.k, data.U
    use_dist = distill and k > 1 and data.prev_logits is not None
    fixed = frozen_first_layer(net, fused, data.x) if net.frozen[0][fused.bits[0]].any() else None
    for epoch in range(cfg.epochs):
        state.lr = ad.step_lr(cfg.lr, epoch, milestones)
        for idx in epoch_batches(data.n_mem, len(data.y) - data.n_mem, cfg.batch_size, rng, cfg.replay_ratio):
            logits = forward(net, fused, data.x[idx], None if fixed is None else fixed[idx])
            loss = cross_entropy_seen(logits, data.y[idx], k, U)
            if use_dist:
                dist = distillation_kl(logits, data.prev_logits[idx], k, U, cfg.temperature)
                loss = total_loss(loss, dist, phi)
            ad.backward(loss)
            ad.adam_step(params, state)
    net.set_trainable(None)


def _milestones(cfg: TrainerConfig) -> list[int]:
    return ad.scaled_milestones(cfg.epochs, cfg.lr_milestones)


def train_candidate(state: RunState, candidate: Path, data: TaskData, cfg: TrainerConfig, phi: float,
                    rng: np.random.Generator) -> CandidateResult:
    """Train the unseen part of ``candidate`` on top of the fixed inference path."""
    net = state.net.copy()
    fused = path_or(state.inference_path, candidate)
    train_path_on(net, fused, candidate, data, cfg, phi, rng)
    acc = accuracy(net, fused, data.x_val, data.y_val, data.k * data.U)
    return CandidateResult(candidate, net, acc)


def prepare_task_data(state: RunState, task: Task, U: int, cfg: TrainerConfig) -> TaskData:
    rng = stream_rng(cfg.seed, _SPLIT, task.index)
    n = len(task.y_train)
    n_val = int(round(cfg.val_fraction * n))
    perm = rng.permutation(n)
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    mem = state.memory
    if len(mem):
        x = np.concatenate([mem.x, task.x_train[tr_idx]])
        y = np.concatenate([mem.y, task.y_train[tr_idx]])
        x_val = np.concatenate([task.x_train[val_idx], mem.x])
        y_val = np.concatenate([task.y_train[val_idx], mem.y])
    else:
        x, y = task.x_train[tr_idx], task.y_train[tr_idx]
        x_val, y_val = task.x_train[val_idx], task.y_train[val_idx]
    prev = None
    if state.snapshot is not None:
        snap_net, snap_path = state.snapshot
        prev = predict_logits(snap_net, snap_path, x)
    return TaskData(task.index, U, x, y, len(mem), prev, x_val, y_val)


def decide_switch(state: RunState, k: int, cfg: TrainerConfig) -> bool:
    """Whether task ``k`` starts on a freshly selected path."""
    if k == 1 or state.train_path is None:
        return True
    if cfg.uses_interval:
        return (k - 1) % cfg.switch_every == 0
    return should_switch(state.saturation.mu if state.saturation else None, cfg.threshold)


def run_task(state: RunState, task: Task, stream: TaskStream, cfg: TrainerConfig) -> TaskReport:
    k = task.index
    if k != state.k + 1:
        raise RuntimeError(f"tasks must run in order: expected {state.k + 1}, got {k}")
    start = time.perf_counter()
    U = stream.U
    switched = decide_switch(state, k, cfg)
    if switched and k > 1:
        state.switches.record(k - 1)
    gamma = cfg.gamma if cfg.gamma_mode == "fixed" else len(task.y_train) / state.memory.budget
    ctrl = ControllerConfig(gamma=gamma, temperature=cfg.temperature, first_switch=state.switches.first)
    phi = controller_phi(k, ctrl)
    data = prepare_task_data(state, task, U, cfg)
    prev_ts = state.inference_path

    if switched:
        # every module trained so far stays fixed; candidates only add new ones
        apply_freeze(state.net, prev_ts)
        L, M = state.net.cfg.L, state.net.cfg.M
        cand_paths = [sample_training_path(L, M, stream_rng(cfg.seed, _PATH, k, c)) for c in range(cfg.candidates)]
        results = [train_candidate(state, c, data, cfg, phi, stream_rng(cfg.seed, _BATCH, k, i))
                   for i, c in enumerate(cand_paths)]
        best = results[select_best([r.accuracy for r in results])]
        state.net, state.train_path = best.net, best.path
        cand_acc = [r.accuracy for r in results]
    else:
        res = train_candidate(state, state.train_path, data, cfg, phi, stream_rng(cfg.seed, _BATCH, k, 0))
        state.net = res.net
        cand_acc = [res.accuracy]

    trainable = trainable_portion(state.train_path, Path(state.net.frozen))
    state.selected_paths.append(state.train_path)
    state.inference_path = path_or(prev_ts, state.train_path)
    update_exemplars(state.memory, task, stream_rng(cfg.seed, _MEMORY, k))
    state.snapshot = (state.net.copy(), state.inference_path)
    state.saturation = measure_saturation(state, k, U, cfg)
    metrics = evaluate(state.net, state.inference_path, stream, k)
    state.k = k
    seconds = time.perf_counter() - start
    if cfg.uses_interval:
        switch_next = k % cfg.switch_every == 0
    else:
        switch_next = should_switch(state.saturation.mu, cfg.threshold)
    log.info("task %d: switched=%s mu=%s A=%.4f (%.1fs)", k, switched, state.saturation.mu, metrics.average, seconds)
    return TaskReport(
        task=k,
        switched=switched,
        train_path=state.train_path,
        inference_path=state.inference_path,
        saturation=state.saturation,
        switch_next=switch_next,
        phi=phi,
        candidate_accuracies=cand_acc,
        metrics=metrics,
        seconds=seconds,
        mflops=active_module_mflops(state.net.cfg, state.inference_path),
        trainable_modules=trainable.popcount(),
    )


def measure_saturation(state: RunState, k: int, U: int, cfg: TrainerConfig) -> Saturation:
    mem = state.memory
    x, y = mem.x, mem.y
    if cfg.fisher_cap is not None and len(y) > cfg.fisher_cap:
        pick = np.sort(stream_rng(cfg.seed, _FISHER, k).choice(len(y), size=cfg.fisher_cap, replace=False))
        x, y = x[pick], y[pick]
    sets = layer_sets(state.net, state.train_path)
    acc = exemplar_fisher(state.net, state.inference_path, x, y, k, U, sets)
    return saturation_coefficient(acc, sets)


def evaluate(net: Network, path: Path, stream: TaskStream, k: int) -> MetricsRow:
    """Accuracy on the test sets of tasks 1..k with predictions over all seen classes.

    Per-task accuracy is the mean of its per-class accuracies, so the
    average over tasks equals the mean over all seen classes.
    """
    seen = k * stream.U
    conf = np.zeros((seen, seen), dtype=np.int64)
    for task in stream.tasks[:k]:
        pred = predict_logits(net, path, task.x_test)[:, :seen].argmax(axis=1)
        np.add.at(conf, (task.y_test, pred), 1)
    per_class = np.diag(conf) / np.maximum(conf.sum(axis=1), 1)
    per_task = [float(per_class[j * stream.U:(j + 1) * stream.U].mean()) for j in range(k)]
    return MetricsRow(k, per_task, float(per_class.mean()), conf)


def run_stream(stream: TaskStream, net_cfg: NetworkConfig, cfg: TrainerConfig, budget: int,
               state: RunState | None = None) -> tuple[RunState, list[TaskReport]]:
    state = state or init_state(net_cfg, budget, cfg.seed)
    reports = []
    for task in stream:
        reports.append(run_task(state, task, stream, cfg))
    return state, reports


# ---------------------------------------------------------------- baselines


def run_plain(stream: TaskStream, net_cfg: NetworkConfig, cfg: TrainerConfig, joint: bool) -> list[TaskReport]:
    """Single-path training without freezing, distillation or exemplars.

    ``joint=False`` fine-tunes on each new task only; ``joint=True`` trains
    on the union of all tasks seen so far (the upper-bound reference).
    """
    net = build_network(net_cfg, stream_rng(cfg.seed, _INIT))
    path = sample_training_path(net_cfg.L, net_cfg.M, stream_rng(cfg.seed, _PATH, 1, 0))
    reports = []
    empty = Saturation(None, 0.0, 0.0)
    for task in stream:
        k = task.index
        start = time.perf_counter()
        tasks = stream.tasks[:k] if joint else [task]
        x = np.concatenate([t.x_train for t in tasks])
        y = np.concatenate([t.y_train for t in tasks])
        data = TaskData(k, stream.U, x, y, 0, None, x[:0], y[:0])
        train_path_on(net, path, path, data, cfg, 1.0, stream_rng(cfg.seed, _BATCH, k, 0), distill=False)
        metrics = evaluate(net, path, stream, k)
        reports.append(TaskReport(
            task=k, switched=k == 1, train_path=path, inference_path=path, saturation=empty,
            switch_next=False, phi=1.0, candidate_accuracies=[], metrics=metrics,
            seconds=time.perf_counter() - start, mflops=active_module_mflops(net_cfg, path),
            trainable_modules=path.popcount() if k == 1 else 0,
        ))
        log.info("task %d (%s): A=%.4f", k, "joint" if joint else "finetune", metrics.average)
    return reports
