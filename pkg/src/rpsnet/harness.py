"""Experiment configuration, orchestration and artifact emission."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import types
import typing
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np
import yaml

from .autodiff import NonFiniteError
from .memory import TaskStream, load_mnist_stream, make_synthetic_stream
from .model import NetworkConfig
from .paths import dump_path_log, path_log_entry
from .trainer import TaskReport, TrainerConfig, run_plain, run_stream

log = logging.getLogger(__name__)

MODES = ("rpsnet", "finetune", "joint")
MNIST_DIM = 784


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "mnist"  # or "synthetic"
    path: str = "data/mnist"
    dim: int = 20
    per_class: int = 200
    test_per_class: int = 100
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset.kind must be 'mnist' or 'synthetic', got {self.kind!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    K: int
    U: int
    network: NetworkConfig
    trainer: TrainerConfig
    budget: int = 4400
    mode: str = "rpsnet"
    out: str = "results/run"

    @property
    def C(self) -> int:
        return self.K * self.U


# ---------------------------------------------------------------- parsing


def _coerce(value, hint, where: str):
    """Check ``value`` against a (simple) type hint; ints are accepted for floats."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {"dataset", "K", "U", "network", "trainer", "budget", "mode", "out"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    for key in ("dataset", "K", "U"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    K = _coerce(raw["K"], int, "K")
    U = _coerce(raw["U"], int, "U")
    if K < 1 or U < 1:
        raise ConfigError("K and U must be >= 1")
    dataset = _build(DatasetConfig, raw["dataset"], "dataset")
    net_raw = dict(raw.get("network") or {})
    if net_raw.get("num_classes", K * U) != K * U:
        raise ConfigError(f"network.num_classes={net_raw['num_classes']} but K*U={K * U}")
    net_raw["num_classes"] = K * U
    want_dim = MNIST_DIM if dataset.kind == "mnist" else dataset.dim
    if net_raw.setdefault("input_dim", want_dim) != want_dim:
        raise ConfigError(f"network.input_dim={net_raw['input_dim']} but the dataset has {want_dim} features")
    network = _build(NetworkConfig, net_raw, "network")
    trainer = _build(TrainerConfig, raw.get("trainer"), "trainer")
    budget = _coerce(raw.get("budget", 4400), int, "budget")
    mode = _coerce(raw.get("mode", "rpsnet"), str, "mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    if mode == "rpsnet" and budget < K * U:
        raise ConfigError(f"budget {budget} cannot hold one exemplar for each of {K * U} classes")
    out = _coerce(raw.get("out", "results/run"), str, "out")
    return ExperimentConfig(dataset, K, U, network, trainer, budget, mode, out)


def parse_config(file: str | FsPath) -> ExperimentConfig:
    try:
        text = FsPath(file).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {file}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{file}: invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": dataclasses.asdict(cfg.dataset),
        "K": cfg.K,
        "U": cfg.U,
        "network": dataclasses.asdict(cfg.network),
        "trainer": dataclasses.asdict(cfg.trainer),
        "budget": cfg.budget,
        "mode": cfg.mode,
        "out": cfg.out,
    }


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply CLI-style overrides (None means keep the file value) and revalidate."""
    raw = config_to_dict(cfg)
    top = {"mode": "mode", "out": "out"}
    nested = {"seed": "seed", "epochs": "epochs", "candidates": "candidates",
              "threshold": "threshold", "gamma": "gamma"}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in top:
            raw[top[key]] = value
        elif key in nested:
            raw["trainer"][nested[key]] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    return config_from_dict(raw)


# ---------------------------------------------------------------- data


def load_stream(cfg: ExperimentConfig) -> TaskStream:
    d = cfg.dataset
    if d.kind == "mnist":
        try:
            return load_mnist_stream(d.path, cfg.K, cfg.U)
        except OSError as exc:
            raise OSError(f"cannot load MNIST from {d.path}: {exc}") from exc
    return make_synthetic_stream(cfg.K, cfg.U, d.dim, d.per_class, d.separation,
                                 np.random.default_rng(d.seed), d.test_per_class, d.noise)


# ---------------------------------------------------------------- artifacts


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def metrics_csv(reports: list[TaskReport], K: int) -> str:
    """One row per task; accuracy columns beyond the row's task are left empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", *[f"acc_{j}" for j in range(1, K + 1)], "avg", "mu_sat", "switched"])
    for r in reports:
        accs = [_fmt(a) for a in r.metrics.task_accuracies]
        w.writerow([r.task, *accs, *[""] * (K - len(accs)), _fmt(r.metrics.average),
                    _fmt(r.saturation.mu), int(r.switched)])
    return buf.getvalue()


def confusion_csv(conf: np.ndarray) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(conf.tolist())
    return buf.getvalue()


def saturation_csv(reports: list[TaskReport], threshold: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "mu_sat", "th", "switch_next", "fl_mass", "el_mass"])
    for r in reports:
        s = r.saturation
        w.writerow([r.task, _fmt(s.mu), _fmt(threshold), int(r.switch_next), _fmt(s.fl_mass), _fmt(s.el_mass)])
    return buf.getvalue()


def timings_csv(reports: list[TaskReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "seconds", "inference_mflops", "trainable_modules"])
    for r in reports:
        w.writerow([r.task, f"{r.seconds:.3f}", _fmt(r.mflops), r.trainable_modules])
    return buf.getvalue()


def summary(cfg: ExperimentConfig, reports: list[TaskReport]) -> dict:
    last = reports[-1]
    paths = {r.train_path for r in reports if r.switched}
    return {
        "mode": cfg.mode,
        "seed": cfg.trainer.seed,
        "K": cfg.K,
        "final_average": last.metrics.average,
        "final_task_accuracies": last.metrics.task_accuracies,
        "averages": [r.metrics.average for r in reports],
        "switch_tasks": [r.task for r in reports if r.switched],
        "distinct_paths": len(paths),
        "inference_popcount": last.inference_path.popcount(),
    }


def write_artifacts(cfg: ExperimentConfig, reports: list[TaskReport], out: str | FsPath) -> None:
    out = FsPath(out)
    files = {
        "metrics.csv": metrics_csv(reports, cfg.K),
        "saturation.csv": saturation_csv(reports, cfg.trainer.threshold),
        "timings.csv": timings_csv(reports),
        "paths.json": dump_path_log([path_log_entry(r.task, r.train_path, r.inference_path, r.switched)
                                     for r in reports]) + "\n",
        "summary.json": json.dumps(summary(cfg, reports), indent=1) + "\n",
        "config_echo.yaml": emit_config(cfg),
    }
    for r in reports:
        files[f"confusion_{r.task}.csv"] = confusion_csv(r.metrics.confusion)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
    except OSError as exc:
        raise OSError(f"writing artifacts to {out}: {exc}") from exc


def run_reports(cfg: ExperimentConfig, stream: TaskStream | None = None) -> list[TaskReport]:
    stream = stream if stream is not None else load_stream(cfg)
    if stream.K != cfg.K or stream.U != cfg.U:
        raise ConfigError(f"stream has K={stream.K}, U={stream.U}; config says K={cfg.K}, U={cfg.U}")
    if cfg.mode == "rpsnet":
        _, reports = run_stream(stream, cfg.network, cfg.trainer, cfg.budget)
        return reports
    return run_plain(stream, cfg.network, cfg.trainer, joint=cfg.mode == "joint")


def run_experiment(cfg: ExperimentConfig, out: str | FsPath | None = None) -> int:
    """Run one experiment and write its artifacts. Returns a process exit status."""
    out = FsPath(out or cfg.out)
    try:
        reports = run_reports(cfg)
    except NonFiniteError as exc:
        log.error("non-finite value during training: %s", exc)
        return 3
    if any(math.isnan(r.metrics.average) for r in reports):
        log.error("NaN in metrics")
        return 3
    write_artifacts(cfg, reports, out)
    log.info("final A_%d = %.4f -> %s", cfg.K, reports[-1].metrics.average, out)
    return 0
