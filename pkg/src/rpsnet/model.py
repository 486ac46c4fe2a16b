"""The L x M modular network with skip connections and a shared classifier.

Each module is a small dense block (affine, relu, affine), the dense stand-in
for a two-convolution residual block. Layer outputs are the skip signal plus
the sum of the path-selected module outputs; at the attention layer every
module output is first multiplied by its per-example peak response.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import autodiff as ad
from .autodiff import Param, ParamStore, Tensor
from .paths import Path

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class FreezeError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    layers: int = 2
    modules: int = 8
    input_dim: int = 784
    hidden_dims: list[int] = field(default_factory=lambda: [400, 400])
    num_classes: int = 10
    attention: bool = True
    attention_layer: int | None = None  # 1-based; None means the last layer
    branch_gain: float = 0.1  # init scale of module output weights; small keeps fresh modules quiet

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.layers < 1 or self.modules < 1:
            raise ConfigError("layers and modules must be >= 1")
        if len(self.hidden_dims) != self.layers:
            raise ConfigError(f"hidden_dims has {len(self.hidden_dims)} entries for {self.layers} layers")
        if self.input_dim < 1 or self.num_classes < 1 or min(self.hidden_dims) < 1:
            raise ConfigError("dimensions must be positive")
        if self.attention_layer is not None and not 1 <= self.attention_layer <= self.layers:
            raise ConfigError(f"attention_layer {self.attention_layer} outside 1..{self.layers}")
        if self.branch_gain < 0:
            raise ConfigError("branch_gain must be >= 0")

    @property
    def L(self) -> int:
        return self.layers

    @property
    def M(self) -> int:
        return self.modules

    @property
    def D(self) -> int:
        return self.hidden_dims[-1]

    @property
    def C(self) -> int:
        return self.num_classes

    @property
    def attended_layer(self) -> int:
        """0-based index of the layer that uses peak-response attention."""
        return (self.attention_layer or self.layers) - 1

    def layer_in_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dims[layer - 1]


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def module_names(layer: int, m: int) -> list[str]:
    base = f"layer{layer}.module{m}"
    return [f"{base}.w1", f"{base}.b1", f"{base}.w2", f"{base}.b2"]


def skip_names(layer: int) -> list[str]:
    return [f"layer{layer}.skip.w", f"layer{layer}.skip.b"]


CLASSIFIER_NAMES = ["fc.w", "fc.b"]


class Network:
    def __init__(self, cfg: NetworkConfig, params: ParamStore, frozen: np.ndarray | None = None):
        self.cfg = cfg
        self.params = params
        self._frozen = np.zeros((cfg.L, cfg.M), dtype=bool) if frozen is None else np.array(frozen, dtype=bool)
        self._frozen.setflags(write=False)
        for layer, m in zip(*np.nonzero(self._frozen)):
            for name in module_names(int(layer), int(m)):
                self.params[name].freeze()

    @property
    def frozen(self) -> np.ndarray:
        """Read-only L x M mask; freezing is one-way."""
        return self._frozen

    def has_skip_params(self, layer: int) -> bool:
        return self.cfg.layer_in_dim(layer) != self.cfg.hidden_dims[layer]

    def module_params(self, layer: int, m: int) -> list[Param]:
        return [self.params[n] for n in module_names(layer, m)]

    def skip_params(self, layer: int) -> list[Param]:
        return [self.params[n] for n in skip_names(layer)] if self.has_skip_params(layer) else []

    def classifier_params(self) -> list[Param]:
        return [self.params[n] for n in CLASSIFIER_NAMES]

    def always_trained(self) -> list[Param]:
        out = []
        for layer in range(self.cfg.L):
            out.extend(self.skip_params(layer))
        return out + self.classifier_params()

    # ------------------------------------------------------------- pieces

    def module_forward(self, layer: int, m: int, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.module_params(layer, m)
        return ad.affine(ad.relu(ad.affine(x, w1, b1)), w2, b2)

    def skip_forward(self, layer: int, x: Tensor) -> Tensor:
        if not self.has_skip_params(layer):
            return x
        w, b = self.skip_params(layer)
        return ad.affine(x, w, b)

    # ------------------------------------------------------------- training state

    def set_trainable(self, path: Path | None) -> None:
        """Mark unfrozen modules of ``path`` plus skips and classifier as trainable.

        ``path=None`` disables gradients everywhere.
        """
        for p in self.params:
            p.set_trainable(False)
        if path is None:
            return
        for layer in range(self.cfg.L):
            for m in path.active(layer):
                for p in self.module_params(layer, m):
                    p.set_trainable(True)
        for p in self.always_trained():
            p.set_trainable(True)

    def copy(self) -> "Network":
        store = ParamStore()
        for p in self.params:
            q = store.add(Param(p.name, p.data))
            q.requires_grad = p.requires_grad
        return Network(self.cfg, store, self._frozen)

    def state_equal(self, other: "Network") -> bool:
        return all(np.array_equal(p.data, other.params[p.name].data) for p in self.params)


def build_network(cfg: NetworkConfig, rng: np.random.Generator) -> Network:
    """Initialise every parameter with fan-in scaled uniform weights and zero biases."""
    store = ParamStore()
    relu_gain = np.sqrt(2.0)
    for layer in range(cfg.L):
        d_in, d_out = cfg.layer_in_dim(layer), cfg.hidden_dims[layer]
        for m in range(cfg.M):
            n_w1, n_b1, n_w2, n_b2 = module_names(layer, m)
            store.add(Param(n_w1, _uniform(rng, d_in, d_out, relu_gain)))
            store.add(Param(n_b1, np.zeros(d_out)))
            store.add(Param(n_w2, _uniform(rng, d_out, d_out, cfg.branch_gain)))
            store.add(Param(n_b2, np.zeros(d_out)))
        if d_in != d_out:
            n_w, n_b = skip_names(layer)
            store.add(Param(n_w, _uniform(rng, d_in, d_out, 1.0)))
            store.add(Param(n_b, np.zeros(d_out)))
    store.add(Param("fc.w", _uniform(rng, cfg.D, cfg.C, 1.0)))
    store.add(Param("fc.b", np.zeros(cfg.C)))
    return Network(cfg, store)


def ppr_coefficient(t) -> float:
    """Peak path response: the largest element of a module output."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.size == 0:
        raise ValueError("empty tensor has no peak response")
    return float(arr.max())


def ppr_rows(t: Tensor) -> np.ndarray:
    """Per-example peak response for a batch of flattened module outputs."""
    return t.data.max(axis=1)


def layer_forward(net: Network, layer: int, path: Path, x: Tensor, attention: bool = False,
                  fixed: np.ndarray | None = None) -> Tensor:
    """Skip signal plus the (optionally peak-weighted) outputs of the active modules.

    With ``fixed`` given, frozen modules of this layer are not evaluated and
    ``fixed`` (their precomputed summed output) is added instead.
    """
    if path.shape != (net.cfg.L, net.cfg.M):
        raise ValueError(f"path shape {path.shape} does not match network {(net.cfg.L, net.cfg.M)}")
    terms = [net.skip_forward(layer, x)]
    if fixed is not None:
        terms.append(Tensor(fixed))
    for m in path.active(layer):
        if fixed is not None and net.frozen[layer, m]:
            continue
        t = net.module_forward(layer, m, x)
        if attention:
            t = ad.scale_rows(t, ppr_rows(t))
        terms.append(t)
    return terms[0] if len(terms) == 1 else ad.add(*terms)


def features(net: Network, path: Path, x, first_fixed: np.ndarray | None = None) -> Tensor:
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.shape[1] != net.cfg.input_dim:
        raise ValueError(f"expected input of shape (n, {net.cfg.input_dim}), got {h.shape}")
    for layer in range(net.cfg.L):
        attend = net.cfg.attention and layer == net.cfg.attended_layer
        h = layer_forward(net, layer, path, h, attention=attend, fixed=first_fixed if layer == 0 else None)
    return h


def forward(net: Network, path: Path, x, first_fixed: np.ndarray | None = None) -> Tensor:
    """Logits over all C classes. The global pooling step is the identity for vectors.

    ``first_fixed`` is the output of :func:`frozen_first_layer` for the same
    inputs; it replaces evaluating the frozen first-layer modules.
    """
    w, b = net.classifier_params()
    return ad.affine(features(net, path, x, first_fixed), w, b)


def frozen_first_layer(net: Network, path: Path, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Summed (attention-weighted) output of the frozen first-layer modules of ``path``.

    Frozen modules read the raw input, so this is constant while training a task.
    """
    attend = net.cfg.attention and net.cfg.attended_layer == 0
    out = np.zeros((len(x), net.cfg.hidden_dims[0]))
    frozen = [m for m in path.active(0) if net.frozen[0, m]]
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            xb = Tensor(x[s : s + batch_size])
            for m in frozen:
                t = net.module_forward(0, m, xb)
                out[s : s + batch_size] += t.data * ppr_rows(t)[:, None] if attend else t.data
    return out


def predict_logits(net: Network, path: Path, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(net, path, x[i : i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, net.cfg.C))


def apply_freeze(net: Network, mask: Path) -> None:
    """frozen := frozen OR mask; frozen module parameters never change again."""
    if mask.shape != net.frozen.shape:
        raise ValueError(f"mask shape {mask.shape} does not match network {net.frozen.shape}")
    new = net.frozen | mask.bits
    for layer, m in zip(*np.nonzero(new & ~net.frozen)):
        for p in net.module_params(int(layer), int(m)):
            p.freeze()
    new.setflags(write=False)
    net._frozen = new


def unfreeze(net: Network, mask: Path) -> None:
    raise FreezeError("frozen modules cannot be released")


def masked_logits(logits: Tensor, k: int, U: int) -> Tensor:
    """The first k*U logit columns (classes seen up to task k)."""
    if k < 1 or k * U > logits.shape[1]:
        raise ValueError(f"task {k} with {U} classes/task exceeds {logits.shape[1]} logits")
    if k * U == logits.shape[1]:
        return logits
    return ad.slice_cols(logits, k * U)


def active_module_mflops(cfg: NetworkConfig, path: Path) -> float:
    """Analytic forward cost per example (mega multiply-adds) for a path."""
    total = 0.0
    for layer in range(cfg.L):
        d_in, d_out = cfg.layer_in_dim(layer), cfg.hidden_dims[layer]
        total += len(path.active(layer)) * (d_in * d_out + d_out * d_out)
        if d_in != d_out:
            total += d_in * d_out
    total += cfg.D * cfg.C
    return total / 1e6


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: Network, inference_path: Path | None, file: str | FsPath) -> None:
    """Write an ``.npz`` archive.

    Layout: ``__meta__`` holds a JSON string with ``version``, ``config``,
    ``frozen`` (L x M 0/1 rows) and ``inference_path`` (or null); every
    other array is a parameter stored under its name.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.cfg),
        "frozen": net.frozen.astype(int).tolist(),
        "inference_path": inference_path.to_list() if inference_path is not None else None,
    }
    arrays = {p.name: p.data for p in net.params}
    np.savez(file, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(file: str | FsPath) -> tuple[Network, Path | None]:
    with np.load(file, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = NetworkConfig(**meta["config"])
        store = ParamStore(Param(name, z[name]) for name in z.files if name != "__meta__")
    net = Network(cfg, store, np.array(meta["frozen"], dtype=bool))
    ip = meta["inference_path"]
    return net, (Path.from_list(ip) if ip is not None else None)
