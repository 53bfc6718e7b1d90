"""The residual SNN and its CNN counterpart.

Both families share one skeleton::

    input -> clone residual
          -> Conv2d(C, (1, 5)) -> [LIF | BN + ReLU] -> [Max | Avg]Pool(2, 2)
          -> Conv2d(C, (10, 10)) -> attention -> + pooled residual
          -> [LIF | BN + ReLU] -> [Max | Avg]Pool(2, 2)
          -> flatten (C, S/4, T/4) -> Linear(20) -> Linear(2)

In the SNN the inputs of the second convolution and the first linear layer are
binary, so those layers are accumulate-only (AC).  NiLIF neurons treat the T
samples of each (channel, timepiece) row as their time axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .attention import KINDS, AttentionConfig, build_attention
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, DimensionError, TransferError
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .neurons import IterativeLIFLayer, IterativeLIFModule, NiLIFLayer, build_leaky_kernel
from .tensor import Tensor

ATTENTION_CHOICES = ("none",) + KINDS


@dataclass(frozen=True)
class NetworkSpec:
    channels: int = 20
    pieces: int = 20
    steps: int = 20
    attention: str = "none"
    family: str = "snn"
    neuron: str = "nilif"
    tau: float = 2.0
    delta_t: float = 1.0
    v_th: float = 0.5
    surrogate_alpha: float = 4.0
    d1: int = 6
    d2: int = 20
    d: int = 8
    encoder_kernel: tuple[int, int] = (1, 5)
    classifier_kernel: tuple[int, int] = (10, 10)
    hidden: int = 20
    classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_kernel", tuple(self.encoder_kernel))
        object.__setattr__(self, "classifier_kernel", tuple(self.classifier_kernel))
        if min(self.channels, self.pieces, self.steps, self.hidden, self.classes) <= 0:
            raise ConfigError("network extents must be positive")
        if self.pieces % 4 or self.steps % 4:
            raise ConfigError(f"S and T must be divisible by 4 for two 2x2 pools, got S={self.pieces}, T={self.steps}")
        if self.family not in ("snn", "cnn"):
            raise ConfigError(f"family must be 'snn' or 'cnn', got {self.family!r}")
        if self.neuron not in ("nilif", "iterative"):
            raise ConfigError(f"neuron must be 'nilif' or 'iterative', got {self.neuron!r}")
        if self.attention not in ATTENTION_CHOICES:
            raise ConfigError(f"attention must be one of {ATTENTION_CHOICES}, got {self.attention!r}")
        if self.attention == "global" and self.pieces // 2 != self.steps // 2:
            raise ConfigError(
                f"global attention needs S/2 == T/2 at its insertion point, got {self.pieces // 2} and {self.steps // 2}"
            )

    @property
    def trial_length(self) -> int:
        return self.pieces * self.steps

    @property
    def flat_features(self) -> int:
        return self.channels * (self.pieces // 4) * (self.steps // 4)

    def attention_config(self) -> AttentionConfig | None:
        if self.attention == "none":
            return None
        return AttentionConfig(self.attention, self.d1, self.d2, self.d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder_kernel"] = list(self.encoder_kernel)
        out["classifier_kernel"] = list(self.classifier_kernel)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network fields: {sorted(unknown)}")
        return cls(**data)


class LayerInfo(NamedTuple):
    name: str
    kind: str
    in_shape: tuple[int, ...]  # per-sample input extents
    module: object
    ac: bool


class Network(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        C, S, Tn = spec.channels, spec.pieces, spec.steps
        self.spec = spec
        self.family = spec.family
        self.conv1 = Conv2d(C, C, spec.encoder_kernel, rng)
        if spec.family == "snn":
            self.lif1 = self._neuron(spec, Tn, C)
        else:
            self.bn1 = BatchNorm2d(C)
        self.conv2 = Conv2d(C, C, spec.classifier_kernel, rng)
        cfg = spec.attention_config()
        self.attention = build_attention(cfg, C, S // 2, Tn // 2, rng) if cfg else None
        if spec.family == "snn":
            self.lif2 = self._neuron(spec, Tn // 2, C)
        else:
            self.bn2 = BatchNorm2d(C)
        self.fc1 = Linear(spec.flat_features, spec.hidden, rng)
        self.fc2 = Linear(spec.hidden, spec.classes, rng)
        self.spike_rates: dict[str, float] = {}
        self.trace: dict[str, np.ndarray] = {}

    @staticmethod
    def _neuron(spec: NetworkSpec, steps: int, channels: int) -> Module:
        kernel = build_leaky_kernel(spec.tau, spec.delta_t, spec.v_th, steps - 1)
        if spec.neuron == "nilif":
            return NiLIFLayer(kernel, channels)
        return IterativeLIFModule(IterativeLIFLayer.from_kernel(kernel, spec.surrogate_alpha), channels)

    def _pool(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x) if self.family == "snn" else T.avg_pool2d(x)

    def forward(self, x: Tensor, keep_trace: bool = False) -> Tensor:
        spec = self.spec
        expected = (spec.channels, spec.pieces, spec.steps)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"network expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        residual = x
        h = self.conv1(x)
        h = self.lif1(h) if self.family == "snn" else T.relu(self.bn1(h))
        if keep_trace:
            self.trace["encoder"] = h.data
        h = self._pool(h)
        self._record("conv2", h)
        h = self.conv2(h)
        if self.attention is not None:
            h = self.attention(h)
            if keep_trace:
                self.trace["attention"] = self.attention.last_scores
        h = h + self._pool(residual)
        h = self.lif2(h) if self.family == "snn" else T.relu(self.bn2(h))
        h = T.flatten(self._pool(h))
        self._record("fc1", h)
        return self.fc2(self.fc1(h))

    def _record(self, name: str, h: Tensor) -> None:
        if self.family == "snn":
            self.spike_rates[name] = float(h.data.mean())
            self.trace[f"{name}.ones"] = np.array([h.data.sum(), h.data.size], dtype=np.float64)

    def layer_plan(self) -> list[LayerInfo]:
        """Static per-sample description of every layer, in execution order."""
        s = self.spec
        C, S, Tn = s.channels, s.pieces, s.steps
        snn = self.family == "snn"
        plan = [LayerInfo("conv1", "conv", (C, S, Tn), self.conv1, False)]
        if snn:
            plan.append(LayerInfo("lif1", s.neuron, (C, S, Tn), self.lif1, False))
        else:
            plan += [LayerInfo("bn1", "bn", (C, S, Tn), self.bn1, False), LayerInfo("relu1", "relu", (C, S, Tn), None, False)]
        plan.append(LayerInfo("pool1", "pool", (C, S, Tn), None, False))
        plan.append(LayerInfo("conv2", "conv", (C, S // 2, Tn // 2), self.conv2, snn))
        if self.attention is not None:
            plan.append(LayerInfo("attention", s.attention, (C, S // 2, Tn // 2), self.attention, False))
        plan.append(LayerInfo("residual_pool", "pool", (C, S, Tn), None, False))
        plan.append(LayerInfo("residual_add", "add", (C, S // 2, Tn // 2), None, False))
        if snn:
            plan.append(LayerInfo("lif2", s.neuron, (C, S // 2, Tn // 2), self.lif2, False))
        else:
            plan += [
                LayerInfo("bn2", "bn", (C, S // 2, Tn // 2), self.bn2, False),
                LayerInfo("relu2", "relu", (C, S // 2, Tn // 2), None, False),
            ]
        plan.append(LayerInfo("pool2", "pool", (C, S // 2, Tn // 2), None, False))
        plan.append(LayerInfo("fc1", "fc", (s.flat_features,), self.fc1, snn))
        plan.append(LayerInfo("fc2", "fc", (s.hidden,), self.fc2, False))
        return plan

    def ac_layers(self) -> list[str]:
        return [info.name for info in self.layer_plan() if info.ac]


def build_snn(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(replace(spec, family="snn"), seed)


def build_cnn(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(replace(spec, family="cnn"), seed)


def forward(model: Network, batch, mode: str = "infer") -> Tensor:
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.train(mode == "train")
    if mode == "infer":
        with T.no_grad():
            return model(T.as_tensor(batch))
    return model(T.as_tensor(batch))


# -- CNN -> SNN transfer ------------------------------------------------------

_BN_SLOTS = {"bn1.": "lif1.bn.", "bn2.": "lif2.bn."}


def _structural(spec: NetworkSpec) -> dict:
    keep = ("channels", "pieces", "steps", "attention", "d1", "d2", "d", "encoder_kernel", "classifier_kernel", "hidden", "classes")
    return {k: getattr(spec, k) for k in keep}


def transfer_weights_cnn_to_snn(cnn: Network, snn: Network) -> None:
    """Copy conv/linear/attention parameters and BN statistics into the SNN."""
    if cnn.family != "cnn" or snn.family != "snn":
        raise TransferError("transfer needs a CNN source and an SNN target")
    a, b = _structural(cnn.spec), _structural(snn.spec)
    for key in a:
        if a[key] != b[key]:
            raise TransferError(f"spec mismatch at {key!r}: cnn={a[key]!r}, snn={b[key]!r}")
    target = snn.state_dict()
    updates = {}
    for name, value in cnn.state_dict().items():
        mapped = name
        for src, dst in _BN_SLOTS.items():
            if name.startswith(src):
                mapped = dst + name[len(src):]
        if mapped not in target:
            raise TransferError(f"first mismatched layer: {name!r} has no slot in the SNN")
        if target[mapped].shape != value.shape:
            raise TransferError(f"first mismatched layer: {name!r} shape {value.shape} vs {target[mapped].shape}")
        updates[mapped] = value
    missing_bn = [k for k in target if k not in updates and ".bn." in k]
    if missing_bn:
        raise TransferError(f"first mismatched layer: {missing_bn[0]!r} not provided by the CNN")
    merged = dict(target)
    merged.update({k: np.array(v, copy=True) for k, v in updates.items()})
    snn.load_state_dict(merged)


def parameter_count(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


# -- checkpoints --------------------------------------------------------------


def save_model(path, model: Network, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    entries = dict(model.state_dict())
    for k, v in (extra or {}).items():
        entries[k] = v
    info = {"spec": model.spec.to_dict(), "format": "nisnn-model"}
    info.update(meta or {})
    write_checkpoint(path, entries, info)


def load_model(path, seed: int = 0) -> tuple[Network, dict[str, np.ndarray], dict]:
    """Returns (model, non-model entries, meta)."""
    entries, meta = read_checkpoint(path)
    spec = NetworkSpec.from_dict(meta["spec"])
    model = Network(spec, seed)
    names = set(model.state_dict())
    model.load_state_dict({k: v for k, v in entries.items() if k in names})
    extra = {k: v for k, v in entries.items() if k not in names}
    return model, extra, meta
