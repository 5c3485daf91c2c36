"""Network builders, rank configurations and their application.

Models keep a flat, ordered registry of named layers (``conv1``,
``layer1.0.conv1``, ``layer1.0.bn1``, ..., ``linear``); parameter names are the
layer name plus a suffix (``.weight``, ``.u1``, ``.core``, ``.u2``, ``.bias``).
"""

from __future__ import annotations

import copy
import re
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .tensor import ConvGeometry, default_dtype, xavier_uniform_init
from .tucker import DenseConv, Tucker2Conv, check_ranks

RankPair = Tuple[int, int]
KEEP_DENSE = None


def layer_rng(seed: int, name: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), salt])


class BatchNorm2d:
    def __init__(self, channels: int):
        dtype = default_dtype()
        self.weight = np.ones(channels, dtype=dtype)
        self.bias = np.zeros(channels, dtype=dtype)
        self.state = ad.BatchNormState.fresh(channels, dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_parameter(self, key, value):
        setattr(self, key, value)

    def set_buffer(self, key, value):
        setattr(self.state, key, value)

    def forward(self, x, tape=None, prefix="", training=False):
        if tape is not None:
            gamma = tape.param(f"{prefix}weight", self.weight)
            beta = tape.param(f"{prefix}bias", self.bias)
        else:
            gamma, beta = self.weight, self.bias
        return ad.batch_norm(x, gamma, beta, self.state, training)


class Linear:
    def __init__(self, in_features: int, out_features: int, rng=None):
        self.weight = xavier_uniform_init((out_features, in_features), in_features, out_features, rng)
        self.bias = np.zeros(out_features, dtype=default_dtype())

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def set_parameter(self, key, value):
        setattr(self, key, value)

    def forward(self, x, tape=None, prefix=""):
        if tape is not None:
            w = tape.param(f"{prefix}weight", self.weight)
            b = tape.param(f"{prefix}bias", self.bias)
        else:
            w, b = self.weight, self.bias
        return ad.linear(x, w, b)


ConvLayer = Union[DenseConv, Tucker2Conv]


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "resnet"
    depth: int = 20
    width: float = 1.0
    classes: int = 10
    in_channels: int = 3
    input_hw: int = 32
    shortcut: str = "A"

    def __post_init__(self):
        if self.arch not in ("resnet", "mnist_cnn"):
            raise ValueError(f"unknown architecture family {self.arch!r}")
        if self.arch == "resnet" and (self.depth < 8 or (self.depth - 2) % 6):
            raise ValueError(f"resnet depth must satisfy depth = 6n + 2, got {self.depth}")
        if self.width <= 0:
            raise ValueError(f"width multiplier must be > 0, got {self.width}")
        if self.shortcut not in ("A", "B"):
            raise ValueError(f"shortcut must be 'A' or 'B', got {self.shortcut!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _channels(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


class Network:
    """Base class: ordered layer registry plus forward/parameter plumbing."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layers: Dict[str, object] = {}
        self.rank_config = RankConfig()
        self.optimizer_state: Dict[str, np.ndarray] = {}

    # -- registry ---------------------------------------------------------
    def conv_layers(self) -> Dict[str, ConvLayer]:
        return {k: v for k, v in self.layers.items() if isinstance(v, (DenseConv, Tucker2Conv))}

    def tucker_layers(self) -> Dict[str, Tucker2Conv]:
        return {k: v for k, v in self.layers.items() if isinstance(v, Tucker2Conv)}

    def named_parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            for key, value in layer.parameters().items():
                out[f"{name}.{key}"] = value
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            if isinstance(layer, BatchNorm2d):
                for key, value in layer.buffers().items():
                    out[f"{name}.{key}"] = value
        return out

    def set_parameter(self, full_name: str, value: np.ndarray) -> None:
        name, key = full_name.rsplit(".", 1)
        self.layers[name].set_parameter(key, value)

    def set_buffer(self, full_name: str, value: np.ndarray) -> None:
        name, key = full_name.rsplit(".", 1)
        self.layers[name].set_buffer(key, value)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for k in params:
            if state[k].shape != params[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {params[k].shape}")
            self.set_parameter(k, np.array(state[k], dtype=params[k].dtype))
        for k in buffers:
            self.set_buffer(k, np.array(state[k], dtype=buffers[k].dtype))

    @property
    def param_count(self) -> int:
        return int(np.sum([v.size for v in self.named_parameters().values()]))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- forward helpers ---------------------------------------------------
    def _conv(self, name, x, tape):
        return self.layers[name].forward(x, tape, prefix=f"{name}.")

    def _bn(self, name, x, tape, training):
        return self.layers[name].forward(x, tape, prefix=f"{name}.", training=training)

    def _linear(self, name, x, tape):
        return self.layers[name].forward(x, tape, prefix=f"{name}.")

    def forward(self, x, tape: Optional[ad.Tape] = None, training: bool = False) -> ad.Node:
        raise NotImplementedError

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode logits (batch norm uses running statistics)."""
        return self.forward(x, None, training=False).value

    def layer_geometries(self):
        """Per-layer FLOPs geometry in registry order (convolutions, then the classifier)."""
        from .flops import LayerGeometry

        out = []
        for name, layer in self.layers.items():
            if isinstance(layer, (DenseConv, Tucker2Conv)):
                g = layer.geom
                ranks = layer.ranks if isinstance(layer, Tucker2Conv) else (None, None)
                out.append(LayerGeometry(g.k, g.c_in, g.c_out, g.h_out, g.w_out, *ranks, name=name))
            elif isinstance(layer, Linear):
                t, s = layer.weight.shape
                out.append(LayerGeometry(1, s, t, 1, 1, name=name))
        return out


class ResNetCifar(Network):
    """CIFAR-style ResNet: 3x3 stem, three stages of basic blocks, GAP, linear head."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__(spec)
        n_blocks = (spec.depth - 2) // 6
        widths = [_channels(c, spec.width) for c in (16, 32, 64)]
        hw = spec.input_hw
        self._add_conv("conv1", ConvGeometry(spec.in_channels, widths[0], 3, 1, 1, hw, hw), seed)
        self.layers["bn1"] = BatchNorm2d(widths[0])
        self.blocks = []
        c_in = widths[0]
        for stage, c in enumerate(widths, start=1):
            for b in range(n_blocks):
                stride = 2 if (stage > 1 and b == 0) else 1
                prefix = f"layer{stage}.{b}"
                g1 = ConvGeometry(c_in, c, 3, stride, 1, hw, hw)
                hw = g1.h_out
                self._add_conv(f"{prefix}.conv1", g1, seed)
                self.layers[f"{prefix}.bn1"] = BatchNorm2d(c)
                self._add_conv(f"{prefix}.conv2", ConvGeometry(c, c, 3, 1, 1, hw, hw), seed)
                self.layers[f"{prefix}.bn2"] = BatchNorm2d(c)
                needs_shortcut = stride != 1 or c_in != c
                if needs_shortcut and spec.shortcut == "B":
                    in_hw = hw * stride
                    self._add_conv(f"{prefix}.shortcut",
                                   ConvGeometry(c_in, c, 1, stride, 0, in_hw, in_hw), seed)
                    self.layers[f"{prefix}.shortcut_bn"] = BatchNorm2d(c)
                self.blocks.append((prefix, c, stride, needs_shortcut))
                c_in = c
        self.layers["linear"] = Linear(c_in, spec.classes, layer_rng(seed, "linear"))

    def _add_conv(self, name, geom, seed):
        self.layers[name] = DenseConv.init(geom, layer_rng(seed, name), name)

    def forward(self, x, tape=None, training=False):
        out = ad.relu(self._bn("bn1", self._conv("conv1", x, tape), tape, training))
        for prefix, c, stride, needs_shortcut in self.blocks:
            y = ad.relu(self._bn(f"{prefix}.bn1", self._conv(f"{prefix}.conv1", out, tape), tape, training))
            y = self._bn(f"{prefix}.bn2", self._conv(f"{prefix}.conv2", y, tape), tape, training)
            if not needs_shortcut:
                sc = out
            elif self.spec.shortcut == "A":
                sc = ad.shortcut_pad(out, c, stride)
            else:
                sc = self._bn(f"{prefix}.shortcut_bn", self._conv(f"{prefix}.shortcut", out, tape),
                              tape, training)
            out = ad.relu(ad.add(y, sc))
        return self._linear("linear", ad.global_avg_pool(out), tape)


class MnistCNN(Network):
    """Two strided 3x3 convolutions (with BN + ReLU) and a linear classifier."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__(spec)
        c1, c2 = _channels(16, spec.width), _channels(32, spec.width)
        hw = spec.input_hw
        g1 = ConvGeometry(spec.in_channels, c1, 3, 2, 1, hw, hw)
        g2 = ConvGeometry(c1, c2, 3, 2, 1, g1.h_out, g1.w_out)
        self.layers["conv1"] = DenseConv.init(g1, layer_rng(seed, "conv1"), "conv1")
        self.layers["bn1"] = BatchNorm2d(c1)
        self.layers["conv2"] = DenseConv.init(g2, layer_rng(seed, "conv2"), "conv2")
        self.layers["bn2"] = BatchNorm2d(c2)
        self._flat = c2 * g2.h_out * g2.w_out
        self.layers["linear"] = Linear(self._flat, spec.classes, layer_rng(seed, "linear"))

    def forward(self, x, tape=None, training=False):
        y = ad.relu(self._bn("bn1", self._conv("conv1", x, tape), tape, training))
        y = ad.relu(self._bn("bn2", self._conv("conv2", y, tape), tape, training))
        y = ad.reshape(y, (y.value.shape[0], self._flat))
        return self._linear("linear", y, tape)


def build_resnet_cifar(depth: int = 20, width_mult: float = 1.0, classes: int = 10, seed: int = 0,
                       in_channels: int = 3, input_hw: int = 32, shortcut: str = "A") -> ResNetCifar:
    if depth < 8 or (depth - 2) % 6:
        raise ValueError(f"resnet depth must satisfy depth = 6n + 2 (e.g. 20, 56), got {depth}")
    spec = ModelSpec("resnet", depth, width_mult, classes, in_channels, input_hw, shortcut)
    return ResNetCifar(spec, seed)


def build_mnist_cnn(width_mult: float = 1.0, classes: int = 10, seed: int = 0,
                    in_channels: int = 1, input_hw: int = 28) -> MnistCNN:
    spec = ModelSpec("mnist_cnn", 2, width_mult, classes, in_channels, input_hw)
    return MnistCNN(spec, seed)


def build_model(spec: ModelSpec, seed: int = 0) -> Network:
    if spec.arch == "resnet":
        return ResNetCifar(spec, seed)
    return MnistCNN(spec, seed)


# ---------------------------------------------------------------------------
# rank configuration


class RankConfigError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


_NAME = re.compile(r"^[A-Za-z_]\w*(\.\w+)*$")
_PAIR = re.compile(r"^\(?\s*(\d+)\s*,\s*(\d+)\s*\)?$")


@dataclass
class RankConfig:
    """Ordered mapping from layer name to a rank pair or :data:`KEEP_DENSE`."""

    entries: Dict[str, Optional[RankPair]] = field(default_factory=dict)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name):
        return self.entries[name]

    def items(self):
        return self.entries.items()

    def __eq__(self, other):
        return isinstance(other, RankConfig) and list(self.entries.items()) == list(other.entries.items())

    def serialize(self) -> str:
        lines = []
        for name, ranks in self.entries.items():
            lines.append(f"{name} = N/A" if ranks is None else f"{name} = {ranks[0]},{ranks[1]}")
        return "\n".join(lines) + ("\n" if lines else "")


def parse_rank_config(text: str) -> RankConfig:
    """Parse ``name = r1,r2`` / ``name = N/A`` lines; ``#`` starts a comment."""
    entries: Dict[str, Optional[RankPair]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RankConfigError(f"expected 'name = r1,r2' or 'name = N/A', got {raw.strip()!r}", lineno)
        name, value = (part.strip() for part in line.split("=", 1))
        if not _NAME.match(name):
            raise RankConfigError(f"invalid layer name {name!r}", lineno)
        if name in entries:
            raise RankConfigError(f"duplicate layer {name!r}", lineno)
        if value.upper() == "N/A":
            entries[name] = KEEP_DENSE
            continue
        m = _PAIR.match(value)
        if not m:
            raise RankConfigError(f"invalid rank value {value!r}", lineno)
        r1, r2 = int(m.group(1)), int(m.group(2))
        if r1 < 1 or r2 < 1:
            raise RankConfigError(f"ranks must be positive, got {r1},{r2}", lineno)
        entries[name] = (r1, r2)
    return RankConfig(entries)


def load_rank_config(path) -> RankConfig:
    with open(path, encoding="utf-8") as f:
        return parse_rank_config(f.read())


BUILTIN_CONFIGS = {
    "resnet20-flops1.98": "resnet20_flops198.txt",
    "resnet20-flops3.02": "resnet20_flops302.txt",
    "resnet20-params6.01": "resnet20_params601.txt",
    "resnet56-flops2.05": "resnet56_flops205.txt",
    "resnet56-flops2.52": "resnet56_flops252.txt",
    "resnet20-w0.25-desk": "resnet20_w025_desk.txt",
}


def builtin_rank_config(name: str) -> RankConfig:
    """One of the bundled rank tables (see :data:`BUILTIN_CONFIGS`)."""
    try:
        fname = BUILTIN_CONFIGS[name]
    except KeyError:
        raise KeyError(f"unknown built-in rank config {name!r}; choose from {sorted(BUILTIN_CONFIGS)}") from None
    return parse_rank_config(resources.files("elrt.configs").joinpath(fname).read_text("utf-8"))


def resolve_rank_config(ref: str) -> RankConfig:
    """A bundled config by name, or a rank-config file path."""
    if ref in BUILTIN_CONFIGS:
        return builtin_rank_config(ref)
    return load_rank_config(ref)


def apply_rank_config(model: Network, cfg: RankConfig, seed: int = 0) -> Network:
    """Copy of ``model`` with each configured convolution replaced by a fresh Tucker-2 layer.

    Layers are initialized from scratch (no decomposition of existing weights).
    Keep-dense entries and unlisted layers are left untouched.
    """
    convs = model.conv_layers()
    for name, ranks in cfg.items():
        if name not in convs:
            raise KeyError(f"rank config names unknown convolution {name!r}")
        if ranks is not None:
            check_ranks(convs[name].geom, ranks[0], ranks[1], name)
    out = model.copy()
    for name, ranks in cfg.items():
        if ranks is None:
            continue
        geom = convs[name].geom
        out.layers[name] = Tucker2Conv.init(geom, ranks[0], ranks[1], layer_rng(seed, name, 1), name)
    out.rank_config = RankConfig(dict(cfg.entries))
    return out


def scaled_rank_config(cfg: RankConfig, width: float, model: Network) -> RankConfig:
    """Scale a width-1 rank table to a narrower model, clipped to each layer's bounds."""
    convs = model.conv_layers()
    entries = {}
    for name, ranks in cfg.items():
        if ranks is None:
            entries[name] = None
            continue
        g = convs[name].geom
        r1 = min(max(1, int(round(ranks[0] * width))), g.c_in)
        r2 = min(max(1, int(round(ranks[1] * width))), g.c_out)
        entries[name] = (r1, r2)
    return RankConfig(entries)
