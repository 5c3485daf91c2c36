"""Multiply-add accounting for dense and Tucker-2 convolutions.

Per layer, with kernel size ``D``, channels ``S -> T``, output ``H' x W'`` and
Tucker ranks ``R1, R2``::

    dense      A = D^2 S T H' W'
    factorized B = S R1 H' W' + D^2 R1 R2 H' W' + T R2 H' W'

The model-level inference reduction is ``sum(A) / sum(B)``; undecomposed
layers contribute ``A`` to both sums. All ratios are formed as exact rationals
and rounded once, so equal rationals produce bit-identical floats.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

METHODS = ("dense", "pruning", "lowrank-comp", "growefficient", "backsparse", "elrt")


@dataclass(frozen=True)
class LayerGeometry:
    d: int
    s: int
    t: int
    h_out: int
    w_out: int
    r1: Optional[int] = None
    r2: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        for key in ("d", "s", "t", "h_out", "w_out"):
            if getattr(self, key) < 1:
                raise ValueError(f"{self.name or 'layer'}: {key} must be positive")
        if (self.r1 is None) != (self.r2 is None):
            raise ValueError(f"{self.name or 'layer'}: r1 and r2 must be given together")
        if self.r1 is not None and (self.r1 < 1 or self.r2 < 1):
            raise ValueError(f"{self.name or 'layer'}: ranks must be positive")

    @property
    def factorized(self) -> bool:
        return self.r1 is not None

    def dense_params(self) -> int:
        return self.d * self.d * self.s * self.t

    def factorized_params(self) -> int:
        if not self.factorized:
            return self.dense_params()
        return self.s * self.r1 + self.d * self.d * self.r1 * self.r2 + self.t * self.r2


def layer_flops(geom: LayerGeometry) -> tuple[int, int]:
    """(dense, factorized) multiply-adds; equal for a layer without ranks."""
    hw = geom.h_out * geom.w_out
    dense = geom.d * geom.d * geom.s * geom.t * hw
    if not geom.factorized:
        return dense, dense
    factorized = (geom.s * geom.r1 + geom.d * geom.d * geom.r1 * geom.r2 + geom.t * geom.r2) * hw
    return dense, factorized


@dataclass
class LayerReport:
    name: str
    ranks: Optional[tuple]
    dense_flops: int
    factorized_flops: int
    dense_params: int
    factorized_params: int

    @property
    def reduction(self) -> float:
        return float(Fraction(self.dense_flops, self.factorized_flops))


@dataclass
class FlopsReport:
    layers: List[LayerReport] = field(default_factory=list)
    dense_flops: int = 0
    factorized_flops: int = 0
    dense_params: int = 0
    factorized_params: int = 0
    inference_reduction: float = 1.0
    param_reduction: float = 1.0
    training_reduction: float = 1.0

    def to_dict(self) -> dict:
        out = asdict(self)
        for layer, rep in zip(out["layers"], self.layers):
            layer["reduction"] = rep.reduction
        return out

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        header = f"{'layer':<22}{'ranks':>10}{'dense MACs':>14}{'factor MACs':>14}{'ratio':>8}"
        rows = [header, "-" * len(header)]
        for rep in self.layers:
            ranks = "dense" if rep.ranks is None else f"{rep.ranks[0]},{rep.ranks[1]}"
            rows.append(
                f"{rep.name:<22}{ranks:>10}{rep.dense_flops:>14,d}{rep.factorized_flops:>14,d}"
                f"{rep.reduction:>8.3f}"
            )
        rows.append("-" * len(header))
        rows.append(f"{'total':<22}{'':>10}{self.dense_flops:>14,d}{self.factorized_flops:>14,d}"
                    f"{self.inference_reduction:>8.3f}")
        rows.append(f"parameters: {self.dense_params:,d} -> {self.factorized_params:,d} "
                    f"({self.param_reduction:.3f}x reduction)")
        rows.append(f"inference FLOPs reduction: {self.inference_reduction:.4f}x")
        rows.append(f"training FLOPs reduction:  {self.training_reduction:.4f}x")
        return "\n".join(rows)


def model_reduction(layers: Sequence[LayerGeometry]) -> FlopsReport:
    """Aggregate per-layer counts into model-level inference/parameter/training ratios."""
    if not layers:
        raise ValueError("need at least one layer")
    report = FlopsReport()
    for i, geom in enumerate(layers):
        dense, fact = layer_flops(geom)
        report.layers.append(LayerReport(
            geom.name or f"layer{i}",
            (geom.r1, geom.r2) if geom.factorized else None,
            dense, fact, geom.dense_params(), geom.factorized_params(),
        ))
        report.dense_flops += dense
        report.factorized_flops += fact
        report.dense_params += geom.dense_params()
        report.factorized_params += geom.factorized_params()
    report.inference_reduction = float(Fraction(report.dense_flops, report.factorized_flops))
    report.param_reduction = float(Fraction(report.dense_params, report.factorized_params))
    report.training_reduction = training_reduction("elrt", report.dense_flops, report.factorized_flops)
    assert report.training_reduction == report.inference_reduction
    return report


def training_reduction(method: str, f_d, f_other=None, pretrain_epochs=None, finetune_epochs=None) -> float:
    """Training-FLOPs reduction, backward pass costed at twice the forward pass.

    ``f_d`` is the dense forward cost; ``f_other`` is the sparse (``f_S``) or
    low-rank (``f_L``) forward cost depending on ``method``. Pruning and
    low-rank compression also need the pre-training and fine-tuning epoch
    counts.
    """
    method = method.lower()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    fd = Fraction(f_d)
    if fd <= 0:
        raise ValueError("f_d must be positive")
    if method == "dense":
        return float((fd + 2 * fd) / (fd + 2 * fd))
    if f_other is None:
        raise ValueError(f"method {method!r} needs the compact forward cost")
    fo = Fraction(f_other)
    if fo <= 0:
        raise ValueError("forward costs must be positive")
    if method in ("pruning", "lowrank-comp"):
        if pretrain_epochs is None or finetune_epochs is None:
            raise ValueError(f"method {method!r} needs pretrain_epochs and finetune_epochs")
        t, k = Fraction(pretrain_epochs), Fraction(finetune_epochs)
        if t <= 0 or k <= 0:
            raise ValueError("epoch counts must be positive")
        return float(3 * fd * t / (3 * fd * t + 3 * fo * k))
    if method == "growefficient":
        return float((fd + 2 * fd) / (fo + 2 * fd))
    if method == "backsparse":
        return float((fd + 2 * fd) / (2 * fo + 2 * fo))
    return float((fd + 2 * fd) / (fo + 2 * fo))


def resnet_cifar_geometry(depth: int = 20, width: float = 1.0, ranks=None, input_hw: int = 32,
                          in_channels: int = 3, classes: int = 10) -> List[LayerGeometry]:
    """Layer geometry of the CIFAR ResNet (option-A shortcuts, which cost nothing).

    ``ranks`` is an optional :class:`~elrt.models.RankConfig`; listed layers get
    Tucker ranks, keep-dense entries and unlisted layers stay dense.
    """
    if depth < 8 or (depth - 2) % 6:
        raise ValueError(f"resnet depth must satisfy depth = 6n + 2, got {depth}")
    entries = dict(ranks.items()) if ranks is not None else {}
    n_blocks = (depth - 2) // 6
    widths = [max(1, int(round(c * width))) for c in (16, 32, 64)]
    out: List[LayerGeometry] = []
    seen = set()

    def add(name, d, s, t, hw):
        rk = entries.get(name)
        seen.add(name)
        out.append(LayerGeometry(d, s, t, hw, hw, *(rk if rk else (None, None)), name=name))

    hw = input_hw
    add("conv1", 3, in_channels, widths[0], hw)
    c_in = widths[0]
    for stage, c in enumerate(widths, start=1):
        for b in range(n_blocks):
            stride = 2 if (stage > 1 and b == 0) else 1
            hw = (hw + 2 - 3) // stride + 1
            add(f"layer{stage}.{b}.conv1", 3, c_in, c, hw)
            add(f"layer{stage}.{b}.conv2", 3, c, c, hw)
            c_in = c
    out.append(LayerGeometry(1, c_in, classes, 1, 1, name="linear"))
    unknown = set(entries) - seen
    if unknown:
        raise KeyError(f"rank config names unknown layers: {sorted(unknown)}")
    return out
