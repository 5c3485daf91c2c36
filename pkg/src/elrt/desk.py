"""The small-scale regularizer ablation: width-0.25 ResNet-20 on an MNIST subset.

The rank table is the 1.98x ResNet-20 table scaled to width 0.25 (bundled as
``resnet20-w0.25-desk``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from .data import Dataset
from .models import apply_rank_config, build_resnet_cifar, builtin_rank_config
from .ortho import RegConfig
from .trainer import EpochRecord, Metrics, TrainConfig, train

DESK_RANKS = "resnet20-w0.25-desk"
DESK_WIDTH = 0.25
DESK_DEPTH = 20


def desk_model(seed: int, input_shape=(1, 28, 28), classes: int = 10):
    c, h, _ = input_shape
    model = build_resnet_cifar(DESK_DEPTH, DESK_WIDTH, classes, seed, in_channels=c, input_hw=h)
    return apply_rank_config(model, builtin_rank_config(DESK_RANKS), seed)


@dataclass
class RunResult:
    reg: str
    seed: int
    metrics: Metrics

    @property
    def final_acc(self) -> float:
        return self.metrics.final.test_acc

    @property
    def residual_ratio(self) -> float:
        return self.metrics.final.mean_residual / self.metrics.initial_residual


def run_desk(reg: str, seed: int, train_set: Dataset, test_set: Dataset, epochs: int = 30,
             lambda_d: float = 1e-3, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> RunResult:
    model = desk_model(seed, train_set.input_shape, train_set.classes)
    cfg = TrainConfig(epochs=epochs, lambda_d=lambda_d, reg=RegConfig(reg), seed=seed)
    _, metrics = train(model, train_set, cfg, test_set, on_epoch)
    return RunResult(reg, seed, metrics)


def run_ablation(regs: Iterable[str], seeds: Iterable[int], train_set: Dataset, test_set: Dataset,
                 epochs: int = 30, lambda_d: float = 1e-3, log: Optional[Callable[[str], None]] = None
                 ) -> Dict[str, List[RunResult]]:
    out: Dict[str, List[RunResult]] = {}
    for reg in regs:
        for seed in seeds:
            res = run_desk(reg, seed, train_set, test_set, epochs, lambda_d)
            out.setdefault(reg, []).append(res)
            if log is not None:
                log(f"{reg:>5} seed {seed}: acc {res.final_acc:.4f} "
                    f"residual {res.metrics.initial_residual:.4f} -> {res.metrics.final.mean_residual:.4f}")
    return out


def summarize(results: Dict[str, List[RunResult]]) -> str:
    lines = [f"{'reg':>5} {'mean acc':>9} {'accs':>26} {'residual ratios':>24}"]
    for reg, runs in results.items():
        accs = " ".join(f"{r.final_acc:.4f}" for r in runs)
        ratios = " ".join(f"{r.residual_ratio:.3f}" for r in runs)
        lines.append(f"{reg:>5} {np.mean([r.final_acc for r in runs]):>9.4f} {accs:>26} {ratios:>24}")
    return "\n".join(lines)
