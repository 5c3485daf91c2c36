"""Low-rank training loop: SGD with momentum, cosine schedule, orthogonality penalty.

The model is built in Tucker-2 format up front and stays there; the loop only
updates the factors and cores in place of dense kernels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .data import Dataset, iterate_batches
from .models import BatchNorm2d, Network
from .ortho import RegConfig, RegKind, orthogonality_residual, regularizer


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.1
    epochs: int = 30
    lambda_d: float = 1e-3
    reg: RegConfig = field(default_factory=RegConfig)
    seed: int = 0
    bn_weight_decay: bool = True
    prefetch: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lambda_d < 0:
            raise ValueError(f"lambda_d must be >= 0, got {self.lambda_d}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["reg"] = {**out["reg"], "kind": self.reg.kind.value}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["reg"] = RegConfig(**d.get("reg", {}))
        return cls(**d)


METRIC_COLUMNS = ("epoch", "lr", "train_loss", "reg_loss", "test_acc", "mean_residual")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    reg_loss: float
    test_acc: float
    mean_residual: Optional[float]


@dataclass
class Metrics:
    """Per-epoch records. ``train_loss`` is the mean cross-entropy and
    ``reg_loss`` the mean weighted penalty, so their sum is the optimized loss."""

    records: List[EpochRecord] = field(default_factory=list)
    initial_residual: Optional[float] = None

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Metrics) and self.to_jsonl() == other.to_jsonl() \
            and self.initial_residual == other.initial_residual

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for rec in self.records:
            writer.writerow(["" if getattr(rec, c) is None else repr(getattr(rec, c)) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps({c: getattr(rec, c) for c in METRIC_COLUMNS}) + "\n"
                       for rec in self.records)

    def write(self, stem: str) -> Tuple[str, str]:
        paths = (f"{stem}.csv", f"{stem}.jsonl")
        with open(paths[0], "w", encoding="utf-8") as f:
            f.write(self.to_csv())
        with open(paths[1], "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())
        return paths


# ---------------------------------------------------------------------------
# loss


def _loss_terms(model: Network, x, labels, cfg: TrainConfig, tape: ad.Tape, training: bool = True):
    logits = model.forward(x, tape, training=training)
    ce = ad.cross_entropy(logits, labels)
    if cfg.lambda_d == 0 or cfg.reg.kind is RegKind.NONE:
        return ce, None
    terms = []
    for name, layer in model.tucker_layers().items():
        for key, value in layer.factor_matrices().items():
            terms.append(regularizer(tape.param(f"{name}.{key}", value), cfg.reg))
    if not terms:
        return ce, None
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ce, ad.scale(total, cfg.lambda_d)


def total_loss(model: Network, batch, cfg: TrainConfig, tape: Optional[ad.Tape] = None,
               training: bool = True) -> ad.Node:
    """Mean cross-entropy plus ``lambda_d`` times the penalty summed over every factor matrix."""
    x, labels = batch
    tape = tape if tape is not None else ad.Tape()
    ce, reg = _loss_terms(model, x, labels, cfg, tape, training)
    return ce if reg is None else ad.add(ce, reg)


# ---------------------------------------------------------------------------
# optimizer and schedule


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: Dict[str, np.ndarray],
             lr: float, cfg: TrainConfig, no_decay: Iterable[str] = ()):
    """One momentum-SGD step with weight decay folded into the gradient.

    ``v = momentum * v + g + weight_decay * theta``, ``theta = theta - lr * v``.
    Parameters missing from ``grads`` get a zero gradient. Returns new
    ``(params, state)`` dicts; the inputs are not modified.
    """
    skip = set(no_decay)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        d = theta.dtype.type
        step = np.zeros_like(theta) if g is None else g.astype(theta.dtype, copy=False)
        if cfg.weight_decay and name not in skip:
            step = step + d(cfg.weight_decay) * theta
        v = state.get(name)
        v = step if v is None else d(cfg.momentum) * v + step
        new_state[name] = v
        new_params[name] = theta - d(lr) * v
    return new_params, new_state


def cosine_lr(epoch: int, total: int, base_lr: float) -> float:
    if total < 1:
        raise ValueError("total epochs must be >= 1")
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total))


# ---------------------------------------------------------------------------
# loop


def mean_factor_residual(model: Network) -> Optional[float]:
    vals = [orthogonality_residual(a) for layer in model.tucker_layers().values()
            for a in layer.factor_matrices().values()]
    return float(np.mean(vals)) if vals else None


def evaluate(model: Network, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    correct = 0
    for x, y in iterate_batches(dataset.without_augmentation(), batch_size):
        correct += int(np.sum(np.argmax(model.logits(x), axis=1) == y))
    return correct / len(dataset)


def _no_decay_names(model: Network, cfg: TrainConfig):
    if cfg.bn_weight_decay:
        return ()
    return {f"{name}.{key}" for name, layer in model.layers.items() if isinstance(layer, BatchNorm2d)
            for key in layer.parameters()}


def train(model: Network, dataset: Dataset, cfg: TrainConfig, test: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None):
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD on a copy of ``model``.

    Returns ``(model, metrics)``; the momentum buffers are kept on the returned
    model as ``optimizer_state`` so a checkpoint can carry them. Test accuracy
    is measured on ``test`` when given, otherwise on the (unaugmented)
    training set.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    model = model.copy()
    shapes_before = {k: v.shape for k, v in model.named_parameters().items()}
    velocity: Dict[str, np.ndarray] = dict(model.optimizer_state)
    no_decay = _no_decay_names(model, cfg)
    metrics = Metrics(initial_residual=mean_factor_residual(model))
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        ce_sum = reg_sum = 0.0
        seen = 0
        for x, y in iterate_batches(dataset, cfg.batch_size, [cfg.seed, epoch], cfg.prefetch):
            tape = ad.Tape()
            ce, reg = _loss_terms(model, x, y, cfg, tape)
            loss = ce if reg is None else ad.add(ce, reg)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = ad.backward(tape, loss)
            tape.release()
            params, velocity = sgd_step(model.named_parameters(), grads, velocity, lr, cfg, no_decay)
            for name, value in params.items():
                model.set_parameter(name, value)
            n = len(y)
            ce_sum += ce.item() * n
            reg_sum += (0.0 if reg is None else reg.item()) * n
            seen += n
        acc = evaluate(model, test if test is not None else dataset)
        rec = EpochRecord(epoch, lr, ce_sum / seen, reg_sum / seen, acc, mean_factor_residual(model))
        metrics.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    shapes_after = {k: v.shape for k, v in model.named_parameters().items()}
    assert shapes_after == shapes_before, "parameter shapes changed during training"
    model.optimizer_state = velocity
    return model, metrics
