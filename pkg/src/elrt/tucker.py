"""Tucker-2 convolution layers and their dense counterpart.

A Tucker-2 layer stores two channel factor matrices and a small core::

    u1   (rank1, C_in)           1x1 projection of the input channels
    core (rank1, rank2, K, K)    KxK convolution carrying stride/padding
    u2   (rank2, C_out)          1x1 expansion to the output channels

The dense kernel it represents is
``W[p, q, i, j] = sum_{r1, r2} core[r1, r2, i, j] * u1[r1, p] * u2[r2, q]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .tensor import ConvGeometry, as_tensor, conv2d_direct, xavier_uniform_init


def _param(tape: Optional[ad.Tape], key: str, value: np.ndarray):
    return tape.param(key, value) if tape is not None else value


def check_ranks(geom: ConvGeometry, rank1: int, rank2: int, name: str = "") -> None:
    where = f" for layer {name!r}" if name else ""
    if not 1 <= rank1 <= geom.c_in * geom.k * geom.k:
        raise ValueError(f"rank1={rank1} out of [1, {geom.c_in * geom.k * geom.k}]{where}")
    if not 1 <= rank2 <= geom.c_out:
        raise ValueError(f"rank2={rank2} out of [1, {geom.c_out}]{where}")


@dataclass
class DenseConv:
    w: np.ndarray
    geom: ConvGeometry
    name: str = ""

    def __post_init__(self):
        g = self.geom
        expected = (g.c_in, g.c_out, g.k, g.k)
        if self.w.shape != expected:
            raise ValueError(f"{self.name}: weight shape {self.w.shape} != {expected}")

    @classmethod
    def init(cls, geom: ConvGeometry, seed=None, name: str = "") -> "DenseConv":
        k2 = geom.k * geom.k
        w = xavier_uniform_init((geom.c_in, geom.c_out, geom.k, geom.k),
                                geom.c_in * k2, geom.c_out * k2, seed)
        return cls(w, geom, name)

    @property
    def param_count(self) -> int:
        return self.w.size

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.w}

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        if key != "weight":
            raise KeyError(key)
        self.w = value

    def forward(self, x, tape: Optional[ad.Tape] = None, prefix: str = "") -> ad.Node:
        w = _param(tape, f"{prefix}weight", self.w)
        return ad.conv2d(x, w, self.geom.stride, self.geom.padding)

    def dense_kernel(self) -> np.ndarray:
        return self.w


@dataclass
class Tucker2Conv:
    u1: np.ndarray
    core_g: np.ndarray
    u2: np.ndarray
    geom: ConvGeometry
    name: str = ""

    def __post_init__(self):
        g = self.geom
        r1, r2 = self.u1.shape[0], self.u2.shape[0]
        check_ranks(g, r1, r2, self.name)
        if self.u1.shape != (r1, g.c_in):
            raise ValueError(f"{self.name}: u1 shape {self.u1.shape} != ({r1}, {g.c_in})")
        if self.u2.shape != (r2, g.c_out):
            raise ValueError(f"{self.name}: u2 shape {self.u2.shape} != ({r2}, {g.c_out})")
        if self.core_g.shape != (r1, r2, g.k, g.k):
            raise ValueError(
                f"{self.name}: core shape {self.core_g.shape} != ({r1}, {r2}, {g.k}, {g.k})"
            )

    @classmethod
    def init(cls, geom: ConvGeometry, rank1: int, rank2: int, seed=None, name: str = "") -> "Tucker2Conv":
        """Xavier-uniform initialization of all three tensors from one seeded stream."""
        check_ranks(geom, rank1, rank2, name)
        rng = np.random.default_rng(seed)
        k2 = geom.k * geom.k
        u1 = xavier_uniform_init((rank1, geom.c_in), geom.c_in, rank1, rng)
        core = xavier_uniform_init((rank1, rank2, geom.k, geom.k), rank1 * k2, rank2 * k2, rng)
        u2 = xavier_uniform_init((rank2, geom.c_out), rank2, geom.c_out, rng)
        return cls(u1, core, u2, geom, name)

    @property
    def ranks(self) -> tuple[int, int]:
        return self.u1.shape[0], self.u2.shape[0]

    @property
    def param_count(self) -> int:
        r1, r2 = self.ranks
        g = self.geom
        return r1 * g.c_in + r1 * r2 * g.k * g.k + r2 * g.c_out

    def parameters(self) -> dict[str, np.ndarray]:
        return {"u1": self.u1, "core": self.core_g, "u2": self.u2}

    def factor_matrices(self) -> dict[str, np.ndarray]:
        return {"u1": self.u1, "u2": self.u2}

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        attr = {"u1": "u1", "core": "core_g", "u2": "u2"}[key]
        setattr(self, attr, value)

    def forward(self, x, tape: Optional[ad.Tape] = None, prefix: str = "") -> ad.Node:
        """Three-stage factorized forward pass on an (N, C_in, H, W) input."""
        u1 = _param(tape, f"{prefix}u1", self.u1)
        core = _param(tape, f"{prefix}core", self.core_g)
        u2 = _param(tape, f"{prefix}u2", self.u2)
        t1 = ad.mix_channels(x, u1)
        t2 = ad.conv2d(t1, core, self.geom.stride, self.geom.padding)
        return ad.mix_channels(t2, ad.transpose(u2))

    def dense_kernel(self) -> np.ndarray:
        return reconstruct_kernel(self)


def reconstruct_kernel(layer: Tucker2Conv) -> np.ndarray:
    """Dense (C_in, C_out, K, K) kernel represented by the factorized layer.

    Computed in the factors' own floating dtype, so float64 decompositions stay float64.
    """
    parts = (layer.core_g, layer.u1, layer.u2)
    dtype = np.result_type(*parts)
    if not np.issubdtype(dtype, np.floating):
        parts = tuple(as_tensor(p) for p in parts)
    return np.einsum("abij,ap,bq->pqij", *parts, optimize=True)


def forward(layer, x: np.ndarray) -> np.ndarray:
    """Evaluate ``layer`` on an (N, C_in, H, W) or (C_in, H, W) input without a tape."""
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != layer.geom.c_in:
        raise ValueError(
            f"input-channel axis mismatch: layer expects {layer.geom.c_in}, got shape {x.shape}"
        )
    y = layer.forward(x).value
    return y[0] if single else y


def init(geom: ConvGeometry, rank1: int, rank2: int, seed=None, name: str = "") -> Tucker2Conv:
    return Tucker2Conv.init(geom, rank1, rank2, seed, name)


def dense_reference(layer: Tucker2Conv, x: np.ndarray) -> np.ndarray:
    """Dense convolution with the reconstructed kernel (the equivalence check's other side)."""
    return conv2d_direct(x, reconstruct_kernel(layer), layer.geom)
