"""Dense tensor kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects. Training runs in float32; the
:func:`verification_mode` context switches every kernel to float64 so oracle
and gradient tests can use tight tolerances.

Axis conventions: conv weights are ``(C_in, C_out, K, K)``, activations are
``(C, H, W)`` or batched ``(N, C, H, W)``.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def verification_mode() -> Iterator[None]:
    """Run the enclosed block with all kernels in float64."""
    previous = default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_tensor(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or default_dtype())


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for one convolution.

    ``h_in``/``w_in`` may be left unset when a layer is built before its input
    resolution is known; ``output_size`` works for any input extent.
    """

    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    h_in: Optional[int] = None
    w_in: Optional[int] = None

    def __post_init__(self):
        for name in ("c_in", "c_out", "k", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.h_in is not None:
            self.output_size(self.h_in, self.w_in if self.w_in is not None else self.h_in)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        h_out = (h + 2 * self.padding - self.k) // self.stride + 1
        w_out = (w + 2 * self.padding - self.k) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ValueError(
                f"kernel {self.k} with padding {self.padding} does not fit input {h}x{w}"
            )
        return h_out, w_out

    @property
    def h_out(self) -> Optional[int]:
        if self.h_in is None:
            return None
        return self.output_size(self.h_in, self.w_in or self.h_in)[0]

    @property
    def w_out(self) -> Optional[int]:
        if self.w_in is None:
            return None
        return self.output_size(self.h_in or self.w_in, self.w_in)[1]

    def with_input(self, h: int, w: int) -> "ConvGeometry":
        return ConvGeometry(self.c_in, self.c_out, self.k, self.stride, self.padding, h, w)


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, geom: Optional[ConvGeometry]) -> None:
    if w.ndim != 4:
        raise ValueError(f"weight must be 4-D (C_in, C_out, K, K), got shape {w.shape}")
    if x.ndim != 4:
        raise ValueError(f"input must be (N, C, H, W), got shape {x.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel axes must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"input-channel axis mismatch: input has {x.shape[1]}, weight axis 0 has {w.shape[0]}"
        )
    if geom is None:
        return
    if geom.c_in != w.shape[0]:
        raise ValueError(f"input-channel axis: geometry says {geom.c_in}, weight has {w.shape[0]}")
    if geom.c_out != w.shape[1]:
        raise ValueError(f"output-channel axis: geometry says {geom.c_out}, weight has {w.shape[1]}")
    if geom.k != w.shape[2]:
        raise ValueError(f"kernel axis: geometry says {geom.k}, weight has {w.shape[2]}")
    if geom.h_in is not None and geom.h_in != x.shape[2]:
        raise ValueError(f"height axis: geometry says {geom.h_in}, input has {x.shape[2]}")
    if geom.w_in is not None and geom.w_in != x.shape[3]:
        raise ValueError(f"width axis: geometry says {geom.w_in}, input has {x.shape[3]}")


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into columns of shape (C*K*K, N*H'*W')."""
    n, c, h, w = x.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xc = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xc[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(c * k * k, n * h_out * w_out)


def col2im(cols: np.ndarray, x_shape: Sequence[int], k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into (N, C, H, W)."""
    n, c, h, w = x_shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(c, k, k, n, h_out, w_out)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[:, i, j]
    return out[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Batched zero-padded cross-correlation with a (C_in, C_out, K, K) kernel."""
    x = as_tensor(x)
    w = as_tensor(w)
    _check_conv_shapes(x, w, None)
    n, _, h, wd = x.shape
    c_out, k = w.shape[1], w.shape[2]
    h_out, w_out = ConvGeometry(w.shape[0], c_out, k, stride, padding).output_size(h, wd)
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        return np.einsum("pq,nphw->nqhw", w[:, :, 0, 0], xs, optimize=True)
    cols = im2col(x, k, stride, padding)
    w_mat = w.transpose(1, 0, 2, 3).reshape(c_out, -1)
    y = (w_mat @ cols).reshape(c_out, n, h_out, w_out)
    return y.transpose(1, 0, 2, 3)


def conv2d_direct(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Dense convolution of one (C_in, H, W) image or an (N, C_in, H, W) batch.

    ``y[q, h', w'] = sum_{p,i,j} w[p, q, i, j] * x[p, stride*h' + i - padding, ...]``
    with zero padding outside the input.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv_shapes(x, w, geom)
    y = conv2d(x, w, geom.stride, geom.padding)
    return y[0] if single else y


def matricize_kernel(w: np.ndarray) -> np.ndarray:
    """Flatten a (C_in, C_out, K, K) kernel into the (C_out, C_in*K*K) filter matrix."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise ValueError(f"expected a 4-D kernel, got {w.ndim}-D shape {w.shape}")
    c_in, c_out, k1, k2 = w.shape
    return w.transpose(1, 0, 2, 3).reshape(c_out, c_in * k1 * k2)


def dematricize_kernel(m: np.ndarray, c_in: int, k: int) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != c_in * k * k:
        raise ValueError(f"matrix of shape {m.shape} is not (C_out, {c_in}*{k}*{k})")
    return m.reshape(m.shape[0], c_in, k, k).transpose(1, 0, 2, 3)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).astype(np.result_type(a.dtype, b.dtype, default_dtype()), copy=False)
    return float(np.mean(d * d))


def xavier_uniform_init(shape, fan_in: int, fan_out: int, rng_seed=None) -> np.ndarray:
    """Uniform samples on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(default_dtype())
