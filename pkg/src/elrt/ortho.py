"""Orthogonality regularizers for factor matrices.

All functions accept either a numpy array or a tape :class:`~elrt.autodiff.Node`.
With a node they record onto its tape and return a node; with an array they
return a plain float.

A factor matrix ``a`` is stored as (rank, channels), so the Gram residual
``a.T @ a - I`` is channels x channels and the row count is the rank used in
the ``rho / rank**2`` normalization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class RegKind(str, enum.Enum):
    NONE = "none"
    SO = "so"
    DSO = "dso"
    MC = "mc"
    SRIP = "srip"


@dataclass(frozen=True)
class RegConfig:
    kind: RegKind = RegKind.DSO
    rho: float = 1.0
    power_iters: int = 20
    power_tol: float = 1e-6

    def __post_init__(self):
        kind = self.kind.value if isinstance(self.kind, RegKind) else str(self.kind).lower()
        object.__setattr__(self, "kind", RegKind(kind))
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.power_iters < 1:
            raise ValueError(f"power_iters must be >= 1, got {self.power_iters}")


def _finish(node: ad.Node, taped: bool):
    return node if taped else node.item()


def _as_matrix(a) -> ad.Node:
    node = ad.lift(a)
    if node.value.ndim != 2:
        raise ValueError(f"expected a 2-D factor matrix, got shape {node.value.shape}")
    return node


def residual(a):
    """``a.T @ a - I``; returns an array for array input, a node for node input."""
    node = _as_matrix(a)
    n = node.value.shape[1]
    r = ad.sub(ad.matmul(ad.transpose(node), node), np.eye(n, dtype=node.value.dtype))
    return r if isinstance(a, ad.Node) else r.value


def _gram_residuals(node: ad.Node):
    m, n = node.value.shape
    eye_n = np.eye(n, dtype=node.value.dtype)
    eye_m = np.eye(m, dtype=node.value.dtype)
    col = ad.sub(ad.matmul(ad.transpose(node), node), eye_n)
    row = ad.sub(ad.matmul(node, ad.transpose(node)), eye_m)
    return col, row


def so(a, rho: float = 1.0):
    """Soft orthogonality: ``rho / rank**2 * ||a.T a - I||_F**2``."""
    node = _as_matrix(a)
    rank = node.value.shape[0]
    col, _ = _gram_residuals(node)
    return _finish(ad.scale(ad.frobenius_sq(col), rho / rank**2), isinstance(a, ad.Node))


def dso(a, rho: float = 1.0):
    """Double soft orthogonality: both Gram residuals, same normalization as :func:`so`."""
    node = _as_matrix(a)
    rank = node.value.shape[0]
    col, row = _gram_residuals(node)
    total = ad.add(ad.frobenius_sq(col), ad.frobenius_sq(row))
    return _finish(ad.scale(total, rho / rank**2), isinstance(a, ad.Node))


def mc(a, rho: float = 1.0):
    """Mutual coherence: ``rho`` times the max absolute row sum of ``a.T a - I``."""
    node = _as_matrix(a)
    col, _ = _gram_residuals(node)
    return _finish(ad.scale(ad.max_abs_row_sum(col), rho), isinstance(a, ad.Node))


def _start_vector(n: int, seed: int, dtype) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(n)
    return (v / np.linalg.norm(v)).astype(dtype)


def spectral_norm_power(s, iters: int = 20, tol: float = 1e-6, seed: int = 0):
    """Largest absolute eigenvalue of a symmetric matrix by power iteration.

    Each step applies ``s.T s`` (two products with ``s``), whose top
    eigenvalue is the squared spectral norm; eigenvalues of equal magnitude and
    opposite sign then cannot make the iterate oscillate. The estimate is
    ``||s v||`` for the final unit iterate ``v``. Iteration stops after
    ``iters`` steps or once successive Rayleigh quotients ``||s v||**2`` differ
    by at most ``tol``. With a node input every step is recorded on the tape,
    so the gradient is that of the unrolled iteration.
    """
    node = ad.lift(s)
    sv = node.value
    if sv.ndim != 2 or sv.shape[0] != sv.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {sv.shape}")
    n = sv.shape[0]
    if n == 0:
        raise ValueError("empty matrix has no spectral norm")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sym_tol = max(1e-8, 64 * np.finfo(sv.dtype).eps) * max(1.0, float(np.abs(sv).max()))
    if not np.allclose(sv, sv.T, rtol=0, atol=sym_tol):
        raise ValueError("power iteration requires a symmetric matrix")
    v = ad.constant(_start_vector(n, seed, sv.dtype))
    est = ad.l2norm(ad.matmul(node, v))
    prev_rq = est.item() ** 2
    for _ in range(iters):
        w = ad.matmul(node, ad.matmul(node, v))
        norm = ad.l2norm(w)
        if norm.item() == 0.0:
            break
        v = ad.div(w, norm)
        est = ad.l2norm(ad.matmul(node, v))
        rq = est.item() ** 2
        if abs(rq - prev_rq) <= tol:
            break
        prev_rq = rq
    return _finish(est, isinstance(s, ad.Node))


def srip(a, rho: float = 1.0, power_iters: int = 20, tol: float = 1e-6, seed: int = 0):
    """Spectral restricted isometry: ``rho`` times the spectral norm of ``a.T a - I``."""
    node = _as_matrix(a)
    col, _ = _gram_residuals(node)
    sigma = spectral_norm_power(col, power_iters, tol, seed)
    return _finish(ad.scale(sigma, rho), isinstance(a, ad.Node))


def regularizer(a, cfg: RegConfig):
    """Apply the regularizer selected by ``cfg`` (zero for ``NONE``)."""
    kind = cfg.kind
    if kind is RegKind.NONE:
        return ad.constant(0.0) if isinstance(a, ad.Node) else 0.0
    if kind is RegKind.SO:
        return so(a, cfg.rho)
    if kind is RegKind.DSO:
        return dso(a, cfg.rho)
    if kind is RegKind.MC:
        return mc(a, cfg.rho)
    return srip(a, cfg.rho, cfg.power_iters, cfg.power_tol)


def orthogonality_residual(a: np.ndarray) -> float:
    """Normalized residual ``||a.T a - I||_F / rank`` used for monitoring."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D factor matrix, got shape {a.shape}")
    r = a.T @ a - np.eye(a.shape[1])
    return float(np.linalg.norm(r) / a.shape[0])
