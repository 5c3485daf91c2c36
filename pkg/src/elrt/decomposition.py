"""Low-matrix-rank vs. low-tensor-rank approximation of convolution kernels.

Everything here runs in float64 regardless of the training precision: these
are analysis tools, not part of the training path.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tensor import ConvGeometry, matricize_kernel, mse
from .tucker import Tucker2Conv, reconstruct_kernel


def jacobi_eigh(s: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue;
    eigenvectors are the columns of the second array.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1 / math.hypot(t, 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def singular_values_oracle(m: np.ndarray) -> np.ndarray:
    """Singular values from Jacobi eigenvalues of the smaller Gram matrix, descending."""
    m = np.asarray(m, dtype=np.float64)
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    w, _ = jacobi_eigh(gram)
    return np.sqrt(np.clip(w, 0, None))


def truncated_svd_approx(m: np.ndarray, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not 1 <= r <= min(m.shape):
        raise ValueError(f"rank {r} out of [1, {min(m.shape)}]")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return (u[:, :r] * s[:r]) @ vt[:r]


def _leading_rows(unfolding: np.ndarray, r: int) -> np.ndarray:
    """Top-``r`` left singular vectors of ``unfolding``, returned as rows (r, n)."""
    u, _, _ = np.linalg.svd(unfolding, full_matrices=True)
    return u[:, :r].T.copy()


def _core(w, u1, u2):
    return np.einsum("pqij,ap,bq->abij", w, u1, u2, optimize=True)


def _fit(w: np.ndarray, core: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> float:
    # direct residual: ||w||^2 - ||core||^2 cancels badly near full rank
    norm_w = float(np.linalg.norm(w))
    if norm_w == 0:
        return 1.0
    w_hat = np.einsum("abij,ap,bq->pqij", core, u1, u2, optimize=True)
    return 1.0 - float(np.linalg.norm(w - w_hat)) / norm_w


def hooi_tucker2(w: np.ndarray, rank1: int, rank2: int, max_iters: int = 50, tol: float = 1e-8,
                 geom: Optional[ConvGeometry] = None, full_output: bool = False):
    """Tucker-2 approximation of a (C_in, C_out, K, K) kernel over the two channel modes.

    Factors start from the truncated HOSVD and are refined by higher-order
    orthogonal iteration until the fit ``1 - ||w - w_hat|| / ||w||`` improves by
    less than ``tol``. Factor rows are orthonormal. With ``full_output`` the
    per-iteration fit trace (HOSVD first) is returned as well.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError(f"expected a 4-D kernel, got shape {w.shape}")
    c_in, c_out, k, _ = w.shape
    if not 1 <= rank1 <= c_in:
        raise ValueError(f"rank1={rank1} out of [1, {c_in}]")
    if not 1 <= rank2 <= c_out:
        raise ValueError(f"rank2={rank2} out of [1, {c_out}]")
    geom = geom or ConvGeometry(c_in, c_out, k, 1, (k - 1) // 2)

    u1 = _leading_rows(w.reshape(c_in, -1), rank1)
    u2 = _leading_rows(w.transpose(1, 0, 2, 3).reshape(c_out, -1), rank2)
    core = _core(w, u1, u2)
    trace = [_fit(w, core, u1, u2)]
    for _ in range(max_iters):
        y = np.einsum("pqij,bq->pbij", w, u2, optimize=True)
        u1 = _leading_rows(y.reshape(c_in, -1), rank1)
        z = np.einsum("pqij,ap->aqij", w, u1, optimize=True)
        u2 = _leading_rows(z.transpose(1, 0, 2, 3).reshape(c_out, -1), rank2)
        core = _core(w, u1, u2)
        trace.append(_fit(w, core, u1, u2))
        if trace[-1] - trace[-2] < tol:
            break
    layer = Tucker2Conv(u1, core, u2, geom)
    return (layer, trace) if full_output else layer


def hosvd_tucker2(w: np.ndarray, rank1: int, rank2: int) -> Tucker2Conv:
    """Truncated HOSVD (the HOOI starting point) on its own."""
    return hooi_tucker2(w, rank1, rank2, max_iters=0)


@dataclass(frozen=True)
class BudgetMatch:
    param_budget: int
    matrix_rank: int
    tucker_ranks: tuple


def matrix_cost(c_in: int, c_out: int, k: int, r: int) -> int:
    return r * (c_out + c_in * k * k)


def tucker_cost(c_in: int, c_out: int, k: int, r1: int, r2: int) -> int:
    return r1 * c_in + r1 * r2 * k * k + r2 * c_out


def match_budget(c_in: int, c_out: int, k: int, budget: int) -> Optional[BudgetMatch]:
    """Largest feasible ranks for both formats under a parameter budget.

    Matrix rank: the largest ``r <= min(C_out, C_in K^2)`` within budget.
    Tucker ranks: among maximal pairs (neither rank can be raised without
    exceeding the budget), minimize ``|r1/C_in - r2/C_out|``, then maximize
    ``r1 + r2``, then prefer the smaller ``r1``. Ranking by ``r1 + r2`` first
    would always push one rank to its channel count, since the core cost is
    bilinear. Returns ``None`` when either format cannot fit even at rank 1.
    """
    r_max = min(c_out, c_in * k * k)
    r = min(r_max, budget // (c_out + c_in * k * k))

    def fits(r1, r2):
        return r1 <= c_in and r2 <= c_out and tucker_cost(c_in, c_out, k, r1, r2) <= budget

    best = None
    for r1 in range(1, c_in + 1):
        for r2 in range(1, c_out + 1):
            if not fits(r1, r2):
                break
            if fits(r1 + 1, r2) or fits(r1, r2 + 1):
                continue
            key = (abs(r1 / c_in - r2 / c_out), -(r1 + r2), r1)
            if best is None or key < best[0]:
                best = (key, (r1, r2))
    if r < 1 or best is None:
        return None
    return BudgetMatch(budget, r, best[1])


@dataclass
class StudyRow:
    budget: int
    matrix_rank: Optional[int]
    tucker_r1: Optional[int]
    tucker_r2: Optional[int]
    matrix_mse: Optional[float]
    tucker_mse: Optional[float]
    note: str = ""

    @property
    def skipped(self) -> bool:
        return self.matrix_mse is None


def approx_error_study(w: np.ndarray, budgets: Sequence[int], max_iters: int = 50,
                       tol: float = 1e-8) -> List[StudyRow]:
    """MSE of matrix-SVD and Tucker-2 approximations of ``w`` at matched budgets."""
    if not budgets:
        raise ValueError("need at least one budget")
    w = np.asarray(w, dtype=np.float64)
    c_in, c_out, k, _ = w.shape
    m = matricize_kernel(w)
    rows = []
    for budget in budgets:
        match = match_budget(c_in, c_out, k, int(budget))
        if match is None:
            note = f"budget {budget} below the rank-1 cost of one of the formats"
            warnings.warn(note)
            rows.append(StudyRow(int(budget), None, None, None, None, None, note))
            continue
        m_hat = truncated_svd_approx(m, match.matrix_rank)
        r1, r2 = match.tucker_ranks
        layer = hooi_tucker2(w, r1, r2, max_iters, tol)
        rows.append(StudyRow(int(budget), match.matrix_rank, r1, r2,
                             mse(m, m_hat), mse(w, reconstruct_kernel(layer))))
    return rows


STUDY_COLUMNS = ("budget", "matrix_rank", "tucker_r1", "tucker_r2", "matrix_mse", "tucker_mse")


def study_to_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STUDY_COLUMNS)
    for row in rows:
        writer.writerow(["" if getattr(row, c) is None else getattr(row, c) for c in STUDY_COLUMNS])
    return buf.getvalue()


def planted_tucker_kernel(c_in: int, c_out: int, k: int, rank1: int, rank2: int,
                          noise: float = 0.1, seed=None) -> np.ndarray:
    """Random exact Tucker-(rank1, rank2) kernel plus i.i.d. Gaussian noise.

    ``noise`` is the noise Frobenius norm relative to the signal's.
    """
    rng = np.random.default_rng(seed)
    u1 = np.linalg.qr(rng.standard_normal((c_in, rank1)))[0].T
    u2 = np.linalg.qr(rng.standard_normal((c_out, rank2)))[0].T
    core = rng.standard_normal((rank1, rank2, k, k))
    signal = np.einsum("abij,ap,bq->pqij", core, u1, u2)
    eps = rng.standard_normal(signal.shape)
    eps *= noise * np.linalg.norm(signal) / np.linalg.norm(eps)
    return signal + eps
