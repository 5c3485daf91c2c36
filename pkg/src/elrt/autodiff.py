"""Reverse-mode differentiation over a small, closed set of array ops.

A :class:`Tape` records every op whose inputs depend on a parameter leaf.
Nodes are appended in execution order, so the recording order is already a
topological order and :func:`backward` is a single reverse sweep.

Anything that is not a :class:`Node` (numpy arrays, Python scalars) enters a
computation as a constant. Ops whose inputs are all constants are evaluated
eagerly and return an untaped node, which lets the regularizers and layers be
used as plain numeric functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import as_tensor, col2im, default_dtype, im2col, verification_mode

GradientSet = Dict[str, np.ndarray]


class Node:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "key", "op")

    def __init__(self, value, tape=None, parents=(), vjp=None, key=None, op="const"):
        self.value = value
        self.tape = tape
        self.index = -1
        self.parents = parents
        self.vjp = vjp
        self.key = key
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, index={self.index})"


class Tape:
    """Records differentiable ops for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def param(self, key: str, value) -> Node:
        """Leaf node for a trainable tensor; reusing ``key`` returns the same leaf."""
        node = self._params.get(key)
        if node is not None:
            return node
        node = Node(as_tensor(value), self, key=key, op="param")
        self._append(node)
        self._params[key] = node
        return node

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop the recorded graph.

        Nodes point back at their tape, so a finished pass is a reference
        cycle holding every activation; the training loop calls this after each
        step instead of waiting for the cyclic collector. Node values survive.
        """
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
            node.tape = None
        self.nodes = []
        self._params = {}


def constant(value) -> Node:
    return Node(as_tensor(value))


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op: str, value, parents: Sequence[Node], vjp: Callable) -> Node:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("cannot combine nodes recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Node(value, op=op)
    return tape._append(Node(value, tape, tuple(parents), vjp, op=op))


def backward(tape: Tape, loss: Node) -> GradientSet:
    """Gradients of scalar ``loss`` for every parameter leaf it depends on.

    Parameters that do not influence the loss are absent from the result.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss.tape is None:
        return {}
    if loss.tape is not tape:
        raise ValueError("loss node was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    out: GradientSet = {}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.key is not None:
            out[node.key] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or parent.tape is None:
                continue
            if parent.index >= node.index:
                raise RuntimeError(f"tape order violated at node {node.index} ({node.op})")
            if pg.shape != parent.value.shape:
                raise RuntimeError(
                    f"{node.op} produced gradient of shape {pg.shape} "
                    f"for input of shape {parent.value.shape}"
                )
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _make("div", out, (a, b), vjp)


def scale(a, c: float) -> Node:
    a = lift(a)
    c = float(c)
    return _make("scale", a.value * a.value.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def square(a) -> Node:
    a = lift(a)
    av = a.value
    return _make("square", av * av, (a,), lambda g: (2 * g * av,))


def absolute(a) -> Node:
    a = lift(a)
    av = a.value
    return _make("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sqrt(a) -> Node:
    a = lift(a)
    out = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype),)

    return _make("sqrt", out, (a,), vjp)


def relu(a) -> Node:
    a = lift(a)
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0).astype(a.value.dtype), (a,),
                 lambda g: (g * mask,))


def transpose(a) -> Node:
    a = lift(a)
    if a.value.ndim != 2:
        raise ValueError(f"transpose expects 2-D input, got shape {a.value.shape}")
    return _make("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = lift(a)
    old = a.value.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    a = lift(a)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(a.value.sum(axis=axis)), (a,), vjp)


def mean(a, axis=None) -> Node:
    a = lift(a)
    count = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / count)


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2):
        raise ValueError(f"matmul expects (m,k)@(k,n) or (m,k)@(k,), got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul inner axis mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), vjp)


def frobenius_sq(a) -> Node:
    a = lift(a)
    av = a.value
    return _make("frobenius_sq", np.asarray(np.sum(av * av)), (a,), lambda g: (2 * g * av,))


def l2norm(a) -> Node:
    return sqrt(frobenius_sq(a))


def max_abs_row_sum(a) -> Node:
    """Infinity-induced matrix norm ``max_i sum_j |a_ij|``.

    The subgradient flows through the first row (lowest index) attaining the
    maximum; ``sign(0) = 0`` at kinks of ``|.|``.
    """
    a = lift(a)
    av = a.value
    if av.ndim != 2:
        raise ValueError(f"expected 2-D input, got shape {av.shape}")
    row_sums = np.abs(av).sum(axis=1)
    row = int(np.argmax(row_sums))

    def vjp(g):
        ga = np.zeros_like(av)
        ga[row] = g * np.sign(av[row])
        return (ga,)

    return _make("max_abs_row_sum", np.asarray(row_sums[row]), (a,), vjp)


# ---------------------------------------------------------------------------
# network ops


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Node:
    """Batched convolution, ``x`` (N, C_in, H, W) with ``w`` (C_in, C_out, K, K)."""
    x, w = lift(x), lift(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xv.shape}, {wv.shape}")
    if xv.shape[1] != wv.shape[0]:
        raise ValueError(f"input-channel axis mismatch: input {xv.shape[1]}, weight {wv.shape[0]}")
    n, c_in, h, wd = xv.shape
    c_out, k = wv.shape[1], wv.shape[2]
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"kernel {k} does not fit input {h}x{wd} with padding {padding}")
    cols = im2col(xv, k, stride, padding)
    w_mat = wv.transpose(1, 0, 2, 3).reshape(c_out, -1)
    y = (w_mat @ cols).reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)

    def vjp(g):
        g_mat = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g_mat @ cols.T).reshape(c_out, c_in, k, k).transpose(1, 0, 2, 3)
        gx = col2im(w_mat.T @ g_mat, xv.shape, k, stride, padding) if x.tape is not None else None
        return gx, np.ascontiguousarray(gw)

    return _make("conv2d", y, (x, w), vjp)


def mix_channels(x, m) -> Node:
    """1x1 convolution: ``y[n, r] = sum_p m[r, p] * x[n, p]`` for ``m`` of shape (R, P)."""
    x, m = lift(x), lift(m)
    xv, mv = x.value, m.value
    if mv.ndim != 2 or xv.ndim != 4 or xv.shape[1] != mv.shape[1]:
        raise ValueError(f"channel-mix mismatch: input {xv.shape}, matrix {mv.shape}")
    n, p, h, w = xv.shape
    flat = xv.reshape(n, p, h * w)
    y = np.matmul(mv, flat).reshape(n, mv.shape[0], h, w)

    def vjp(g):
        gf = g.reshape(n, mv.shape[0], h * w)
        gm = np.tensordot(gf, flat, axes=([0, 2], [0, 2]))
        gx = np.matmul(mv.T, gf).reshape(xv.shape) if x.tape is not None else None
        return gx, gm

    return _make("mix_channels", y, (x, m), vjp)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Node:
    """Per-channel batch normalization over (N, H, W) of an (N, C, H, W) input.

    In training mode batch statistics are used (biased variance) and the
    running statistics in ``state`` are updated with the unbiased variance.
    """
    x, gamma, beta = lift(x), lift(gamma), lift(beta)
    xv, gv, bv = x.value, gamma.value, beta.value
    c = xv.shape[1]
    shape = (1, c, 1, 1)
    if training:
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        mu = xv.mean(axis=(0, 2, 3))
        xc = xv - mu.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        unbiased = var * (m / max(m - 1, 1))
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    else:
        mu, var = state.running_mean, state.running_var
        xc = xv - mu.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(xv.dtype)
    xhat = xc * inv_std.reshape(shape)
    y = xhat * gv.reshape(shape) + bv.reshape(shape)

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gv.reshape(shape)
        if training:
            mean_g = gxhat.mean(axis=(0, 2, 3)).reshape(shape)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(shape)
            gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(shape)
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _make("batch_norm", y, (x, gamma, beta), vjp)


def global_avg_pool(x) -> Node:
    x = lift(x)
    xv = x.value
    n, c, h, w = xv.shape
    return _make("global_avg_pool", xv.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), xv.shape).copy(),))


def shortcut_pad(x, c_out: int, stride: int) -> Node:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    x = lift(x)
    xv = x.value
    n, c_in, h, w = xv.shape
    if c_out < c_in:
        raise ValueError(f"shortcut cannot shrink channels {c_in} -> {c_out}")
    lo = (c_out - c_in) // 2
    sub = xv[:, :, ::stride, ::stride]
    y = np.zeros((n, c_out) + sub.shape[2:], dtype=xv.dtype)
    y[:, lo : lo + c_in] = sub

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[:, :, ::stride, ::stride] = g[:, lo : lo + c_in]
        return (gx,)

    return _make("shortcut_pad", y, (x,), vjp)


def linear(x, w, b=None) -> Node:
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def cross_entropy(logits, labels) -> Node:
    """Mean softmax cross-entropy of (N, classes) logits against integer labels."""
    logits = lift(logits)
    lv = logits.value
    labels = np.asarray(labels)
    if lv.ndim != 2:
        raise ValueError(f"logits must be (N, classes), got {lv.shape}")
    if labels.shape != (lv.shape[0],):
        raise ValueError(f"expected {lv.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ValueError(f"label out of range [0, {lv.shape[1]})")
    n = lv.shape[0]
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return _make("cross_entropy", np.asarray(loss, dtype=lv.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    params: Dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params.values()), default=0.0)

    def __str__(self):
        lines = [
            f"{p.name:<24} checked={p.checked:<5d} max_rel_err={p.max_rel_error:.3e} "
            f"{'ok' if p.passed else 'FAIL'}"
            for p in self.params.values()
        ]
        return "\n".join(lines)


def grad_check(
    f: Callable[[Tape, Dict[str, Node]], Node],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int = 100,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences in float64.

    ``f(tape, nodes)`` must build a scalar from the parameter nodes. Tensors
    larger than ``max_elements`` are checked on a random subsample of that many
    entries. Relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with verification_mode():
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

        def evaluate(values) -> float:
            tape = Tape()
            nodes = {k: tape.param(k, v) for k, v in values.items()}
            return f(tape, nodes).item()

        tape = Tape()
        nodes = {k: tape.param(k, v) for k, v in base.items()}
        grads = backward(tape, f(tape, nodes))
        for name, value in base.items():
            analytic = grads.get(name, np.zeros_like(value))
            flat_idx = np.arange(value.size)
            if value.size > max_elements:
                flat_idx = rng.choice(value.size, size=max_elements, replace=False)
            worst = 0.0
            for idx in flat_idx:
                multi = np.unravel_index(idx, value.shape)
                plus = dict(base)
                minus = dict(base)
                plus[name] = value.copy()
                minus[name] = value.copy()
                plus[name][multi] += step
                minus[name][multi] -= step
                # divide by the step actually taken, not the nominal 2 * step
                taken = plus[name][multi] - minus[name][multi]
                numeric = (evaluate(plus) - evaluate(minus)) / taken
                a = float(analytic[multi])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            report.params[name] = ParamCheck(name, worst, len(flat_idx), worst <= tol)
    return report
