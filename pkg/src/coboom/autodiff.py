"""Tape-based reverse-mode automatic differentiation over float64 arrays.

The operation set is small and closed: matrix product, 2-d convolution,
nearest-neighbour 2x upsampling, elementwise arithmetic, scalar
reductions, shape moves, row-wise softmax, a gradient gate
(``stop_gradient``), an embedding row gather, and a fused sigmoid
cross-entropy.  Every model in this package is composed from these.

Design points:

* All values are float64.  Precision is the acceptance basis here, not
  throughput.
* Every operation checks its output for NaN/Inf and raises
  ``NumericError`` instead of letting poison propagate.
* ``backward`` replays the tape in topological order.  Gradients
  accumulate across calls; clearing them (``zero_grad``) is an explicit,
  separate step, so nothing is double-counted silently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array with an optional gradient buffer and backward record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._bw: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- sugar ------------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap_like(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap_like(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def norm(self) -> "Tensor":
        return l2_norm(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into every tracked ancestor's grad.

        ``self`` must be a scalar built from tracked operations.  Repeated
        calls keep accumulating; use ``zero_grad`` to reset.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any gradient-tracked tensor")
        topo = _toposort(self)
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            _check_finite(g, f"grad:{node._op}")
            if node._bw is not None:
                node._bw(g)


def _wrap_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(ref.shape, float(value)))


def _toposort(root: Tensor) -> list[Tensor]:
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: Array, parents: Sequence[Tensor], op: str,
          bw: Callable[[Array], None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bw = bw
    else:
        out._parents = ()
        out._bw = None
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    """Explicit gradient reset for a parameter collection."""
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} expects matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g: Array) -> None:
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g: Array) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g: Array) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")

    def bw(g: Array) -> None:
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), "div", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g: Array) -> None:
        _accum(a, g * c)

    return _make(a.data * c, (a,), "scale", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bw(g: Array) -> None:
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", bw)


# Freeze support for finite-difference audits: a loss containing
# stop_gradient is, by definition, differentiated with the gated values held
# constant.  Central differences must therefore evaluate the loss with those
# values pinned at their baseline, or they would measure a different function
# than the one backward() differentiates.  ``grad_check`` captures every
# stop_gradient output on the analytic pass and replays it during the
# perturbed evaluations; call order is well-defined because loss functions
# are required to be deterministic.
_SG_MODE: str | None = None
_SG_BUFFER: list[Array] | None = None
_SG_CURSOR: int = 0


@contextmanager
def _sg_mode(mode: str, buffer: list[Array]):
    global _SG_MODE, _SG_BUFFER, _SG_CURSOR
    prev = (_SG_MODE, _SG_BUFFER, _SG_CURSOR)
    _SG_MODE, _SG_BUFFER, _SG_CURSOR = mode, buffer, 0
    try:
        yield buffer
    finally:
        _SG_MODE, _SG_BUFFER, _SG_CURSOR = prev


def sg_capture(buffer: list[Array]):
    """Record every stop_gradient output (in call order) into ``buffer``."""
    return _sg_mode("capture", buffer)


def sg_replay(buffer: list[Array]):
    """Make stop_gradient return the recorded baseline values instead."""
    return _sg_mode("replay", buffer)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values; contributes zero gradient to all ancestors of ``a``.

    The returned tensor aliases the input buffer; computed values are never
    mutated in place, so this is safe.
    """
    global _SG_CURSOR
    if _SG_MODE == "capture":
        _SG_BUFFER.append(a.data)
        return Tensor(a.data)
    if _SG_MODE == "replay":
        if _SG_CURSOR >= len(_SG_BUFFER):
            raise ContractError("stop_gradient replay ran past the captured sequence")
        frozen = _SG_BUFFER[_SG_CURSOR]
        _SG_CURSOR += 1
        if frozen.shape != a.data.shape:
            raise ContractError(
                f"stop_gradient replay shape mismatch: {frozen.shape} vs {a.data.shape}")
        return Tensor(frozen)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(a, np.full(a.shape, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), "sum", bw)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g: Array) -> None:
        _accum(a, np.full(a.shape, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), "mean", bw)


def l2_norm(a: Tensor) -> Tensor:
    n = math.sqrt(float((a.data * a.data).sum()))

    def bw(g: Array) -> None:
        if n > 0.0:
            _accum(a, (float(g) / n) * a.data)
        else:
            # subgradient at the origin: zero
            _accum(a, np.zeros_like(a.data))

    return _make(np.asarray(n), (a,), "l2_norm", bw)


# ---------------------------------------------------------------------------
# shape moves
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} ({a.size} values) to {shape}")

    def bw(g: Array) -> None:
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got shape {a.shape}")

    def bw(g: Array) -> None:
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), "transpose", bw)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_last needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last expects matching leading dims, got {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=-1), tuple(parts),
                 "concat_last", bw)


# ---------------------------------------------------------------------------
# linear algebra / attention support
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul expects (m,k)@(k,n), got {a.shape} and {b.shape}")

    def bw(g: Array) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-d tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g: Array) -> None:
        _accum(a, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, (a,), "softmax_rows", bw)


def take_rows(m: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds into the source."""
    if m.data.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d tensor, got shape {m.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("take_rows indices must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ContractError(
            f"take_rows index out of range for {m.shape[0]} rows: {int(idx.min())}..{int(idx.max())}")

    def bw(g: Array) -> None:
        gm = np.zeros_like(m.data)
        np.add.at(gm, idx, g)
        _accum(m, gm)

    return _make(m.data[idx].copy(), (m,), "take_rows", bw)


# ---------------------------------------------------------------------------
# convolution and upsampling
# ---------------------------------------------------------------------------

def _im2col(xp: Array, k: int, stride: int, ho: int, wo: int) -> Array:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(dcols: Array, c: int, hp: int, wp: int, k: int, stride: int,
            ho: int, wo: int) -> Array:
    dxp = np.zeros((c, hp, wp), dtype=np.float64)
    d = dcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution of a CxHxW input with C_out x C_in x k x k kernels."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects CxHxW input and OxCxkxk kernels, "
                             f"got {x.shape} and {w.shape}")
    c_in, h, wdt = x.shape
    c_out, c_k, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernels must be square, got {kh}x{kw}")
    if c_k != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {c_in}, kernels expect {c_k}")
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {b.shape}")
    stride = int(stride)
    pad = int(pad)
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wdt + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be {ho}x{wo} for input {h}x{wdt}, kernel {k}, "
            f"stride {stride}, pad {pad}")

    hp, wp = h + 2 * pad, wdt + 2 * pad
    xp = np.zeros((c_in, hp, wp), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wdt] = x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(c_out, c_in * k * k)
    out = (w2 @ cols).reshape(c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g: Array) -> None:
        g2 = g.reshape(c_out, ho * wo)
        _accum(w, (g2 @ cols.T).reshape(w.shape))
        dcols = w2.T @ g2
        dxp = _col2im(dcols, c_in, hp, wp, k, stride, ho, wo)
        _accum(x, dxp[:, pad:pad + h, pad:pad + wdt])
        if b is not None:
            _accum(b, g2.sum(axis=1))

    return _make(out, parents, "conv2d", bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling of a CxHxW map by a factor of 2."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample2x expects a CxHxW tensor, got shape {x.shape}")
    c, h, w = x.shape

    def bw(g: Array) -> None:
        _accum(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _make(np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2), (x,), "upsample2x", bw)


# ---------------------------------------------------------------------------
# fused classification loss
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy, numerically stable for large |logits|."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits target shape {y.shape} != logits {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g: Array) -> None:
        sig = 1.0 / (1.0 + np.exp(-z))
        _accum(logits, (float(g) / n) * (sig - y))

    return _make(np.asarray(per.mean()), (logits,), "bce_with_logits", bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Analytic-vs-central-difference comparison over a parameter set.

    Relative errors use |a - n| / max(|a|, |n|, 1e-8).
    """

    max_rel_error: float
    worst_param: str
    worst_index: int
    worst_analytic: float
    worst_numeric: float
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn: Callable[[], Tensor],
               params: Mapping[str, Tensor] | Sequence[tuple[str, Tensor]],
               eps: float = 1e-4) -> GradReport:
    """Compare backward() gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call and must be deterministic (this is verified with two baseline
    evaluations).  ``eps`` must lie in [1e-6, 1e-3].  Values passing through
    stop_gradient are pinned at their baseline during the perturbed
    evaluations, matching the operator's differentiation semantics.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"grad_check eps must be in [1e-6, 1e-3], got {eps}")
    if not isinstance(params, Mapping):
        params = dict(params)
    if not params:
        raise ContractError("grad_check needs at least one parameter")

    base_a = float(loss_fn().data)
    base_b = float(loss_fn().data)
    if base_a != base_b:
        raise ContractError(
            f"loss_fn is not deterministic: {base_a!r} vs {base_b!r} on identical inputs")

    for p in params.values():
        p.grad = None
    frozen: list[Array] = []
    with sg_capture(frozen):
        loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradReport(max_rel_error=0.0, worst_param="", worst_index=-1,
                        worst_analytic=0.0, worst_numeric=0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with sg_replay(frozen):
                up = float(loss_fn().data)
            flat[i] = orig - eps
            with sg_replay(frozen):
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = _rel_err(float(a_flat[i]), numeric)
            if err > worst:
                worst = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = name
                report.worst_index = i
                report.worst_analytic = float(a_flat[i])
                report.worst_numeric = numeric
        report.per_param[name] = worst
    return report
