"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable quantity in this package (GIN layers, attention filter,
projection head, contrastive losses) is built from the ops below. Ops
record onto a thread-local tape whenever gradients are enabled and at
least one input requires them; ``backward`` replays the tape once, in
reverse, and clears it.

Numeric contract: forward ops raise :class:`NumericError` if they produce
NaN/Inf from finite inputs (overflow is an error, never silently
propagated), ``log`` floors its argument at ``LOG_FLOOR``, and ``softmax``
subtracts the row max before exponentiating.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are not conformable for the requested op."""


class DomainError(ValueError):
    """Input is outside an op's mathematical domain (e.g. zero-vector cosine)."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class GradientError(RuntimeError):
    """Backward-pass contract violation (non-scalar loss, empty tape, ...)."""


class Tensor:
    """Dense float64 array participating in the differentiation graph.

    ``grad``, when populated, always matches ``data``'s shape. Tensors
    created by ops inherit ``requires_grad`` from their inputs; leaf
    tensors are immutable by convention once used in a forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray, borrowed: bool = True) -> None:
        if self.grad is None:
            # a borrowed array may alias the consumer's grad or another
            # tensor's buffer; a fresh one can be adopted outright
            self.grad = np.array(g, dtype=np.float64) if borrowed else g
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; scalars are accepted on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, rng: np.random.Generator | None = None,
              shape: tuple[int, ...] | None = None) -> Tensor:
    """Leaf tensor with gradients enabled.

    With ``rng`` and ``shape`` given, initializes Glorot-uniform:
    U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    """
    if rng is not None:
        if shape is None:
            raise ValueError("shape required for random initialization")
        if len(shape) >= 2:
            fan_in, fan_out = shape[-2], shape[-1]
        else:
            fan_in = fan_out = shape[0] if shape else 1
        a = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-a, a, size=shape)
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered op record; inputs of every entry precede it on the tape."""

    def __init__(self):
        # entries: (output tensor, [(input tensor, vjp), ...])
        self.records: list[tuple[Tensor, list]] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_state = threading.local()


def _tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation / data-only computation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def active_tape() -> Tape:
    """The calling thread's tape (mainly for tests and diagnostics)."""
    return _tape()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not arr.size:
        return
    # fast path: one reduction; a finite sum certifies finite entries.
    # Inf survives summation (Inf-Inf gives NaN), and NaN propagates, so a
    # non-finite sum is either real trouble or benign accumulator overflow;
    # min/max settle it without allocating a mask.
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not math.isfinite(total):
        if not (np.isfinite(arr.max()) and np.isfinite(arr.min())):
            raise NumericError(
                f"{op} produced non-finite values (overflow or invalid operand)")


def _record(data: np.ndarray, op: str, pairs: list[tuple[Tensor, object]]) -> Tensor:
    """Wrap an op result, recording vjps for inputs that require grad."""
    _check_finite(data, op)
    if _grad_enabled():
        live = [(t, vjp) for t, vjp in pairs if t.requires_grad]
        if live:
            out = Tensor(data, requires_grad=True)
            _tape().records.append((out, live))
            return out
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _ew(op_name: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"{op_name}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(_ew("add", np.add, a, b), "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(_ew("sub", np.subtract, a, b), "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    return _record(_ew("mul", np.multiply, a, b), "mul", [
        (a, lambda g: _unbroadcast(g * db, a.shape)),
        (b, lambda g: _unbroadcast(g * da, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    da, db = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _ew("div", np.divide, a, b)
    return _record(out, "div", [
        (a, lambda g: _unbroadcast(g / db, a.shape)),
        (b, lambda g: _unbroadcast(-g * da / (db * db), b.shape)),
    ])


# ---------------------------------------------------------------------------
# linear algebra


def _swap_last(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (3-D) operands broadcast numpy-style."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    da, db = a.data, b.data
    return _record(out, "matmul", [
        (a, lambda g: _unbroadcast(np.matmul(g, _swap_last(db)), a.shape)),
        (b, lambda g: _unbroadcast(np.matmul(_swap_last(da), g), b.shape)),
    ])


def linear(x, w, b=None) -> Tensor:
    """Fused x @ w + b for 2-D x; one op instead of matmul-then-add."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ w.data
    dx, dw = x.data, w.data
    pairs = [
        (x, lambda g: g @ dw.T),
        (w, lambda g: dx.T @ g),
    ]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match width {w.shape[1]}")
        out += b.data
        pairs.append((b, lambda g: g.sum(axis=0)))
    return _record(out, "linear", pairs)


def linear_pair(x1, x2, w, b=None) -> Tensor:
    """(x1 || x2) @ w + b without materializing the concatenation.

    ``w`` stacks the two blocks: rows [:x1_width] act on x1, the rest on x2.
    """
    x1, x2, w = _as_tensor(x1), _as_tensor(x2), _as_tensor(w)
    k = x1.shape[1]
    if x1.ndim != 2 or x2.ndim != 2 or x1.shape[0] != x2.shape[0]:
        raise ShapeError(f"linear_pair: row counts differ, {x1.shape} vs {x2.shape}")
    if w.ndim != 2 or w.shape[0] != k + x2.shape[1]:
        raise ShapeError(
            f"linear_pair: weight {w.shape} does not match widths {k}+{x2.shape[1]}")
    w_top, w_bot = w.data[:k], w.data[k:]
    out = x1.data @ w_top
    out += x2.data @ w_bot
    d1, d2 = x1.data, x2.data
    pairs = [
        (x1, lambda g: g @ w_top.T),
        (x2, lambda g: g @ w_bot.T),
        (w, lambda g: np.concatenate([d1.T @ g, d2.T @ g], axis=0)),
    ]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear_pair: bias {b.shape} does not match {w.shape[1]}")
        out += b.data
        pairs.append((b, lambda g: g.sum(axis=0)))
    return _record(out, "linear_pair", pairs)


def dot(a, b) -> Tensor:
    """Inner product of two 1-D vectors; returns a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    da, db = a.data, b.data
    return _record(np.dot(da, db), "dot", [
        (a, lambda g: g * db),
        (b, lambda g: g * da),
    ])


def cosine(a, b) -> Tensor:
    """Cosine similarity of two nonzero 1-D vectors; returns a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine expects equal-length vectors, got {a.shape} and {b.shape}")
    da, db = a.data, b.data
    na = float(np.linalg.norm(da))
    nb = float(np.linalg.norm(db))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DomainError("cosine of (near-)zero vector is undefined")
    c = float(np.dot(da, db)) / (na * nb)
    return _record(np.float64(c), "cosine", [
        (a, lambda g: g * (db / (na * nb) - c * da / (na * na))),
        (b, lambda g: g * (da / (na * nb) - c * db / (nb * nb))),
    ])


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    return _record(np.maximum(d, 0.0), "relu", [(x, lambda g: g * (d > 0))])


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d > 0, d, slope * d)
    return _record(out, "leaky_relu",
                   [(x, lambda g: g * np.where(d > 0, 1.0, slope))])


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _record(out, "sigmoid", [(x, lambda g: g * out * (1.0 - out))])


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _record(out, "exp", [(x, lambda g: g * out)])


def log(x) -> Tensor:
    """Natural log with the argument floored at LOG_FLOOR (flat below it)."""
    x = _as_tensor(x)
    floored = np.maximum(x.data, LOG_FLOOR)
    above = x.data >= LOG_FLOOR
    return _record(np.log(floored), "log",
                   [(x, lambda g: g * np.where(above, 1.0 / floored, 0.0))])


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - np.sum(g * out, axis=axis, keepdims=True))

    return _record(out, "softmax", [(x, vjp)])


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit norm; norms below NORM_FLOOR are
    clamped so near-zero slices map near zero instead of erroring."""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    n = np.maximum(norm, NORM_FLOOR)
    out = x.data / n
    floored = norm < NORM_FLOOR

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        full = (g - out * proj) / n
        return np.where(floored, g / n, full)

    return _record(out, "l2_normalize", [(x, vjp)])


# ---------------------------------------------------------------------------
# shape / reduction


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        pairs.append((t, vjp))
    return _record(out, "concat", pairs)


def _reduce(x, axis, keepdims, kind) -> Tensor:
    x = _as_tensor(x)
    fn = np.sum if kind == "sum" else np.mean
    out = fn(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            expanded = np.broadcast_to(g, shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            expanded = np.broadcast_to(g, shape)
        if kind == "mean":
            count = x.size if axis is None else shape[axis]
            return expanded / count
        return expanded

    return _record(out, kind, [(x, vjp)])


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, "sum")


def tmean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, "mean")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    orig = x.shape
    return _record(out, "reshape", [(x, lambda g: g.reshape(orig))])


def transpose(x, ax1: int = -2, ax2: int = -1) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.data, ax1, ax2)
    return _record(out, "transpose", [(x, lambda g: np.swapaxes(g, ax1, ax2))])


# ---------------------------------------------------------------------------
# indexing / structured ops (constant index arguments never receive grads)


def gather(x, indices) -> Tensor:
    """Select rows (axis 0). Backward scatter-adds, so repeats are fine."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return full

    return _record(out, "gather", [(x, vjp)])


def permute_rows(x, perm, inverse: np.ndarray | None = None) -> Tensor:
    """Reorder rows by a permutation; backward is the inverse permutation.

    Faster than :func:`gather` when indices are known to be a permutation.
    """
    x = _as_tensor(x)
    perm = np.asarray(perm, dtype=np.intp)

    def vjp(g):
        full = np.empty_like(g)
        full[perm] = g
        return full

    return _record(x.data[perm], "permute_rows", [(x, vjp)])


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[start:stop] = g
        return full

    return _record(x.data[start:stop].copy(), "slice_rows", [(x, vjp)])


def spmm(mat, x) -> Tensor:
    """Sparse (scipy CSR/CSC) times dense; the sparse factor is constant."""
    x = _as_tensor(x)
    if mat.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: {mat.shape} @ {x.shape} inner dims differ")
    out = mat @ x.data
    mat_t = mat.T.tocsr()
    return _record(out, "spmm", [(x, lambda g: mat_t @ g)])


def segment_softmax(x, starts: np.ndarray) -> Tensor:
    """Softmax over contiguous segments of a 1-D tensor.

    ``starts`` are segment start offsets (first must be 0); every segment
    is nonempty. Max-shifted for stability.
    """
    x = _as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"segment_softmax expects 1-D input, got {x.shape}")
    n = x.shape[0]
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.diff(np.append(starts, n))
    m = np.maximum.reduceat(x.data, starts)
    e = np.exp(x.data - np.repeat(m, counts))
    z = np.add.reduceat(e, starts)
    out = e / np.repeat(z, counts)

    def vjp(g):
        s = np.add.reduceat(out * g, starts)
        return out * (g - np.repeat(s, counts))

    return _record(out, "segment_softmax", [(x, vjp)])


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Repeated calls (over fresh forward passes)
    accumulate into existing grads; call ``zero_grad`` on parameters to
    reset. The tape is cleared after consumption.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor loss")
    if loss.ndim != 0 and loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if not loss.requires_grad:
        tape.clear()
        return
    loss.grad = np.ones_like(loss.data)
    for out, pairs in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        for t, vjp in pairs:
            r = vjp(g)
            if not isinstance(r, np.ndarray):
                r = np.asarray(r, dtype=np.float64)
            # identity pass-throughs and views alias other grads; anything
            # else is a freshly allocated array we can adopt without a copy
            t._accumulate(r, borrowed=(r is g or r.base is not None))
        out.grad = None  # every consumer already ran; free eagerly
    tape.clear()


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def state_dict(self) -> dict:
        return {
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, d: dict, params: dict[str, Tensor]) -> "AdamState":
        st = cls(params, d["beta1"], d["beta2"], d["eps"])
        st.step = d["step"]
        for k in st.m:
            st.m[k] = np.asarray(d["m"][k], dtype=np.float64).reshape(params[k].shape)
            st.v[k] = np.asarray(d["v"][k], dtype=np.float64).reshape(params[k].shape)
        return st


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, with decoupled weight decay.

    Mutates the parameter data and the state in place. All parameters
    must carry populated gradients.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(f"adam_step: missing gradients for {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
