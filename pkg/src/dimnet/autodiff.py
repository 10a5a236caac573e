"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends one entry to the active :class:`Tape`
when at least one of its inputs requires a gradient. :func:`backward` walks the
tape in reverse and accumulates into ``Tensor.grad``. Composite operations
(layer norm, GRU cell, segment softmax, ...) are built from the primitives so
their gradients come for free.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self) -> None:
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable) -> None:
        self.entries.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes = [Tape()]
        self.enabled = [True]
        self.branches = None


_state = _State()


@contextlib.contextmanager
def branch_recorder():
    """Fingerprint which side of every kink (RReLU sign, segment extreme winner,
    clip saturation) the enclosed forward pass lands on."""
    outer = _state.branches
    _state.branches = digest = hashlib.blake2b(digest_size=16)
    try:
        yield digest
    finally:
        _state.branches = outer


def _note_branch(mask: np.ndarray) -> None:
    if _state.branches is not None:
        _state.branches.update(np.packbits(mask))


def current_tape() -> Tape:
    return _state.tapes[-1]


@contextlib.contextmanager
def new_tape():
    """Run a block on a fresh tape (nested evaluations do not interfere)."""
    tape = Tape()
    _state.tapes.append(tape)
    _state.enabled.append(True)
    try:
        yield tape
    finally:
        _state.tapes.pop()
        _state.enabled.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require gradients."""
    _state.enabled.append(False)
    try:
        yield
    finally:
        _state.enabled.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    needs = _state.enabled[-1] and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        current_tape().record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.divide, a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward)


_EW = {"add": add, "sub": sub, "mul": mul}


def ew(op: str, a, b) -> Tensor:
    """Elementwise ``add``/``sub``/``mul`` with scalar broadcasting."""
    try:
        fn = _EW[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced numpy indexing; the gradient scatters back with ``np.add.at``."""
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not tensors")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(np.array(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat of {tensors[0].shape} and {t.shape} along axis {axis}")

    def backward(g):
        lo = 0
        for t in tensors:
            hi = lo + t.shape[ax]
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])
            lo = hi

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[x] for x in axis]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Square root whose derivative at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        _accumulate(a, np.where(out > 0, g / (2.0 * safe), 0.0))

    return _make(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -a.data))

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; entries outside ``[lo, hi]`` receive no gradient."""
    inside = (a.data >= lo) & (a.data <= hi)
    _note_branch(inside)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0


def rrelu(
    x: Tensor,
    mode: str = "eval",
    lower: float = RRELU_LOWER,
    upper: float = RRELU_UPPER,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Randomized leaky ReLU.

    Negative entries are scaled by a slope drawn from ``U[lower, upper]`` in
    ``"train"`` mode and by the midpoint in ``"eval"`` mode.
    """
    if not 0 < lower <= upper < 1:
        raise ContractError(f"rrelu bounds must satisfy 0 < lower <= upper < 1, got {lower}, {upper}")
    if mode == "train":
        if rng is None:
            raise ContractError("train-mode rrelu needs an rng")
        slope = rng.uniform(lower, upper, size=x.shape)
    elif mode == "eval":
        slope = (lower + upper) / 2.0
    else:
        raise ValueError(f"unknown rrelu mode {mode!r}")
    nonneg = x.data >= 0
    _note_branch(nonneg)
    factor = np.where(nonneg, 1.0, slope)

    def backward(g):
        _accumulate(x, g * factor)

    return _make(x.data * factor, (x,), backward)


# ---------------------------------------------------------------------------
# segment (scatter) primitives used by message passing and attention


def index_add(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Row-wise scatter-sum: ``out[index[i]] += src[i]`` for an ``n``-row output."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n,) + src.shape[1:])
    np.add.at(out, index, src.data)

    def backward(g):
        _accumulate(src, g[index])

    return _make(out, (src,), backward)


def _segment_extreme(src: Tensor, index: np.ndarray, n: int, take_max: bool) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if src.shape[0] and (np.bincount(index, minlength=n) == 0).any():
        raise ContractError("every segment needs at least one row")
    fill = -np.inf if take_max else np.inf
    out = np.full((n,) + src.shape[1:], fill)
    (np.maximum if take_max else np.minimum).at(out, index, src.data)
    if _state.branches is not None:
        _note_branch(src.data == out[index])

    def backward(g):
        # gradient goes to the first row attaining the extreme in each segment/column
        rows = src.shape[0]
        hit = src.data == out[index]
        order = np.arange(rows).reshape((-1,) + (1,) * (src.ndim - 1))
        cand = np.where(hit, order, rows)
        first = np.full(out.shape, rows, dtype=np.int64)
        np.minimum.at(first, index, cand)
        _accumulate(src, np.where(cand == first[index], g[index], 0.0))

    return _make(out, (src,), backward)


def segment_max(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    return _segment_extreme(src, index, n, take_max=True)


def segment_min(src: Tensor, index: np.ndarray, n: int) -> Tensor:
    return _segment_extreme(src, index, n, take_max=False)


def segment_mean(src: Tensor, index: np.ndarray, n: int, counts: np.ndarray | None = None) -> Tensor:
    """Per-segment mean; empty segments give zero. ``counts`` may be precomputed."""
    if counts is None:
        counts = np.bincount(np.asarray(index, dtype=np.int64), minlength=n)
    counts = np.maximum(counts, 1).astype(np.float64).reshape((n,) + (1,) * (src.ndim - 1))
    return index_add(src, index, n) / counts


def segment_softmax(scores: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    index = np.asarray(index, dtype=np.int64)
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, index, scores.data)
    # the shift is a per-segment constant, so it carries no gradient
    e = exp(scores - shift[index])
    return e / index_add(e, index, n)[index]


# ---------------------------------------------------------------------------
# composite layers


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects [n x c] with c >= 1, got {x.shape}")
    shifted = x - x.data.max(axis=1, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardization with population variance, then affine."""
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def mean_pool(rows: Sequence[Tensor]) -> Tensor:
    if len(rows) == 0:
        raise ContractError("mean_pool needs at least one row")
    stacked = concat([as_tensor(r).reshape(1, -1) for r in rows], axis=0)
    return stacked.mean(axis=0)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def gru_cell(h_prev: Tensor, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Gated recurrent unit over row batches.

    ``h' = (1 - z) * h_prev + z * tanh(x W + (r * h_prev) U + b)`` with update
    gate ``z`` and reset gate ``r``. ``params`` holds ``W_z, U_z, b_z, W_r,
    U_r, b_r, W_h, U_h, b_h``.
    """
    if h_prev.shape[-1] != params["U_z"].shape[0] or x.shape[-1] != params["W_z"].shape[0]:
        raise ShapeError(f"gru_cell got h {h_prev.shape}, x {x.shape}, W_z {params['W_z'].shape}")
    z = sigmoid(_affine(x, params["W_z"]) + _affine(h_prev, params["U_z"]) + params["b_z"])
    r = sigmoid(_affine(x, params["W_r"]) + _affine(h_prev, params["U_r"]) + params["b_r"])
    cand = tanh(_affine(x, params["W_h"]) + _affine(r * h_prev, params["U_h"]) + params["b_h"])
    return (1.0 - z) * h_prev + z * cand


def _affine(x: Tensor, w: Tensor) -> Tensor:
    if x.ndim == 1:
        return (x.reshape(1, -1) @ w).reshape(-1)
    return x @ w


# ---------------------------------------------------------------------------
# reverse sweep and gradient checking


def backward(objective: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf that influenced ``objective``.

    The tape is consumed: it is reset afterwards so the next forward pass
    starts clean.
    """
    if objective.size != 1:
        raise ContractError(f"backward needs a scalar objective, got shape {objective.shape}")
    tape = current_tape() if tape is None else tape
    if not objective.requires_grad:
        tape.reset()
        return
    objective.grad = np.ones_like(objective.data)
    for out, _inputs, fn in reversed(tape.entries):
        if out.grad is not None:
            fn(out.grad)
            out.grad = None  # intermediates release their buffers
    tape.reset()


MIN_FD_STEP = 1e-8


def gradient_errors(
    f: Callable[[], Tensor],
    leaves: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-6,
    coords: dict[str, np.ndarray] | None = None,
    order: int = 2,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per leaf.

    ``order=4`` uses the five-point stencil, whose O(eps^4) truncation error
    allows a larger step and therefore less cancellation error.

    ``eps`` is the largest step. When a step moves the forward pass across a
    kink (see :func:`branch_recorder`) the step is shrunk tenfold for that
    coordinate until both sides stay on the analytic pass's branch, down to
    ``MIN_FD_STEP``. ``coords`` optionally restricts the comparison to selected
    flat indices of a leaf; all coordinates are checked otherwise.
    """
    if order not in (2, 4):
        raise ContractError(f"stencil order must be 2 or 4, got {order}")
    if not isinstance(leaves, dict):
        leaves = {str(i): t for i, t in enumerate(leaves)}
    for t in leaves.values():
        t.zero_grad()
    with new_tape() as tape, branch_recorder() as rec:
        out = f()
        backward(out, tape)
    base = rec.digest()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def probe(flat, i, value):
        flat[i] = value
        with branch_recorder() as r:
            y = f().item()
        return y, r.digest() == base

    def difference(flat, i, orig, step):
        """Derivative estimate and whether every probe stayed on the base branch."""
        fp, a = probe(flat, i, orig + step)
        fm, b = probe(flat, i, orig - step)
        if order == 2:
            return (fp - fm) / (2.0 * step), a and b
        fp2, c = probe(flat, i, orig + 2 * step)
        fm2, d = probe(flat, i, orig - 2 * step)
        return (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * step), a and b and c and d

    errors = {}
    with no_grad():
        for name, t in leaves.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size) if coords is None or name not in coords else coords[name]
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                step = eps
                while True:
                    num, smooth = difference(flat, i, orig, step)
                    if smooth or step / 10 < MIN_FD_STEP:
                        break
                    step /= 10
                flat[i] = orig
                a = a_flat[i]
                worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
            errors[name] = worst
    return errors


def finite_difference_check(f: Callable[[], Tensor], leaves, eps: float = 1e-6, order: int = 2) -> float:
    """Max relative error over every coordinate of every leaf."""
    errs = gradient_errors(f, leaves, eps, order=order)
    return max(errs.values(), default=0.0)
