"""Dense float64 tensors with taped reverse-mode gradient accumulation.

Every numerical value in the package flows through :class:`Tensor`. Running
ops inside a ``with GradTape() as tape:`` block records one entry per op;
``backward(tape, loss)`` replays the records in reverse and accumulates
gradients into the ``grad`` arrays of the tensors that need them. Repeated
backward calls accumulate; call :func:`zero_grads` between steps.

Storage is row-major (C-contiguous) float64 throughout. Rank 0..3 is
supported; the model only ever needs rank <= 2 plus scalar losses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidCheckError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "zero_grads",
    "record_op",
    "matmul",
    "vecmat",
    "transpose",
    "add",
    "mul",
    "scale",
    "relu",
    "elementwise",
    "softmax_rows",
    "softmax_last",
    "layer_norm",
    "mean_rows",
    "mean_axis1",
    "sum_all",
    "first_rows",
    "stack_rows",
    "concat_cols",
    "bmm",
    "swap_last",
    "reshape",
    "tile_rows",
    "grad_check",
    "GradCheckReport",
]


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``needs_grad`` marks trainable parameters; op outputs inherit it from
    their inputs so backward can skip constants (input patches, dropout
    masks) entirely.
    """

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, needs_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max rank 3)")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"


def zero_grads(params: Sequence[Tensor]) -> None:
    """Zero (allocating if needed) the grad buffer of every given tensor."""
    for p in params:
        p.zero_grad()


@dataclass
class _OpRecord:
    out: Tensor
    inputs: tuple
    # maps d(loss)/d(out) to a tuple of d(loss)/d(input), None where skipped
    backward_fn: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of executed ops for one reverse pass.

    Use as a context manager; ops executed inside the block are recorded.
    Independent tapes are independent recordings (the active-tape stack is
    thread-local, so separate threads may run separate tapes in parallel).
    """

    def __init__(self):
        self._records: list[_OpRecord] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)


_TAPE_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPE_LOCAL, "stack", None)
    if stack is None:
        stack = _TAPE_LOCAL.stack = []
    return stack


def _active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
    """Record a custom op on the active tape, if any.

    ``backward_fn(out_grad)`` must return one gradient array (or None) per
    input, in order. Extension point for fused ops defined outside this
    module (e.g. the cross-entropy loss).
    """
    tape = _active_tape()
    if tape is not None and out.needs_grad:
        tape._records.append(_OpRecord(out, tuple(inputs), backward_fn))


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    The records are replayed exactly once each, in reverse recording order.
    Each call adds one full gradient into the grad buffers; use
    :func:`zero_grads` between optimizer steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced = {id(rec.out) for rec in tape._records}
    for rec in reversed(tape._records):
        out_adj = adjoints.get(id(rec.out))
        if out_adj is None:
            continue  # not on any path to the loss
        grads = rec.backward_fn(out_adj)
        for inp, g in zip(rec.inputs, grads):
            if g is None or not inp.needs_grad:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] += g
            else:
                adjoints[key] = np.array(g, dtype=np.float64, copy=True)
                tensors[key] = inp
    # only tape leaves (parameters, manual inputs) get their grad slot filled;
    # intermediates produced by recorded ops are transient
    for key, adj in adjoints.items():
        if key in produced:
            continue
        t = tensors[key]
        if t.needs_grad:
            t.ensure_grad()
            t.grad += adj


def _out(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, needs_grad=any(t.needs_grad for t in inputs))
    record_op(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B for rank-2 tensors; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ b.data.T if a.needs_grad else None
        gb = a.data.T @ g if b.needs_grad else None
        return ga, gb

    return _out(a.data @ b.data, (a, b), bwd)


def vecmat(v: Tensor, w: Tensor) -> Tensor:
    """y = v @ W for a rank-1 vector and rank-2 matrix."""
    if v.data.ndim != 1 or w.data.ndim != 2:
        raise ShapeError(f"vecmat needs (vector, matrix), got {v.shape} and {w.shape}")
    if v.shape[0] != w.shape[0]:
        raise ShapeError(f"vecmat inner dimensions disagree: {v.shape} @ {w.shape}")

    def bwd(g):
        gv = g @ w.data.T if v.needs_grad else None
        gw = np.outer(v.data, g) if w.needs_grad else None
        return gv, gw

    return _out(v.data @ w.data, (v, w), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _out(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with trailing-axis broadcast (e.g. matrix + bias row)."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.needs_grad else None
        gb = _unbroadcast(g, b.shape) if b.needs_grad else None
        return ga, gb

    return _out(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with trailing-axis broadcast."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.needs_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.needs_grad else None
        return ga, gb

    return _out(data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _out(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum (not where) so NaN propagates instead of being silently zeroed
    return _out(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "scale": scale}


def elementwise(op_tag: str, a: Tensor, b=None) -> Tensor:
    """Tag-dispatched elementwise op: 'add', 'mul', 'relu', 'scale'."""
    if op_tag not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_tag!r}")
    fn = _ELEMENTWISE[op_tag]
    return fn(a) if b is None else fn(a, b)


def _softmax_impl(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        # dX = Y * (g - sum(g * Y, last axis))
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _out(y, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    return _softmax_impl(x)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis of a rank-2 or rank-3 tensor."""
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"softmax_last needs a rank-2 or rank-3 tensor, got {x.shape}")
    return _softmax_impl(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift: gamma * x_hat + beta."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.needs_grad else None
        gbeta = g.sum(axis=lead) if beta.needs_grad else None
        if x.needs_grad:
            gx_hat = g * gamma.data
            gx = (
                inv
                / d
                * (
                    d * gx_hat
                    - gx_hat.sum(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
                )
            )
        else:
            gx = None
        return gx, ggamma, gbeta

    return _out(gamma.data * xhat + beta.data, (x, gamma, beta), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a rank-2 tensor; the global-average-pool primitive."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a rank-2 tensor, got {x.shape}")
    m = x.shape[0]
    return _out(x.data.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / m, x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    return _out(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def first_rows(table: Tensor, t: int) -> Tensor:
    """First ``t`` rows of a rank-2 tensor; backward scatters into those rows."""
    if table.data.ndim != 2:
        raise ShapeError(f"first_rows needs a rank-2 tensor, got {table.shape}")
    if not 0 < t <= table.shape[0]:
        raise ConfigError(f"requested {t} rows from a table of {table.shape[0]}")

    def bwd(g):
        full = np.zeros_like(table.data)
        full[:t] = g
        return (full,)

    return _out(table.data[:t].copy(), (table,), bwd)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a rank-2 tensor."""
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    width = rows[0].shape[0]
    for r in rows:
        if r.data.ndim != 1 or r.shape[0] != width:
            raise ShapeError(f"stack_rows rows must all be rank-1 of length {width}, got {r.shape}")

    def bwd(g):
        return tuple(g[i] if r.needs_grad else None for i, r in enumerate(rows))

    return _out(np.stack([r.data for r in rows]), tuple(rows), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on rank-3 tensors sharing the leading axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs rank-3 tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ b.data.swapaxes(1, 2) if a.needs_grad else None
        gb = a.data.swapaxes(1, 2) @ g if b.needs_grad else None
        return ga, gb

    return _out(a.data @ b.data, (a, b), bwd)


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes of a rank-3 tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"swap_last needs a rank-3 tensor, got {a.shape}")
    return _out(
        np.ascontiguousarray(a.data.swapaxes(1, 2)), (a,), lambda g: (g.swapaxes(1, 2),)
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    """Size-preserving reshape (row-major order unchanged)."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) into {shape}")
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of a rank-2 tensor along the row axis."""
    if a.data.ndim != 2:
        raise ShapeError(f"tile_rows needs a rank-2 tensor, got {a.shape}")
    if reps < 1:
        raise ShapeError(f"tile_rows needs reps >= 1, got {reps}")

    def bwd(g):
        return (g.reshape(reps, a.shape[0], a.shape[1]).sum(axis=0),)

    return _out(np.tile(a.data, (reps, 1)), (a,), bwd)


def mean_axis1(x: Tensor) -> Tensor:
    """Mean over the middle axis of a rank-3 tensor: (B, T, d) -> (B, d)."""
    if x.data.ndim != 3:
        raise ShapeError(f"mean_axis1 needs a rank-3 tensor, got {x.shape}")
    t = x.shape[1]

    def bwd(g):
        return (np.broadcast_to(g[:, None, :] / t, x.shape).copy(),)

    return _out(x.data.mean(axis=1), (x,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors with equal row counts along the last axis."""
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise ShapeError(f"concat_cols parts must be rank-2 with {n} rows, got {p.shape}")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(
            np.ascontiguousarray(piece) if p.needs_grad else None
            for piece, p in zip(pieces, parts)
        )

    return _out(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

_REL_GUARD = 1e-6  # denominator floor so near-zero gradients compare sanely


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    eps: float
    n_elements: int
    worst_param: str
    worst_index: int
    analytic: float
    numeric: float
    per_param: dict

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max relative error {self.max_rel_error:.3e} over "
            f"{self.n_elements} elements (tol {self.tol:.1e}); worst "
            f"{self.worst_param}[{self.worst_index}] analytic={self.analytic:.9e} "
            f"numeric={self.numeric:.9e}"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a zero-argument deterministic function (dropout disabled)
    returning a scalar Tensor computed from ``params``. Every parameter
    element is perturbed by +/- eps. Existing grad buffers are overwritten.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    base = f().item()
    if f().item() != base:
        raise InvalidCheckError(
            "gradient check target is not deterministic (is dropout still enabled?)"
        )

    zero_grads(params)
    with GradTape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    max_rel = 0.0
    worst = ("", 0, 0.0, 0.0)
    per_param: dict[str, float] = {}
    n_elements = 0
    for name, p, a in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        param_max = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), _REL_GUARD)
            if rel > param_max:
                param_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, i, float(a_flat[i]), float(numeric))
            n_elements += 1
        per_param[name] = param_max

    return GradCheckReport(
        passed=max_rel <= tol,
        max_rel_error=max_rel,
        tol=tol,
        eps=eps,
        n_elements=n_elements,
        worst_param=worst[0],
        worst_index=worst[1],
        analytic=worst[2],
        numeric=worst[3],
        per_param=per_param,
    )
