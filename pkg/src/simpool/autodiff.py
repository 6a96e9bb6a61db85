"""Minimal dense reverse-mode automatic differentiation kernel.

Tensors are float64 numpy arrays tracked on an explicit tape. Operations
record their backward closure in creation order, which is already a
topological order, so ``Tape.backward`` is a single reverse sweep that
visits each recorded node exactly once. Matrix operations are 2-D;
elementwise operations accept any rank up to 3.

Gather indices are constants: no gradient ever flows into an index
argument, only into the gathered values.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "no_grad",
    "constant",
    "parameter",
    "matmul",
    "transpose",
    "add",
    "subtract",
    "multiply",
    "scalar_multiply",
    "concat_columns",
    "gather",
    "gather_rows",
    "row_softmax",
    "tanh",
    "relu",
    "log",
    "sqrt",
    "reciprocal",
    "clamp_min",
    "sum_all",
    "row_sum",
    "col_sum",
    "mean_all",
    "l2_norm_rows",
    "masked_fill",
    "grad_check",
    "inject_backward_fault",
    "clear_backward_fault",
]


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class Tensor:
    """A float64 array participating in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "_op_output", "meta")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} tensors are not supported (max 3)")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op_output = False
        self.meta: dict | None = None

    @classmethod
    def _raw(cls, arr: np.ndarray) -> Tensor:
        """Fast construction for op outputs (already float64, valid rank)."""
        t = object.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t._op_output = False
        t.meta = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return subtract(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return multiply(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Tape:
    """Ordered record of operations; creation order is topological order."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._suspended = 0

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self)
        _refresh_current_tape()
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)
        _refresh_current_tape()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def recording(self) -> bool:
        return self._suspended == 0

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape once, in reverse.

        Interior gradients live in a scratch dict; leaves (tensors not
        produced by a recorded op) additionally accumulate into ``.grad``.
        """
        if loss.values.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        if loss.requires_grad and not loss._op_output:
            loss.accumulate_grad(grads[id(loss)])
        for out, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
                if not parent._op_output:
                    parent.accumulate_grad(np.asarray(pg, dtype=np.float64))


_TAPE_STACK: list[Tape] = []
_CURRENT_TAPE: Tape | None = None
_FAULT: dict[str, float] = {}


def _refresh_current_tape() -> None:
    global _CURRENT_TAPE
    _CURRENT_TAPE = None
    for tape in reversed(_TAPE_STACK):
        if tape._suspended == 0:
            _CURRENT_TAPE = tape
            return


class no_grad:
    """Context manager suspending recording on all active tapes."""

    def __enter__(self):
        for tape in _TAPE_STACK:
            tape._suspended += 1
        self._tapes = list(_TAPE_STACK)
        _refresh_current_tape()
        return self

    def __exit__(self, *exc):
        for tape in self._tapes:
            tape._suspended -= 1
        _refresh_current_tape()


def inject_backward_fault(op_name: str, scale: float = 2.0) -> None:
    """Corrupt one primitive's backward pass (negative-control hook)."""
    _FAULT[op_name] = scale


def clear_backward_fault() -> None:
    _FAULT.clear()


def _fault(op_name: str, g: np.ndarray) -> np.ndarray:
    scale = _FAULT.get(op_name)
    return g if scale is None else g * scale


def _record(op_name: str, out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    tape = _CURRENT_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op_output = True
        if _FAULT:
            def wrapped(g: np.ndarray):
                return backward(_fault(op_name, g))

            tape._nodes.append((out, wrapped))
        else:
            tape._nodes.append((out, backward))
    return out


def _require_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise ValueError(f"{name} requires 2-D tensors, got shape {t.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul requires 2-D tensors, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = Tensor._raw(av @ bv)

    def backward(g):
        return ((a, g @ bv.T), (b, av.T @ g))

    return _record("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    out = Tensor._raw(a.values.T.copy())

    def backward(g):
        return ((a, g.T),)

    return _record("transpose", out, (a,), backward)


def _broadcast_grad(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back onto a broadcast operand's shape."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ps) in enumerate(zip(g.shape, shape)) if ps == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(name: str, av: np.ndarray, bv: np.ndarray) -> None:
    if av.shape == bv.shape:
        return
    if av.ndim != bv.ndim:
        raise ValueError(f"{name} rank mismatch: {av.shape} vs {bv.shape}")
    for sa, sb in zip(av.shape, bv.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"{name} shape mismatch: {av.shape} vs {bv.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    _check_broadcast("add", av, bv)
    out = Tensor._raw(av + bv)

    def backward(g):
        return ((a, _broadcast_grad(g, av.shape)), (b, _broadcast_grad(g, bv.shape)))

    return _record("add", out, (a, b), backward)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    _check_broadcast("subtract", av, bv)
    out = Tensor._raw(av - bv)

    def backward(g):
        return ((a, _broadcast_grad(g, av.shape)), (b, -_broadcast_grad(g, bv.shape)))

    return _record("subtract", out, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    _check_broadcast("multiply", av, bv)
    out = Tensor._raw(av * bv)

    def backward(g):
        return (
            (a, _broadcast_grad(g * bv, av.shape)),
            (b, _broadcast_grad(g * av, bv.shape)),
        )

    return _record("multiply", out, (a, b), backward)


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._raw(a.values * c)

    def backward(g):
        return ((a, g * c),)

    return _record("scalar_multiply", out, (a,), backward)


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_columns of an empty sequence")
    _require_2d("concat_columns", *tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise ValueError("concat_columns requires equal row counts")
    widths = [t.shape[1] for t in tensors]
    out = Tensor._raw(np.concatenate([t.values for t in tensors], axis=1))

    def backward(g):
        outs = []
        start = 0
        for t, w in zip(tensors, widths):
            outs.append((t, g[:, start:start + w]))
            start += w
        return tuple(outs)

    return _record("concat_columns", out, tuple(tensors), backward)


def gather(a: Tensor, row_idx: np.ndarray, col_idx: np.ndarray) -> Tensor:
    """out[i, j] = a[row_idx[i, j], col_idx[i, j]]; indices are constants."""
    _require_2d("gather", a)
    row_idx = np.asarray(row_idx, dtype=np.intp)
    col_idx = np.asarray(col_idx, dtype=np.intp)
    if row_idx.shape != col_idx.shape:
        raise ValueError("gather index arrays must share a shape")
    n, m = a.shape
    if row_idx.size and (row_idx.min() < 0 or row_idx.max() >= n):
        raise IndexError("gather row index out of bounds")
    if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= m):
        raise IndexError("gather column index out of bounds")
    out = Tensor._raw(a.values[row_idx, col_idx])

    def backward(g):
        pg = np.zeros_like(a.values)
        np.add.at(pg, (row_idx, col_idx), g)
        return ((a, pg),)

    return _record("gather", out, (a,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select whole rows of a 2-D tensor; indices are constants."""
    _require_2d("gather_rows", a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError("gather_rows index out of bounds")
    out = Tensor._raw(a.values[idx])

    def backward(g):
        pg = np.zeros_like(a.values)
        np.add.at(pg, idx, g)
        return ((a, pg),)

    return _record("gather_rows", out, (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    _require_2d("row_softmax", a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor._raw(s)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((a, (g - dot) * s),)

    return _record("row_softmax", out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    out = Tensor._raw(t)

    def backward(g):
        return ((a, g * (1.0 - t * t)),)

    return _record("tanh", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor._raw(np.maximum(a.values, 0.0))

    def backward(g):
        return ((a, g * (a.values > 0.0)),)

    return _record("relu", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise NumericError("log requires strictly positive input; clamp first")
    out = Tensor._raw(np.log(a.values))

    def backward(g):
        return ((a, g / a.values),)

    return _record("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0.0):
        raise NumericError("sqrt of negative input")
    r = np.sqrt(a.values)
    out = Tensor._raw(r)

    def backward(g):
        # zero subgradient at the origin rather than the analytic +inf
        safe = np.where(r == 0.0, 1.0, r)
        return ((a, g * 0.5 / safe * (r > 0.0)),)

    return _record("sqrt", out, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.values == 0.0):
        raise NumericError("reciprocal of zero entry")
    r = 1.0 / a.values
    out = Tensor._raw(r)

    def backward(g):
        return ((a, -g * r * r),)

    return _record("reciprocal", out, (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    floor = float(floor)
    out = Tensor._raw(np.maximum(a.values, floor))

    def backward(g):
        return ((a, g * (a.values > floor)),)

    return _record("clamp_min", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._raw(np.array([[a.values.sum()]]))

    def backward(g):
        return ((a, np.full_like(a.values, float(g.reshape(-1)[0]))),)

    return _record("sum_all", out, (a,), backward)


def row_sum(a: Tensor) -> Tensor:
    """Sum over columns; (n, m) -> (n, 1)."""
    _require_2d("row_sum", a)
    out = Tensor._raw(a.values.sum(axis=1, keepdims=True))

    def backward(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _record("row_sum", out, (a,), backward)


def col_sum(a: Tensor) -> Tensor:
    """Sum over rows; (n, m) -> (1, m)."""
    _require_2d("col_sum", a)
    out = Tensor._raw(a.values.sum(axis=0, keepdims=True))

    def backward(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _record("col_sum", out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor._raw(np.array([[a.values.mean()]]))

    def backward(g):
        return ((a, np.full_like(a.values, float(g.reshape(-1)[0]) / n)),)

    return _record("mean_all", out, (a,), backward)


def l2_norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of every row; (n, m) -> (n, 1)."""
    _require_2d("l2_norm_rows", a)
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    out = Tensor._raw(norms)

    def backward(g):
        safe = np.maximum(norms, 1e-300)
        return ((a, g * a.values / safe),)

    return _record("l2_norm_rows", out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is set; the mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {a.shape}")
    out = Tensor._raw(np.where(mask, float(value), a.values))

    def backward(g):
        return ((a, g * ~mask),)

    return _record("masked_fill", out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        if not np.all(np.isfinite(y.values)):
            raise NumericError("non-finite forward value in grad_check")
        tape.backward(y)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f(x).item()
            flat[i] = orig - epsilon
            lo = f(x).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite forward value in finite differences")
            num_flat[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
