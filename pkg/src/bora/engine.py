"""Dense 1-D/2-D tensors with tape-based reverse-mode differentiation.

Only the handful of operations the adapters need are provided.  Every op
computes its value eagerly with numpy (float64) and, when a :class:`Tape` is
active and some input requires a gradient, records a vector-Jacobian product
closure.  :func:`backward` replays the tape in reverse.

    >>> W = Matrix([[3.0, 4.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_of_squares(div_dim(W, dim_norms(W, "row"), "row"))
    >>> backward(tape, loss)
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateNormError, NumericError, ShapeError

DEFAULT_FLOOR = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "bora_active_tape", default=None
)


class Tensor:
    """A float64 array node.  ``grad`` is only populated on leaves."""

    ndim: int | None = None

    __slots__ = ("value", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if self.ndim is not None and arr.ndim != self.ndim:
            raise ShapeError(
                f"{type(self).__name__} needs {self.ndim} dims, got shape {arr.shape}"
            )
        if arr.size == 0:
            raise ShapeError(f"{type(self).__name__} must be nonempty")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Matrix(Tensor):
    ndim = 2
    __slots__ = ()

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]


class Vector(Tensor):
    ndim = 1
    __slots__ = ()

    def __len__(self) -> int:
        return self.value.shape[0]


class Scalar(Tensor):
    ndim = 0
    __slots__ = ()


_KINDS = {2: Matrix, 1: Vector, 0: Scalar}


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return _KINDS[arr.ndim](arr)


class Tape:
    """Ordered record of executed operations for one forward pass.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded.  A tape is single-use: build a fresh one per forward pass.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))

    @property
    def records(self):
        return tuple(self._records)


class no_tape:
    """Suspend recording, e.g. for evaluation passes."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = _KINDS[value.ndim](value)
    out.is_leaf = False
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Gradients add to whatever is already stored, so call ``zero_grad`` on the
    parameters between steps.
    """
    if not isinstance(loss, Scalar) and loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# --------------------------------------------------------------------------
# operations


def _axis(dim: str) -> int:
    if dim == "row":
        return 1
    if dim == "col":
        return 0
    raise ValueError(f"dim must be 'row' or 'col', got {dim!r}")


def matmul(a: Tensor, b: Tensor) -> Matrix:
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Matrix) -> Matrix:
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def detach(a: Tensor) -> Tensor:
    """Copy of ``a`` that is a constant as far as the tape is concerned."""
    return _KINDS[a.value.ndim](a.value)


def sum_all(a: Tensor) -> Scalar:
    shape = a.shape
    return _emit(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def sum_of_squares(a: Tensor) -> Scalar:
    x = a.value
    return _emit(np.asarray(np.sum(x * x)), (a,), lambda g: (2.0 * float(g) * x,))


def dim_norms(m: Matrix, dim: str) -> Vector:
    """Euclidean norm of every row (``dim="row"``) or column (``dim="col"``)."""
    axis = _axis(dim)
    M = m.value
    n = np.sqrt(np.sum(M * M, axis=axis))

    def vjp(g):
        safe = np.where(n > 0.0, n, 1.0)
        coef = np.where(n > 0.0, g / safe, 0.0)
        return (np.expand_dims(coef, axis) * M,)

    return _emit(n, (m,), vjp)


def _check_len(m: Matrix, v: Vector, dim: str, op: str) -> int:
    axis = _axis(dim)
    want = m.shape[1 - axis]
    if v.value.ndim != 1 or v.value.shape[0] != want:
        raise ShapeError(f"{op}: vector of shape {v.shape} does not match {dim}s of {m.shape}")
    return axis


def scale_dim(m: Matrix, v: Vector, dim: str) -> Matrix:
    """Multiply row i (or column j) of ``m`` by ``v[i]`` (or ``v[j]``)."""
    axis = _check_len(m, v, dim, "scale_dim")
    M, s = m.value, np.expand_dims(v.value, axis)
    return _emit(M * s, (m, v), lambda g: (g * s, np.sum(g * M, axis=axis)))


def div_dim(
    m: Matrix,
    v: Vector,
    dim: str,
    floor: float = DEFAULT_FLOOR,
    strict: bool = True,
) -> Matrix:
    """Divide row i (or column j) of ``m`` by ``max(v[i], floor)``.

    In strict mode any ``v[i] < floor`` raises :class:`DegenerateNormError`.
    In clamp mode clamped entries receive no gradient.
    """
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    axis = _check_len(m, v, dim, "div_dim")
    raw = v.value
    if strict and np.any(raw < floor):
        bad = np.flatnonzero(raw < floor).tolist()
        raise DegenerateNormError(f"{dim} norm below floor {floor:g} at index {bad}")
    live = raw > floor
    denom = np.expand_dims(np.where(live, raw, floor), axis)
    M = m.value
    out = M / denom

    def vjp(g):
        gv = -np.sum(g * M, axis=axis) / np.squeeze(denom * denom, axis)
        return (g / denom, np.where(live, gv, 0.0))

    return _emit(out, (m, v), vjp)


def mse_loss(pred: Tensor, target) -> Scalar:
    target = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.value - target
    n = diff.size
    return _emit(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (2.0 * float(g) / n * diff,))


def softmax_cross_entropy(logits: Matrix, targets: Sequence[int]) -> Scalar:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax."""
    Z = logits.value
    y = np.asarray(targets, dtype=np.int64)
    n, k = Z.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {y.shape[0] if y.ndim else 0} targets for {n} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"target out of range [0, {k})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        return (d * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), vjp)


# --------------------------------------------------------------------------
# verification oracle


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The
    error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not math.isfinite(loss.item()):
        raise NumericError(f"f returned {loss.item()!r}")
    backward(tape, loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    with no_tape():
        for p, an in zip(params, analytic):
            flat = p.value.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = f().item()
                flat[i] = orig - step
                lo = f().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericError(f"non-finite f near {p!r}[{i}]")
                num = (hi - lo) / (2.0 * step)
                worst = max(worst, abs(an_flat[i] - num) / max(1.0, abs(num)))
    return float(worst)
