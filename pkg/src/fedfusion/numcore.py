"""Dense float64 matrices with a reverse-mode gradient tape.

Everything downstream (local embeddings, alignment, graph sampling, the
fused global model) is built from the primitives in this module.  Values
are immutable 2-D arrays.  Recording happens only when at least one input
of an operation is tracked on a tape, so inference-style calls pay no
bookkeeping cost.  Gradients are recovered by replaying the tape in
reverse and accumulating vector-Jacobian products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _sp


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericDomainError(ValueError):
    """An entry left the numeric domain of an operation (names the index)."""


class ContractError(RuntimeError):
    """A caller broke an API contract (mixed tapes, nondeterministic closure, ...)."""


def _fail_shape(op: str, detail: str) -> None:
    raise ShapeError(f"{op}: {detail}")


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NumericDomainError(
            f"{op}: non-finite entry at index ({bad[0]}, {bad[1]})"
        )


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Matrix:
    """Immutable 2-D float64 value, optionally tracked on a Tape."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim != 2:
            _fail_shape("Matrix", f"expected 2-D data, got ndim={arr.ndim}")
        _check_finite("Matrix", arr)
        self.data = _lock(arr)
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            _fail_shape("item", f"expected 1x1, got {self.data.shape}")
        return float(self.data[0, 0])

    def to_numpy(self) -> np.ndarray:
        return np.array(self.data)

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        return Matrix(np.zeros((rows, cols)), copy=False)

    @staticmethod
    def ones(rows: int, cols: int) -> "Matrix":
        return Matrix(np.ones((rows, cols)), copy=False)

    @staticmethod
    def eye(n: int) -> "Matrix":
        return Matrix(np.eye(n), copy=False)

    @staticmethod
    def row(values) -> "Matrix":
        return Matrix(np.asarray(values, dtype=np.float64).reshape(1, -1))

    @staticmethod
    def column(values) -> "Matrix":
        return Matrix(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    def __repr__(self) -> str:
        tracked = "" if self._tape is None else ", tracked"
        return f"Matrix({self.rows}x{self.cols}{tracked})"

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)

    @property
    def T(self) -> "Matrix":
        return transpose(self)


def as_const(data) -> Matrix:
    """Wrap an array as an untracked Matrix without copying (read-only view)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        _fail_shape("as_const", f"expected 2-D data, got ndim={arr.ndim}")
    m = Matrix.__new__(Matrix)
    m.data = _lock(arr.view())
    m._tape = None
    m._node = None
    return m


# A tape record holds the output node, the input nodes (None for untracked
# constants) and a closure mapping the upstream gradient to one gradient
# array per input (None where the input is untracked).
_Record = tuple[int, tuple[int | None, ...], Callable[[np.ndarray], Sequence[np.ndarray | None]]]


class Tape:
    """Ledger of operations for one forward pass; replayed in reverse for gradients."""

    __slots__ = ("_records", "_next_id", "_named", "_grads", "_shapes")

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0
        self._named: dict[str, Matrix] = {}
        self._grads: dict[int, np.ndarray] | None = None
        self._shapes: dict[int, tuple[int, int]] = {}

    def _new_node(self, shape: tuple[int, int]) -> int:
        node = self._next_id
        self._next_id += 1
        self._shapes[node] = shape
        return node

    def param(self, data, name: str | None = None) -> Matrix:
        """Register a leaf parameter.  `data` is wrapped without copying."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            _fail_shape("param", f"expected 2-D data, got ndim={arr.ndim}")
        view = arr.view()
        m = Matrix.__new__(Matrix)
        m.data = _lock(view)
        m._tape = self
        m._node = self._new_node(view.shape)
        if name is not None:
            if name in self._named:
                raise ContractError(f"param name {name!r} already registered on this tape")
            self._named[name] = m
        return m

    def backward(self, loss: Matrix) -> None:
        """Accumulate d(loss)/d(node) for every node reaching `loss`."""
        if loss.shape != (1, 1):
            _fail_shape("backward", f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self and loss._node is not None:
            grads[loss._node] = np.ones((1, 1))
        elif loss._tape is not None and loss._tape is not self:
            raise ContractError("backward: loss belongs to a different tape")
        for out_id, input_ids, vjp in reversed(self._records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            parts = vjp(g)
            for node, part in zip(input_ids, parts):
                if node is None or part is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + part
                else:
                    grads[node] = part
        self._grads = grads

    def grad(self, m: Matrix) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. `m` (zeros if unused)."""
        if self._grads is None:
            raise ContractError("grad: call backward() first")
        if m._tape is not self:
            raise ContractError("grad: matrix is not tracked on this tape")
        g = self._grads.get(m._node)
        if g is None:
            return np.zeros(m.shape)
        return np.array(g)

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients for every named parameter, zeros for non-participants."""
        return {name: self.grad(m) for name, m in self._named.items()}


def _tape_of(inputs: Iterable[Matrix]) -> "Tape | None":
    tape = None
    for m in inputs:
        if m._tape is None:
            continue
        if tape is None:
            tape = m._tape
        elif tape is not m._tape:
            raise ContractError("operands are tracked on different tapes")
    return tape


def _emit(
    op: str,
    out_data: np.ndarray,
    inputs: tuple[Matrix, ...],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Matrix:
    _check_finite(op, out_data)
    out = Matrix.__new__(Matrix)
    out.data = _lock(out_data)
    tape = _tape_of(inputs)
    out._tape = tape
    out._node = None
    if tape is not None:
        out._node = tape._new_node(out_data.shape)
        input_ids = tuple(m._node if m._tape is tape else None for m in inputs)
        tape._records.append((out._node, input_ids, vjp))
    return out


# ---------------------------------------------------------------------------
# linear and structural operations


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        _fail_shape("matmul", f"{a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", ad @ bd, (a, b), vjp)


def transpose(a: Matrix) -> Matrix:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        _fail_shape("add", f"{a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        _fail_shape("sub", f"{a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        _fail_shape("hadamard", f"{a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def divide(a: Matrix, b: Matrix) -> Matrix:
    """Entrywise a / b; every divisor must be nonzero."""
    if a.shape != b.shape:
        _fail_shape("divide", f"{a.shape} vs {b.shape}")
    if np.any(b.data == 0.0):
        bad = np.argwhere(b.data == 0.0)[0]
        raise NumericDomainError(f"divide: zero divisor at index ({bad[0]}, {bad[1]})")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return g / bd, -g * ad / (bd * bd)

    return _emit("divide", out, (a, b), vjp)


def scale(a: Matrix, k: float) -> Matrix:
    return _emit("scale", a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Matrix, k: float) -> Matrix:
    return _emit("add_scalar", a.data + k, (a,), lambda g: (g,))


def add_rowvec(a: Matrix, v: Matrix) -> Matrix:
    """Add a 1 x cols row vector to every row of `a`."""
    if v.shape != (1, a.cols):
        _fail_shape("add_rowvec", f"{a.shape} + {v.shape}")
    return _emit(
        "add_rowvec", a.data + v.data, (a, v),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def add_colvec(a: Matrix, v: Matrix) -> Matrix:
    """Add a rows x 1 column vector to every column of `a`."""
    if v.shape != (a.rows, 1):
        _fail_shape("add_colvec", f"{a.shape} + {v.shape}")
    return _emit(
        "add_colvec", a.data + v.data, (a, v),
        lambda g: (g, g.sum(axis=1, keepdims=True)),
    )


def scale_rows(a: Matrix, v: Matrix) -> Matrix:
    """Multiply row i of `a` by v[i, 0]; v must be rows x 1."""
    if v.shape != (a.rows, 1):
        _fail_shape("scale_rows", f"{a.shape} by {v.shape}")
    ad, vd = a.data, v.data
    return _emit(
        "scale_rows", ad * vd, (a, v),
        lambda g: (g * vd, (g * ad).sum(axis=1, keepdims=True)),
    )


def scale_cols(a: Matrix, v: Matrix) -> Matrix:
    """Multiply column j of `a` by v[j, 0]; v must be cols x 1."""
    if v.shape != (a.cols, 1):
        _fail_shape("scale_cols", f"{a.shape} by {v.shape}")
    ad, vd = a.data, v.data
    return _emit(
        "scale_cols", ad * vd.T, (a, v),
        lambda g: (g * vd.T, (g * ad).sum(axis=0, keepdims=True).T),
    )


def append_ones_col(a: Matrix) -> Matrix:
    """Append a constant column of ones: (r x c) -> (r x c+1)."""
    out = np.hstack([a.data, np.ones((a.rows, 1))])
    return _emit("append_ones_col", out, (a,), lambda g: (g[:, :-1],))


def vstack(mats: Sequence[Matrix]) -> Matrix:
    if not mats:
        _fail_shape("vstack", "empty input")
    cols = mats[0].cols
    for m in mats:
        if m.cols != cols:
            _fail_shape("vstack", "column counts differ")
    splits = np.cumsum([m.rows for m in mats])[:-1]

    def vjp(g):
        return tuple(np.vsplit(g, splits))

    return _emit("vstack", np.vstack([m.data for m in mats]), tuple(mats), vjp)


def interleave_rows(mats: Sequence[Matrix]) -> Matrix:
    """Stack n same-shape (m x c) matrices so row k*n + i comes from mats[i] row k."""
    if not mats:
        _fail_shape("interleave_rows", "empty input")
    m, c = mats[0].shape
    for mat in mats:
        if mat.shape != (m, c):
            _fail_shape("interleave_rows", "shapes differ")
    n = len(mats)
    out = np.empty((m * n, c))
    for i, mat in enumerate(mats):
        out[i::n] = mat.data

    def vjp(g):
        return tuple(g[i::n] for i in range(n))

    return _emit("interleave_rows", out, tuple(mats), vjp)


def block_left_mul(a: Matrix, x: Matrix, n: int) -> Matrix:
    """Apply the n x n matrix `a` to each n-row block of `x` ((m*n) x c)."""
    if a.shape != (n, n):
        _fail_shape("block_left_mul", f"left operand must be {n}x{n}, got {a.shape}")
    if x.rows % n != 0:
        _fail_shape("block_left_mul", f"row count {x.rows} not a multiple of {n}")
    m = x.rows // n
    c = x.cols
    ad = a.data
    xr = x.data.reshape(m, n, c)
    out = np.einsum("ij,mjc->mic", ad, xr).reshape(m * n, c)

    def vjp(g):
        gr = g.reshape(m, n, c)
        da = np.einsum("mic,mjc->ij", gr, xr)
        dx = np.einsum("ij,mic->mjc", ad, gr).reshape(m * n, c)
        return da, dx

    return _emit("block_left_mul", out, (a, x), vjp)


def block_mean_rows(x: Matrix, n: int) -> Matrix:
    """Mean over each n-row block of `x` ((m*n) x c) -> m x c."""
    if x.rows % n != 0:
        _fail_shape("block_mean_rows", f"row count {x.rows} not a multiple of {n}")
    m = x.rows // n
    c = x.cols
    out = x.data.reshape(m, n, c).mean(axis=1)

    def vjp(g):
        return (np.repeat(g / n, n, axis=0),)

    return _emit("block_mean_rows", out, (x,), vjp)


def sym_from_upper(v: Matrix, n: int, diag: float) -> Matrix:
    """Build a symmetric n x n matrix from n(n-1)/2 upper-triangle entries.

    `v` is a column vector in row-major upper-triangle order; the diagonal
    is fixed at `diag` and carries no gradient.
    """
    e = n * (n - 1) // 2
    if v.shape != (e, 1):
        _fail_shape("sym_from_upper", f"expected {e}x1, got {v.shape}")
    iu = np.triu_indices(n, k=1)
    out = np.full((n, n), 0.0)
    out[iu] = v.data[:, 0]
    out = out + out.T
    np.fill_diagonal(out, diag)

    def vjp(g):
        return ((g[iu] + g.T[iu]).reshape(e, 1),)

    return _emit("sym_from_upper", out, (v,), vjp)


def offdiag_from_vec(v: Matrix, n: int, diag: float) -> Matrix:
    """Build an n x n matrix from n(n-1) off-diagonal entries (row-major)."""
    e = n * (n - 1)
    if v.shape != (e, 1):
        _fail_shape("offdiag_from_vec", f"expected {e}x1, got {v.shape}")
    mask = ~np.eye(n, dtype=bool)
    out = np.full((n, n), diag)
    out[mask] = v.data[:, 0]

    def vjp(g):
        return (g[mask].reshape(e, 1),)

    return _emit("offdiag_from_vec", out, (v,), vjp)


def with_unit_diag(a: Matrix) -> Matrix:
    """Copy of square `a` with its diagonal forced to 1 (diagonal gradient is dropped)."""
    if a.rows != a.cols:
        _fail_shape("with_unit_diag", f"square matrix required, got {a.shape}")
    out = np.array(a.data)
    np.fill_diagonal(out, 1.0)
    off = ~np.eye(a.rows, dtype=bool)

    def vjp(g):
        return (g * off,)

    return _emit("with_unit_diag", out, (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return _sp.expit(x)


_UNARY: dict[str, tuple[Callable, Callable]] = {
    # name -> (f, f' expressed from input x and output y)
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64)),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
}


def elementwise(op: str, m: Matrix) -> Matrix:
    """Apply a named scalar nonlinearity entrywise (relu|sigmoid|tanh|exp|log)."""
    if op not in _UNARY:
        raise ValueError(f"elementwise: unknown op {op!r}")
    if op == "log" and np.any(m.data <= 0.0):
        bad = np.argwhere(m.data <= 0.0)[0]
        raise NumericDomainError(f"log: non-positive entry at index ({bad[0]}, {bad[1]})")
    f, df = _UNARY[op]
    xd = m.data
    yd = f(xd)

    def vjp(g):
        return (g * df(xd, yd),)

    return _emit(op, yd, (m,), vjp)


def relu(m: Matrix) -> Matrix:
    return elementwise("relu", m)


def sigmoid(m: Matrix) -> Matrix:
    return elementwise("sigmoid", m)


def tanh(m: Matrix) -> Matrix:
    return elementwise("tanh", m)


def exp(m: Matrix) -> Matrix:
    return elementwise("exp", m)


def log(m: Matrix) -> Matrix:
    return elementwise("log", m)


def rsqrt(m: Matrix) -> Matrix:
    """Entrywise x ** -0.5; every entry must be strictly positive."""
    if np.any(m.data <= 0.0):
        bad = np.argwhere(m.data <= 0.0)[0]
        raise NumericDomainError(f"rsqrt: non-positive entry at index ({bad[0]}, {bad[1]})")
    y = 1.0 / np.sqrt(m.data)

    def vjp(g):
        return (g * (-0.5) * y ** 3,)

    return _emit("rsqrt", y, (m,), vjp)


def probit(m: Matrix) -> Matrix:
    """Entrywise standard-normal inverse CDF; entries must lie in (0, 1)."""
    if np.any((m.data <= 0.0) | (m.data >= 1.0)):
        bad = np.argwhere((m.data <= 0.0) | (m.data >= 1.0))[0]
        raise NumericDomainError(f"probit: entry outside (0, 1) at index ({bad[0]}, {bad[1]})")
    y = _sp.ndtri(m.data)
    # d/dp ndtri(p) = 1 / phi(ndtri(p))
    dy = np.sqrt(2.0 * np.pi) * np.exp(0.5 * y * y)

    def vjp(g):
        return (g * dy,)

    return _emit("probit", y, (m,), vjp)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(m: Matrix) -> Matrix:
    out = np.array([[m.data.sum()]])

    def vjp(g):
        return (np.full(m.shape, g[0, 0]),)

    return _emit("sum_all", out, (m,), vjp)


def row_sums(m: Matrix) -> Matrix:
    """Sum over each row -> rows x 1."""
    out = m.data.sum(axis=1, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, m.shape).copy(),)

    return _emit("row_sums", out, (m,), vjp)


def col_sums(m: Matrix) -> Matrix:
    """Sum over each column -> 1 x cols."""
    out = m.data.sum(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, m.shape).copy(),)

    return _emit("col_sums", out, (m,), vjp)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax_rows", y, (m,), vjp)


PROB_FLOOR = 1e-12


def cross_entropy(pred: Matrix, labels) -> Matrix:
    """Mean negative log-likelihood of integer labels under row-stochastic `pred`.

    Probabilities are clamped at PROB_FLOOR before the log; a clamped entry
    contributes no gradient.
    """
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != pred.rows:
        _fail_shape("cross_entropy", f"labels shape {y.shape} for {pred.rows} rows")
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError("cross_entropy: labels must be integers")
    if np.any(y < 0) or np.any(y >= pred.cols):
        bad = int(np.argwhere((y < 0) | (y >= pred.cols))[0][0])
        raise IndexError(f"cross_entropy: label {y[bad]} out of range at row {bad}")
    if np.any(pred.data < -1e-9) or np.any(np.abs(pred.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("cross_entropy: rows of pred must be probability vectors")
    m = pred.rows
    rows = np.arange(m)
    picked = pred.data[rows, y]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = np.array([[-np.log(clamped).mean()]])

    def vjp(g):
        dp = np.zeros(pred.shape)
        live = picked > PROB_FLOOR
        dp[rows[live], y[live]] = -g[0, 0] / (m * picked[live])
        return (dp,)

    return _emit("cross_entropy", out, (pred,), vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    passed: bool
    max_rel_err: float
    per_param: list[float] = field(default_factory=list)
    tol: float = 1e-4
    step: float = 1e-6

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"


def grad_check(
    f: Callable[[list[Matrix]], Matrix],
    params: Sequence[np.ndarray],
    tol: float = 1e-4,
    step: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar `f` against central differences.

    `f` receives one Matrix per entry of `params` and must return a 1x1
    Matrix deterministically; any internal randomness has to be frozen.
    Errors are relative with a floor of 1.0 on the denominator, so tiny
    gradients are compared absolutely.
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values: list[np.ndarray]) -> float:
        return f([Matrix(v) for v in values]).item()

    base = evaluate(arrays)
    if evaluate(arrays) != base:
        raise ContractError("grad_check: function is not deterministic")

    tape = Tape()
    wrapped = [tape.param(a) for a in arrays]
    loss = f(wrapped)
    if loss.shape != (1, 1):
        _fail_shape("grad_check", f"f must return 1x1, got {loss.shape}")
    tape.backward(loss)
    analytic = [tape.grad(w) for w in wrapped]

    per_param: list[float] = []
    for k, arr in enumerate(arrays):
        worst = 0.0
        flat = arr.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            plus = [a.copy() for a in arrays]
            plus[k].ravel()[idx] = orig + step
            minus = [a.copy() for a in arrays]
            minus[k].ravel()[idx] = orig - step
            fd = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            an = analytic[k].ravel()[idx]
            err = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            worst = max(worst, err)
        per_param.append(worst)
    max_err = max(per_param) if per_param else 0.0
    return GradCheckReport(passed=max_err <= tol, max_rel_err=max_err,
                           per_param=per_param, tol=tol, step=step)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; updates the registered arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            g = grads[key]
            m = self._m[key]
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment estimates, exposed for checkpointing."""
        out = {}
        for key in self.params:
            out[f"m.{key}"] = self._m[key]
            out[f"v.{key}"] = self._v[key]
        return out
