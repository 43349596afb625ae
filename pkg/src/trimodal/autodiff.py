"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every tensor is a matrix. Per-shape point sets and view sets are stacked
row-wise into one matrix per batch; ops that must respect the shape
boundaries take a ``blocks`` argument that splits the rows into equal
contiguous segments.

Recording only happens inside an active :class:`Graph`::

    with Graph() as g:
        loss = sum_all(mul(x, x))
    g.backward(loss)

Outside a graph the same functions just compute values, which is what
evaluation and finite differencing use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Graph",
    "GradCheckReport",
    "active_graph",
    "matmul",
    "transpose",
    "block_matmul",
    "linear",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "exp",
    "log",
    "softmax_axis",
    "logsumexp_rows",
    "concat_cols",
    "slice_cols",
    "reduce",
    "max_rows",
    "mean_rows",
    "sum_all",
    "row_l2_distance",
    "l2_distance",
    "cosine_matrix",
    "cosine_similarity",
    "backward",
    "grad_check",
]

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A row-major real matrix with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Graph"] = []


def active_graph() -> "Graph | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Graph:
    """Append-only tape of recorded ops. Rebuilt for every forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, rule) -> None:
        out.requires_grad = True
        out._graph = self
        out._node = len(self.nodes)
        self.nodes.append(Node(kind, inputs, out, rule))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _emit(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(kind, inputs, out, rule)
    return out


def backward(g: Graph, loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss`` recorded on ``g``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``;
    intermediate gradients live only for the duration of the sweep.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if loss._graph is not g or loss._node is None:
        raise ValueError("loss tensor was not recorded on this graph")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(g.nodes[: loss._node + 1]):
        gout = pending.pop(id(node.output), None)
        if gout is None:
            continue
        for t, gin in zip(node.inputs, node.rule(gout)):
            if gin is None or not t.requires_grad:
                continue
            if t._graph is g:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gin
                else:
                    pending[key] = gin
            elif t.grad is None:
                t.grad = np.array(gin, dtype=t.data.dtype)
            else:
                t.grad += gin


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1), x, dtype=like.dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.shape == (1, 1)


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not _is_scalar(b):
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    A, B = a.data, b.data

    def rule(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _emit("matmul", A @ B, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def _blocks3(x: np.ndarray, blocks: int, kind: str) -> np.ndarray:
    if x.shape[0] % blocks:
        raise DimensionError(f"{kind}: {x.shape[0]} rows do not split into {blocks} blocks")
    return x.reshape(blocks, x.shape[0] // blocks, x.shape[1])


def block_matmul(a: Tensor, b: Tensor, blocks: int, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    """Per-block product of two row-stacked matrices.

    Block ``k`` of the result is ``op(a_k) @ op(b_k)`` where ``op`` is an
    optional transpose; results are stacked row-wise.
    """
    A = _blocks3(a.data, blocks, "block_matmul")
    B = _blocks3(b.data, blocks, "block_matmul")
    Aop = A.transpose(0, 2, 1) if trans_a else A
    Bop = B.transpose(0, 2, 1) if trans_b else B
    if Aop.shape[2] != Bop.shape[1]:
        raise DimensionError(
            f"block_matmul: per-block shapes {Aop.shape[1:]} and {Bop.shape[1:]} do not chain"
        )
    C = np.matmul(Aop, Bop)

    def rule(g):
        G = g.reshape(C.shape)
        dAop = np.matmul(G, Bop.transpose(0, 2, 1))
        dBop = np.matmul(Aop.transpose(0, 2, 1), G)
        dA = dAop.transpose(0, 2, 1) if trans_a else dAop
        dB = dBop.transpose(0, 2, 1) if trans_b else dBop
        return dA.reshape(a.shape), dB.reshape(b.shape)

    return _emit("block_matmul", C.reshape(-1, C.shape[2]), (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w`` plus the bias row ``b`` added to every row."""
    if x.cols != w.rows or b.shape != (1, w.cols):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    X, W = x.data, w.data

    def rule(g):
        dx = g @ W.T if x.requires_grad else None
        return dx, X.T @ g, g.sum(axis=0, keepdims=True)

    out = X @ W
    out += b.data
    return _emit("linear", out, (x, w, b), rule)


# ------------------------------------------------------------- elementwise


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.sum(g).reshape(1, 1) if _is_scalar(t) and g.shape != (1, 1) else g


def add(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b)))


def sub(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b)))


def mul(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, _reduce_to(g * A, b)))


def div(a: Tensor, b) -> Tensor:
    b = _const(b, a)
    _check_same("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _emit("div", out, (a, b), lambda g: (g / B, _reduce_to(-g * out / B, b)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    A = a.data
    return _emit("log", np.log(A), (a,), lambda g: (g / A,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, float(b))
    try:
        return _ELEMENTWISE[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


# ---------------------------------------------------------------- softmax


def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - np.sum(g * y, axis=axis, keepdims=True))


def softmax_axis(a: Tensor, axis: str = "row", blocks: int = 1) -> Tensor:
    """Max-stabilized softmax over each row, or over each column.

    For ``axis="col"`` with ``blocks > 1`` every column is normalized
    separately inside each row block.
    """
    if axis == "row":
        x, ax = a.data, 1
    elif axis == "col":
        x, ax = _blocks3(a.data, blocks, "softmax_axis"), 1
    else:
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax_axis: non-finite input")
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (_softmax_backward(y, g.reshape(y.shape), ax).reshape(a.shape),)

    return _emit("softmax_" + axis, y.reshape(a.shape), (a,), rule)


def logsumexp_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stabilized ``log(sum(exp(row)))`` per row, returning an ``r x 1`` column.

    ``mask`` (boolean, same shape) selects the entries that take part;
    every row needs at least one selected entry.
    """
    x = a.data
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"logsumexp_rows: mask {mask.shape} vs input {x.shape}")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return _emit("logsumexp_rows", m + np.log(s), (a,), lambda g: (g * p,))


# ----------------------------------------------------------- restructuring


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat_cols: no parts")
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts, rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}:{stop}] outside {a.cols} columns")

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", a.data[:, start:stop].copy(), (a,), rule)


# ---------------------------------------------------------------- reductions


def max_rows(a: Tensor, blocks: int = 1) -> Tensor:
    """Column-wise max over rows (per block); ties route to the lowest row."""
    if a.rows == 0:
        raise DimensionError("max_rows: empty tensor")
    x = _blocks3(a.data, blocks, "max_rows")
    idx = np.argmax(x, axis=1)  # first occurrence wins ties
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]

    def rule(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, idx[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(a.shape),)

    return _emit("max_rows", out, (a,), rule)


def mean_rows(a: Tensor, blocks: int = 1) -> Tensor:
    if a.rows == 0:
        raise DimensionError("mean_rows: empty tensor")
    x = _blocks3(a.data, blocks, "mean_rows")
    r = x.shape[1]

    def rule(g):
        return (np.repeat(g / r, r, axis=0).astype(a.dtype, copy=False),)

    return _emit("mean_rows", x.mean(axis=1), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise DimensionError("sum_all: empty tensor")
    return _emit(
        "sum_all",
        np.sum(a.data).reshape(1, 1),
        (a,),
        lambda g: (np.full_like(a.data, g[0, 0]),),
    )


def reduce(kind: str, a: Tensor, blocks: int = 1) -> Tensor:
    if kind == "max_rows":
        return max_rows(a, blocks)
    if kind == "mean_rows":
        return mean_rows(a, blocks)
    if kind == "sum_all":
        return sum_all(a)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- distances


def row_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows, as an ``r x 1`` column."""
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    dist = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    safe = np.where(dist > 0, dist, 1)
    unit = np.where(dist > 0, diff / safe, 0)

    def rule(g):
        d = g * unit
        return d, -d

    return _emit("l2_distance", dist, (a, b), rule)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != 1:
        raise DimensionError(f"l2_distance expects 1xD rows, got {a.shape}")
    return row_l2_distance(a, b)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    Norms are floored at 1e-12, so zero rows give zero similarity.
    """
    if a.cols != b.cols:
        raise DimensionError(f"cosine: widths of {a.shape} and {b.shape} differ")
    na = np.maximum(np.linalg.norm(a.data, axis=1, keepdims=True), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b.data, axis=1, keepdims=True), NORM_EPS)
    ua, ub = a.data / na, b.data / nb
    clamped_a, clamped_b = na <= NORM_EPS, nb <= NORM_EPS

    def rule(g):
        dua, dub = g @ ub, g.T @ ua
        da = np.where(clamped_a, dua, dua - ua * np.sum(dua * ua, axis=1, keepdims=True)) / na
        db = np.where(clamped_b, dub, dub - ub * np.sum(dub * ub, axis=1, keepdims=True)) / nb
        return da, db

    return _emit("cosine", ua @ ub.T, (a, b), rule)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.rows != 1:
        raise DimensionError(f"cosine_similarity expects two 1xD rows, got {a.shape}, {b.shape}")
    return cosine_matrix(a, b)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.__getitem__)
        return name, self.max_rel_err[name]

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_err.items():
            flag = "ok  " if err < self.tol else "FAIL"
            out.append(f"{flag} {name:<24s} max rel err {err:.3e}")
        return out


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``params``
    each time it is called. Every tensor must be float64.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
    for t in params.values():
        t.requires_grad = True
        t.zero_grad()
    with Graph() as g:
        loss = f()
    g.backward(loss)

    report = GradCheckReport(tol=tol)
    for name, t in params.items():
        analytic = t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            numeric.reshape(-1)[k] = (fp - fm) / (2 * h)
        err = relative_error(analytic, numeric)
        k = int(np.argmax(err))
        report.max_rel_err[name] = float(err.reshape(-1)[k])
        report.worst_index[name] = divmod(k, t.cols)
    return report
