"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

Every operation builds a node that remembers its inputs and a local gradient
rule; ``backward`` walks the resulting graph once in reverse topological
order. Dense data lives in numpy arrays; sparse adjacency matrices enter the
graph only through :func:`sparse_matmul`, whose sparse operand is a constant.

Broadcasting is deliberately restricted: scalars combine with anything, and
``add``/``sub`` additionally accept a row-vector bias against a matrix.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """One tape node: cached forward value, input references, gradient rule."""

    __slots__ = ("data", "parents", "grad_rule", "requires_grad", "grad", "op")

    def __init__(self, data, parents=(), grad_rule=None, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = parents
        self.grad_rule: Callable[[np.ndarray], None] | None = grad_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def leaf(data) -> Tensor:
    """A trainable leaf tensor (gradient target)."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(np.asarray(x, dtype=np.float64))


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1


def _is_row_bias(a: Tensor, b: Tensor) -> bool:
    # b broadcasts as one row across a's rows
    return a.data.ndim == 2 and b.data.ndim in (1, 2) and (
        b.data.shape == (a.data.shape[1],) or b.data.shape == (1, a.data.shape[1])
    )


def _reduce_row_bias(g: np.ndarray, b: Tensor) -> np.ndarray:
    summed = g.sum(axis=0)
    return summed.reshape(b.data.shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ok = a.shape == b.shape or _is_scalar(a) or _is_scalar(b) or _is_row_bias(a, b)
    _check(ok, "add", a.shape, b.shape)
    out = Tensor(a.data + b.data, (a, b), op="add")

    def rule(g):
        if a.shape == out.shape:
            _accumulate(a, g)
        else:
            _accumulate(a, np.sum(g).reshape(a.data.shape) if _is_scalar(a) else g)
        if b.shape == out.shape:
            _accumulate(b, g)
        elif _is_scalar(b):
            _accumulate(b, np.sum(g).reshape(b.data.shape))
        else:
            _accumulate(b, _reduce_row_bias(g, b))

    out.grad_rule = rule
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ok = a.shape == b.shape or _is_scalar(a) or _is_scalar(b) or _is_row_bias(a, b)
    _check(ok, "sub", a.shape, b.shape)
    out = Tensor(a.data - b.data, (a, b), op="sub")

    def rule(g):
        if a.shape == out.shape:
            _accumulate(a, g)
        else:
            _accumulate(a, np.sum(g).reshape(a.data.shape))
        if b.shape == out.shape:
            _accumulate(b, -g)
        elif _is_scalar(b):
            _accumulate(b, -np.sum(g).reshape(b.data.shape))
        else:
            _accumulate(b, -_reduce_row_bias(g, b))

    out.grad_rule = rule
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ok = a.shape == b.shape or _is_scalar(a) or _is_scalar(b)
    _check(ok, "mul", a.shape, b.shape)
    out = Tensor(a.data * b.data, (a, b), op="mul")

    def rule(g):
        ga = g * b.data
        gb = g * a.data
        _accumulate(a, ga if a.shape == out.shape else np.sum(ga).reshape(a.data.shape))
        _accumulate(b, gb if b.shape == out.shape else np.sum(gb).reshape(b.data.shape))

    out.grad_rule = rule
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ok = a.shape == b.shape or _is_scalar(a) or _is_scalar(b)
    _check(ok, "div", a.shape, b.shape)
    out = Tensor(a.data / b.data, (a, b), op="div")

    def rule(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        _accumulate(a, ga if a.shape == out.shape else np.sum(ga).reshape(a.data.shape))
        _accumulate(b, gb if b.shape == out.shape else np.sum(gb).reshape(b.data.shape))

    out.grad_rule = rule
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, (a, b), op="matmul")

    def rule(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out.grad_rule = rule
    return out


def sparse_matmul(s, b) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    b = _wrap(b)
    s = sp.csr_matrix(s, dtype=np.float64)
    _check(b.data.ndim == 2 and s.shape[1] == b.shape[0], "sparse_matmul", s.shape, b.shape)
    out = Tensor(np.asarray(s @ b.data), (b,), op="sparse_matmul")
    st = s.T.tocsr()

    def rule(g):
        _accumulate(b, np.asarray(st @ g))

    out.grad_rule = rule
    return out


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    _check(len(parts) > 0, "concat")
    nd = parts[0].data.ndim
    _check(all(p.data.ndim == nd for p in parts), "concat", *[p.shape for p in parts])
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), op="concat")
    sizes = [p.shape[axis] for p in parts]

    def rule(g):
        offset = 0
        for p, size in zip(parts, sizes):
            idx = [slice(None)] * nd
            idx[axis] = slice(offset, offset + size)
            _accumulate(p, g[tuple(idx)])
            offset += size

    out.grad_rule = rule
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,), op="relu")

    def rule(g):
        _accumulate(a, g * (a.data > 0))

    out.grad_rule = rule
    return out


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data), (a,), op="leaky_relu")

    def rule(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope))

    out.grad_rule = rule
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s, (a,), op="sigmoid")

    def rule(g):
        _accumulate(a, g * s * (1.0 - s))

    out.grad_rule = rule
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), (a,), op="log")

    def rule(g):
        _accumulate(a, g / a.data)

    out.grad_rule = rule
    return out


def power(a, exponent: float) -> Tensor:
    """Elementwise a ** exponent for a fixed scalar exponent."""
    a = _wrap(a)
    out = Tensor(np.power(a.data, exponent), (a,), op="pow")

    def rule(g):
        _accumulate(a, g * exponent * np.power(a.data, exponent - 1.0))

    out.grad_rule = rule
    return out


def mean(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.mean(a.data), (a,), op="mean")
    n = a.data.size

    def rule(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    out.grad_rule = rule
    return out


def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sum(a.data), (a,), op="sum")

    def rule(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    out.grad_rule = rule
    return out


def trace(a) -> Tensor:
    a = _wrap(a)
    _check(a.data.ndim == 2 and a.shape[0] == a.shape[1], "trace", a.shape)
    out = Tensor(np.trace(a.data), (a,), op="trace")

    def rule(g):
        _accumulate(a, float(g) * np.eye(a.shape[0]))

    out.grad_rule = rule
    return out


def transpose(a) -> Tensor:
    a = _wrap(a)
    _check(a.data.ndim == 2, "transpose", a.shape)
    out = Tensor(a.data.T.copy(), (a,), op="transpose")

    def rule(g):
        _accumulate(a, g.T)

    out.grad_rule = rule
    return out


def frobenius_norm_sq(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sum(a.data * a.data), (a,), op="frobenius_norm_sq")

    def rule(g):
        _accumulate(a, 2.0 * float(g) * a.data)

    out.grad_rule = rule
    return out


def row_normalize(a) -> Tensor:
    """Divide each row by its sum; all-zero rows pass through unchanged."""
    a = _wrap(a)
    _check(a.data.ndim == 2, "row_normalize", a.shape)
    sums = a.data.sum(axis=1, keepdims=True)
    safe = np.where(sums == 0.0, 1.0, sums)
    y = a.data / safe
    out = Tensor(y, (a,), op="row_normalize")

    def rule(g):
        inner = np.sum(g * y, axis=1, keepdims=True)
        ga = (g - inner) / safe
        ga = np.where(sums == 0.0, 0.0, ga)
        _accumulate(a, ga)

    out.grad_rule = rule
    return out


def softmax(a) -> Tensor:
    """Row-wise softmax."""
    a = _wrap(a)
    _check(a.data.ndim == 2, "softmax", a.shape)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (a,), op="softmax")

    def rule(g):
        inner = np.sum(g * y, axis=1, keepdims=True)
        _accumulate(a, y * (g - inner))

    out.grad_rule = rule
    return out


def gather_rows(a, indices) -> Tensor:
    """Select rows by index; gradient scatter-adds back into the source."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    _check(a.data.ndim == 2, "gather_rows", a.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape}")
    out = Tensor(a.data[idx], (a,), op="gather_rows")

    def rule(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    out.grad_rule = rule
    return out


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values into [low, high]; gradient is zero outside the window."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, low, high), (a,), op="clip")

    def rule(g):
        _accumulate(a, g * ((a.data >= low) & (a.data <= high)))

    out.grad_rule = rule
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for every reachable tensor that requires a gradient.

    The loss must be scalar. Each node is visited exactly once, in reverse
    topological order, so fan-out gradients accumulate correctly.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad_rule is not None and node.grad is not None:
            node.grad_rule(node.grad)


# ---------------------------------------------------------------------------
# named parameter collections + SGD
# ---------------------------------------------------------------------------

class ModelParams:
    """Ordered collection of named leaf tensors for one model replica."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for name, arr in tensors.items():
                self._tensors[name] = leaf(np.array(arr, dtype=np.float64))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({name: t.data.copy() for name, t in self._tensors.items()})

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients from the last backward pass (zeros where untouched)."""
        out = {}
        for name, t in self._tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._tensors.values())


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> ModelParams:
    """One gradient-descent update, p <- p - lr * g, returning new params."""
    if set(grads) != set(params.names()):
        missing = set(params.names()) ^ set(grads)
        raise ValueError(f"sgd_step: parameter/gradient name mismatch: {sorted(missing)}")
    updated = {}
    for name in params.names():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != params[name].data.shape:
            raise ShapeError(
                f"sgd_step: gradient shape {g.shape} != param shape "
                f"{params[name].data.shape} for {name!r}")
        updated[name] = params[name].data - lr * g
    return ModelParams(updated)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then per tensor name/shape/raw payload
# ---------------------------------------------------------------------------

_MAGIC = b"FDML"
_VERSION = 1


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name in params.names():
            arr = params[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a parameter checkpoint: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
    return ModelParams(tensors)
