"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations the point networks need are provided. Every
op builds a node holding a closure that pushes the output gradient back to
its parents; :meth:`Tensor.backward` walks the graph in reverse topological
order. Gradients accumulate, so a parameter used by several heads receives
the sum of their contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; a scalar node seeds with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _node(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def scale(a: Tensor, factor: float | Tensor) -> Tensor:
    """Multiply by a python float or by a learnable scalar tensor."""
    if isinstance(factor, Tensor):
        if factor.data.size != 1:
            raise ShapeError(f"scale: factor must hold one value, got {factor.shape}")
        s = factor.data.reshape(())
        return _node(
            a.data * s,
            (a, factor),
            lambda g: ((a, g * s), (factor, np.sum(g * a.data).reshape(factor.shape))),
        )
    f = float(factor)
    return _node(a.data * f, (a,), lambda g: ((a, g * f),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)),
    )


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: ((a, g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))


def bias_add(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-C bias to every row of an N x C tensor."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or bias.shape[0] != a.shape[1]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not fit {a.shape}")
    return _node(a.data + bias.data, (a, bias), lambda g: ((a, g), (bias, g.sum(axis=0))))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, slope * a.data), (a,), lambda g: ((a, np.where(pos, g, slope * g)),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max. Ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    first = a.data >= b.data
    return _node(
        np.where(first, a.data, b.data),
        (a, b),
        lambda g: ((a, np.where(first, g, 0.0)), (b, np.where(first, 0.0, g))),
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            (t, np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis))
            for k, t in enumerate(tensors)
        )

    return _node(data, tensors, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return ((a, full),)

    return _node(a.data[start:stop].copy(), (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; repeated indices sum their gradients."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return _node(a.data[index], (a,), backward)


def sparse_matmul(matrix: sp.spmatrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_matmul: {matrix.shape} by {a.shape}")
    mt = matrix.T.tocsr()
    return _node(np.asarray(matrix @ a.data), (a,), lambda g: ((a, np.asarray(mt @ g)),))


def pool_max(a: Tensor, index: np.ndarray) -> Tensor:
    """Max over padded row-index lists.

    ``index`` is Q x H; entries equal to ``a.shape[0]`` are padding. A query
    whose list is all padding yields a zero row. Ties go to the earliest slot.
    """
    n, c = a.shape
    index = np.asarray(index, dtype=np.intp)
    padded = np.vstack([a.data, np.full((1, c), -np.inf)])
    vals = padded[index]  # Q x H x C
    slot = np.argmax(vals, axis=1)  # Q x C
    winner = np.take_along_axis(index, slot, axis=1)  # source row per output cell
    out = np.take_along_axis(vals, slot[:, None, :], axis=1)[:, 0, :]
    empty = ~np.isfinite(out)
    out[empty] = 0.0

    def backward(g):
        full = np.zeros((n + 1, c))
        cols = np.broadcast_to(np.arange(c), winner.shape)
        np.add.at(full, (winner, cols), np.where(empty, 0.0, g))
        return ((a, full[:n]),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions, normalisations, losses


def sum_all(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), (a,), lambda g: ((a, np.full(a.shape, float(g))),))


def global_average_pool(features: Tensor) -> Tensor:
    n = features.shape[0]
    if n == 0:
        raise ValueError("global_average_pool: empty input")
    return _node(
        features.data.mean(axis=0, keepdims=True),
        (features,),
        lambda g: ((features, np.repeat(g / n, n, axis=0)),),
    )


def segment_mean(features: Tensor, lengths: Sequence[int]) -> Tensor:
    """Column means of consecutive row blocks; one output row per block."""
    lengths = np.asarray(lengths, dtype=np.intp)
    if np.any(lengths <= 0):
        raise ValueError("segment_mean: every segment needs at least one row")
    if lengths.sum() != features.shape[0]:
        raise ShapeError(f"segment_mean: lengths sum {lengths.sum()} != rows {features.shape[0]}")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    out = np.add.reduceat(features.data, starts, axis=0) / lengths[:, None]
    return _node(out, (features,), lambda g: ((features, np.repeat(g / lengths[:, None], lengths, axis=0)),))


def softmax_rows(a: Tensor) -> Tensor:
    if np.any(np.isnan(a.data)):
        raise FloatingPointError("softmax_rows: NaN input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return ((a, s * (g - np.sum(g * s, axis=1, keepdims=True))),)

    return _node(s, (a,), backward)


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy over all entries, in log-sum-exp form."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("sigmoid_bce: targets must be 0 or 1")
    z = logits.data
    loss = -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z))
    count = z.size
    sig = np.exp(log_sigmoid(z))
    return _node(np.array(loss.mean()), (logits,), lambda g: ((logits, float(g) * (sig - t) / count),))


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean per-row softmax cross-entropy, skipping rows labelled ``ignore_index``."""
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: labels {y.shape} vs logits {logits.shape}")
    keep = y != ignore_index
    count = int(keep.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    value = -logp[rows, y[rows]].sum() / max(count, 1)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, y[rows]] -= 1.0
        grad[~keep] = 0.0
        return ((logits, float(g) * grad / max(count, 1)),)

    return _node(np.array(value), (logits,), backward)


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: ((a, g * keep),))


# ---------------------------------------------------------------------------
# parameters and modules


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container whose Tensor attributes (and child modules) are parameters."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> Module:
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def _modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            children: Iterable = ()
            if isinstance(value, Module):
                children = (value,)
            elif isinstance(value, (list, tuple)):
                children = value
            elif isinstance(value, dict):
                children = value.values()
            for child in children:
                if isinstance(child, Module):
                    yield from child._modules()


class Linear(Module):
    """Pointwise (1x1) layer: rows times a Cin x Cout matrix, plus optional bias."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True, init: str = "kaiming"):
        if init == "kaiming":
            w = kaiming_uniform(rng, (cin, cout), cin)
        elif init == "classifier":
            w = rng.uniform(-0.01, 0.01, size=(cin, cout))
        elif init == "zeros":
            w = np.zeros((cin, cout))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return bias_add(y, self.bias) if self.bias is not None else y


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(fn().data)
        flat[k] = orig - h
        down = float(fn().data)
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad


def gradient_error(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst per-tensor relative error between backprop and central differences.

    ``fn`` must rebuild the graph from ``params`` and return a scalar. For each
    tensor the error is ``|a - n| / max(|a|, |n|, floor * G)`` in the
    Euclidean norm, where ``G`` is the largest gradient norm among ``params``.
    A tensor whose true gradient is exactly zero (a bias feeding a softmax)
    is thus judged by its rounding noise relative to the check's scale.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = [numerical_gradient(fn, p, h) for p in params]
    scale = max([float(np.linalg.norm(g)) for g in analytic + numeric] + [1e-300])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor * scale)
        worst = max(worst, float(np.linalg.norm(a - n)) / denom)
    return worst
