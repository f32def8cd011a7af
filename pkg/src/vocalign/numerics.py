"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray. Operations on tensors that require
gradients record their operands and a local derivative closure; the tape is
implicit in those references and is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording any operations."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return _node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return _node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return _node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data
        return _node(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _node(x ** exponent, (self,),
                     lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _node(a.data @ b.data, (a, b), bw)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise ------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return _node(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def clamp_min(self, floor: float) -> "Tensor":
        x = self.data
        return _node(np.maximum(x, floor), (self,), lambda g: (g * (x > floor),))

    def gelu(self) -> "Tensor":
        # tanh approximation; smooth everywhere, which keeps finite differences honest
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        x2 = x * x
        t = np.tanh(c * x * (1.0 + 0.044715 * x2))
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return _node(out, (self,), bw)

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _node(np.transpose(self.data, axes), (self,),
                     lambda g: (np.transpose(g, inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with integer arrays, not tensors")
        shape = self.shape
        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros(shape)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return _node(self.data[idx], (self,), bw)

    def take(self, indices, axis: int) -> "Tensor":
        indices = np.asarray(indices, dtype=np.intp)
        axis = axis % self.ndim
        if indices.size and (indices.min() < -self.shape[axis] or indices.max() >= self.shape[axis]):
            raise ContractError(f"index out of range for axis {axis} of extent {self.shape[axis]}")
        shape = self.shape

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, (slice(None),) * axis + (indices,), g)
            return (full,)

        return _node(np.take(self.data, indices, axis=axis), (self,), bw)

    # -- composite helpers ------------------------------------------------
    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# free-standing primitives
# ---------------------------------------------------------------------------

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    logits = as_tensor(logits)
    axis = _check_axis(logits, axis)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (logits,), bw)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    axis = _check_axis(logits, axis)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (logits,), bw)


def standardize(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along ``axis`` (layer-norm without affine)."""
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).sum(axis=axis, keepdims=True) / n
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (x,), bw)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors are rejected."""
    norms = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalise a zero-norm vector")
    return x / (x * x).sum(axis=axis, keepdims=True).sqrt()


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors, as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"expected two vectors of equal length, got {a.shape} and {b.shape}")
    na2, nb2 = float(a.data @ a.data), float(b.data @ b.data)
    if na2 == 0.0 or nb2 == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    dot = (a * b).sum()
    return dot / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def one_hot(labels: np.ndarray, num_classes: int, ignore_index: int = -1) -> np.ndarray:
    """One-hot encode an integer map; ``ignore_index`` pixels become all-zero rows."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,))
    valid = labels != ignore_index
    if np.any(valid & ((labels < 0) | (labels >= num_classes))):
        raise ShapeError("label outside [0, num_classes)")
    idx = np.nonzero(valid)
    out[idx + (labels[valid],)] = 1.0
    return out


def pixelwise_cross_entropy(pred: Tensor, target, weights=None) -> Tensor:
    """Summed cross-entropy ``-sum y log p`` over every pixel and class.

    ``target`` is one-hot along the last axis; all-zero rows mark ignored
    pixels and contribute nothing. Probabilities are clamped at 1e-12 before
    the log. Optional ``weights`` scale each pixel.
    """
    pred = as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if weights is not None:
        target = target * np.asarray(weights, dtype=np.float64)[..., None]
    return -(pred.clamp_min(LOG_EPS).log() * target).sum()


def entropy_map(probs: Tensor, axis: int = -1) -> Tensor:
    """Per-pixel Shannon entropy ``-sum p log p`` (natural log)."""
    return -(probs * probs.clamp_min(LOG_EPS).log()).sum(axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every trainable leaf reachable from ``loss``.

    Returns a map from leaf tensor to its gradient; gradients are also
    accumulated into ``leaf.grad``. Leaves that do not require gradients never
    appear. A loss that is constant w.r.t. every leaf yields an empty map.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64)
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    trainable: bool
    n_checked: int
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
    floor: float = 1e-6,
    stencil: int = 2,
) -> GradCheck:
    """Compare ``backward`` against central differences of ``f`` at ``x``.

    ``f`` must rebuild its graph from ``x`` on every call. ``indices`` selects
    flat coordinates to probe (all by default). ``stencil=4`` switches to the
    fourth-order five-point formula, which tolerates a larger ``h`` and so
    keeps round-off small when ``f`` is large. Frozen tensors are skipped and
    reported with ``trainable=False``.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if not x.requires_grad:
        return GradCheck(float("nan"), False, 0)
    x.grad = None
    grads = backward(f(x))
    analytic_full = grads.get(x, np.zeros(x.shape)).reshape(-1)
    coords = np.arange(x.size) if indices is None else np.asarray(indices)

    base = x.data

    def at(k, step):
        moved = base.copy().reshape(-1)
        moved[k] += step
        x.data = moved.reshape(base.shape)
        return f(x).item()

    numeric = np.empty(len(coords))
    with no_grad():
        for i, k in enumerate(coords):
            if stencil == 2:
                numeric[i] = (at(k, h) - at(k, -h)) / (2.0 * h)
            else:
                numeric[i] = (8.0 * (at(k, h) - at(k, -h)) - (at(k, 2 * h) - at(k, -2 * h))) / (12.0 * h)
    x.data = base
    x.grad = None
    analytic = analytic_full[coords]
    err = relative_error(analytic, numeric, floor)
    return GradCheck(float(err.max()) if err.size else 0.0, True, len(coords), analytic, numeric)
