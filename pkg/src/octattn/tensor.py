"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every tensor produced by an operation on inputs that require gradients keeps
a reference to its parents and a closure computing the vector-Jacobian
product.  ``Tensor.backward`` walks that graph once in reverse topological
order, stores ``.grad`` on leaves and then drops the graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a function under gradient check returns a non-finite value."""


class Tensor:
    """Immutable n-dimensional float64 array that can take part in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, power(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate gradients into every leaf that requires them, then free the graph."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.shape)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return Tensor._from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return Tensor._from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was not clamped."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of ``x`` by integer ``index`` (any shape); -1 yields a zero row."""
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    out = x.data[safe]
    if not valid.all():
        out = out * valid.reshape(valid.shape + (1,) * (x.ndim - 1))

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index[valid], g[valid])
        return (grad,)

    return Tensor._from_op(out, (x,), backward, "gather")


def segment_max(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> tuple[Tensor, np.ndarray]:
    """Row-wise max per segment.

    Returns the reduced tensor of shape ``(num_segments, ...)`` together with the
    argmax row index for every output entry; ties go to the lowest row index and
    empty segments get 0 with argmax -1.  Backward routes gradient to argmax rows only.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    m = x.shape[0]
    flat = x.data.reshape(m, -1)
    out = np.zeros((num_segments, flat.shape[1]))
    argmax = np.full((num_segments, flat.shape[1]), -1, dtype=np.int64)
    if m:
        perm = np.argsort(seg, kind="stable")
        sorted_seg = seg[perm]
        starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
        present = sorted_seg[starts]
        vals = flat[perm]
        seg_max = np.maximum.reduceat(vals, starts, axis=0)
        hit = vals == seg_max[np.searchsorted(present, sorted_seg)]
        cand = np.where(hit, perm[:, None], m)
        out[present] = seg_max
        argmax[present] = np.minimum.reduceat(cand, starts, axis=0)
    out = out.reshape((num_segments,) + x.shape[1:])
    argmax = argmax.reshape((num_segments,) + x.shape[1:])
    cols = np.broadcast_to(np.arange(flat.shape[1]), (num_segments, flat.shape[1]))

    def backward(g):
        grad = np.zeros_like(flat)
        a = argmax.reshape(num_segments, -1)
        ok = a >= 0
        grad[a[ok], cols[ok]] = g.reshape(num_segments, -1)[ok]
        return (grad.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "segment_max"), argmax


def segment_mean(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    total = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(total, seg, x.data)
    shape = (num_segments,) + (1,) * (x.ndim - 1)
    denom = np.maximum(counts, 1.0).reshape(shape)

    def backward(g):
        return ((g / denom)[seg],)

    return Tensor._from_op(total / denom, (x,), backward, "segment_mean")


# ---------------------------------------------------------------------------
# neural-network building blocks


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None, return_flags: bool = False):
    """Softmax over the last axis.

    ``mask`` marks valid entries (True) and broadcasts against ``x``.  Masked
    entries get weight exactly 0.  A row with no valid entry comes back all
    zero; with ``return_flags`` the boolean array of such rows is returned too.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    row_max = z.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(row_max)
    row_max = np.where(empty, 0.0, row_max)
    e = np.exp(z - row_max)
    s = e.sum(axis=-1, keepdims=True)
    out = np.where(empty, 0.0, e / np.where(empty, 1.0, s))

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    result = Tensor._from_op(out, (x,), backward, "softmax")
    if return_flags:
        return result, empty[..., 0]
    return result


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over the row axis with current-batch statistics."""
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects m x d input, got {x.shape}")
    centered = x - mean(x, axis=0, keepdims=True)
    var = mean(mul(centered, centered), axis=0, keepdims=True)
    normed = mul(centered, power(var + eps, -0.5))
    return add(mul(normed, gamma), beta)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    """Per-input comparison of tape gradients against central differences."""

    max_rel_error: dict = field(default_factory=dict)
    analytic_norm: dict = field(default_factory=dict)
    numeric_norm: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def relative_error(a: np.ndarray, n: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), eps)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[Sequence[Tensor], Mapping[str, Tensor]],
    h: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients of scalar ``f`` with central finite differences.

    ``inputs`` is a sequence (passed positionally) or a mapping (passed as
    keyword arguments).  ``max_elements`` limits the checked entries per input to
    a seeded random subset, which keeps large parameter sets affordable.
    """
    if isinstance(inputs, Mapping):
        names = list(inputs)
        arrays = [np.array(inputs[k].data) for k in names]

        def call(tensors):
            return f(**dict(zip(names, tensors)))
    else:
        names = [f"input{i}" for i in range(len(inputs))]
        arrays = [np.array(t.data) for t in inputs]

        def call(tensors):
            return f(*tensors)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = call(leaves)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise GradCheckError("function is not finite at the base point")
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(i: int, arr: np.ndarray) -> float:
        tensors = [Tensor(a) for a in arrays]
        tensors[i] = Tensor(arr)
        val = call(tensors).data
        if not np.isfinite(val).all():
            raise GradCheckError(f"non-finite value while perturbing {names[i]}")
        return float(val.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    report = GradReport()
    for i, (name, base) in enumerate(zip(names, arrays)):
        flat_idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat_idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
        numeric = np.zeros(flat_idx.size)
        for j, idx in enumerate(flat_idx):
            work = base.copy().reshape(-1)
            work[idx] = base.reshape(-1)[idx] + h
            fp = evaluate(i, work.reshape(base.shape))
            work[idx] = base.reshape(-1)[idx] - h
            fm = evaluate(i, work.reshape(base.shape))
            numeric[j] = (fp - fm) / (2.0 * h)
        a = analytic[i].reshape(-1)[flat_idx]
        err = relative_error(a, numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.analytic_norm[name] = float(np.linalg.norm(a))
        report.numeric_norm[name] = float(np.linalg.norm(numeric))
        report.checked[name] = int(flat_idx.size)
        logger.debug("grad_check %s: max rel err %.3e", name, report.max_rel_error[name])
    return report
