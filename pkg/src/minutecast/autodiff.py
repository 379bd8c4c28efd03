"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is taped implicitly: every op result records its parent tensors and
a backward closure, and every tensor carries a monotonically increasing
insertion id. Because an op's output is always created after its inputs,
descending insertion order is a valid reverse topological order, and backward
runs are bitwise-reproducible.

Gradients follow an explicit-reset model: ``backward`` accumulates into
``.grad`` and never clears it, so callers (optimizer loops, fan-out tests)
zero gradients themselves via ``zero_grads``.

Broadcasting is supported for leading batch dimensions (plus size-1 axes);
gradients are summed back to the parent shape.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_NODE_IDS = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array participating in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        data = _binary_forward(self, other, np.add, "add")

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return from_op(data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other)
        data = _binary_forward(self, other, np.subtract, "sub")

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return from_op(data, (self, other), backward)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        other = _coerce(other)
        data = _binary_forward(self, other, np.multiply, "mul")

        def backward(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )

        return from_op(data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return from_op(-self.data, (self,), lambda g: (-g,))

    def scale(self, s: float) -> "Tensor":
        """Multiply by a python scalar (no graph node for the scalar)."""
        s = float(s)
        return from_op(self.data * s, (self,), lambda g: (g * s,))

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return from_op(out_data, (self,), lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        _require_domain(self.data, self.data > 0, "ln")
        return from_op(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self) -> "Tensor":
        _require_domain(self.data, self.data > 0, "sqrt")
        out_data = np.sqrt(self.data)
        return from_op(out_data, (self,), lambda g: (g * 0.5 / out_data,))

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return from_op(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),))

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        return from_op(
            out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),)
        )

    # -- contractions and reductions --------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape, nd = self.shape, self.ndim

        def backward(g):
            return (_spread_reduction(g, shape, nd, axis, keepdims),)

        return from_op(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.mean(axis=axis, keepdims=keepdims)
        shape, nd = self.shape, self.ndim
        count = self.size if axis is None else _axis_count(shape, axis)

        def backward(g):
            return (_spread_reduction(g, shape, nd, axis, keepdims) / count,)

        return from_op(data, (self,), backward)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, axes) -> "Tensor":
        inv = tuple(np.argsort(axes))
        return from_op(
            np.transpose(self.data, axes),
            (self,),
            lambda g: (np.transpose(g, inv),),
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return from_op(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),)
        )

    def __getitem__(self, key) -> "Tensor":
        data = self.data[key]
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return from_op(data, (self,), backward)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _binary_forward(a: Tensor, b: Tensor, ufunc, name: str) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _require_domain(data: np.ndarray, ok: np.ndarray, name: str):
    if not ok.all():
        idx = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise NumericError(
            f"{name} domain violation at index {idx}: value {float(data[idx])}"
        )


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def _spread_reduction(g, shape, ndim, axis, keepdims):
    """Broadcast a reduction gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        axes = tuple(a % ndim for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def from_op(data, parents, backward) -> Tensor:
    """Create a graph node.

    ``backward`` receives the output gradient array and returns one gradient
    array (or None) per parent, already shaped like that parent's data.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return from_op(data, (a, b), backward)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Row softmax over the last dimension, stabilized by max subtraction."""
    if t.shape[-1] < 1:
        raise ContractError("softmax requires a non-empty last dimension")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return from_op(out_data, (t,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return from_op(data, tuple(tensors), backward)


def take_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis -2: ``out[..., i, :] = t[..., idx[..., i], :]``.

    ``idx`` must carry the same leading dims as ``t``; repeated indices are
    allowed (backward scatter-adds).
    """
    idx = np.asarray(idx)
    if idx.shape[:-1] != t.shape[:-2]:
        raise DimensionError(
            f"take_rows: index shape {idx.shape} does not match tensor {t.shape}"
        )
    data = np.take_along_axis(t.data, idx[..., None], axis=-2)
    lead = int(np.prod(t.shape[:-2], dtype=np.int64)) if t.ndim > 2 else 1
    rows, width = t.shape[-2], t.shape[-1]

    def backward(g):
        full = np.zeros(t.shape)
        flat_idx = (np.arange(lead)[:, None] * rows + idx.reshape(lead, -1)).ravel()
        np.add.at(full.reshape(lead * rows, width), flat_idx, g.reshape(-1, width))
        return (full,)

    return from_op(data, (t,), backward)


def scatter_rows(base: Tensor, rows: Tensor, idx: np.ndarray) -> Tensor:
    """Overwrite ``base[..., idx[..., i], :]`` with ``rows[..., i, :]``.

    Indices must be distinct within each leading slice, so the overwrite is
    well defined and the backward split is exact.
    """
    idx = np.asarray(idx)
    if idx.shape[:-1] != base.shape[:-2] or rows.shape[-2] != idx.shape[-1]:
        raise DimensionError(
            f"scatter_rows: index {idx.shape} incompatible with base {base.shape} "
            f"and rows {rows.shape}"
        )
    expanded = np.broadcast_to(idx[..., None], idx.shape + (base.shape[-1],))
    data = base.data.copy()
    np.put_along_axis(data, expanded, rows.data, axis=-2)

    def backward(g):
        g_base = g.copy()
        np.put_along_axis(g_base, expanded, 0.0, axis=-2)
        g_rows = np.take_along_axis(g, expanded, axis=-2)
        return g_base, g_rows

    return from_op(data, (base, rows), backward)


def embedding_lookup(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}"
        )
    data = table.data[idx]
    width = table.shape[-1]

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx.ravel(), g.reshape(-1, width))
        return (full,)

    return from_op(data, (table,), backward)


class GradGraph:
    """Snapshot of the op subgraph reachable from a root tensor.

    ``nodes`` is sorted by insertion id; reversing it yields a reverse
    topological order in which each backward closure runs exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradGraph":
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def run_backward(self, root: Tensor):
        # Pass-local accumulators keep repeated backward calls additive:
        # each call contributes exactly one derivative to persistent .grad.
        local = {root.node_id: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = local.get(node.node_id)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = local.get(parent.node_id)
                local[parent.node_id] = pg if acc is None else acc + pg
        for node in self.nodes:
            if node.requires_grad and node.node_id in local:
                g = local[node.node_id]
                node.grad = np.array(g) if node.grad is None else node.grad + g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad tensor."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    GradGraph.from_root(loss).run_backward(loss)


def zero_grads(params):
    for p in params:
        p.grad = None


def ln(t: Tensor) -> Tensor:
    return t.log()


def log_sum_exp_lastdim(data: np.ndarray) -> np.ndarray:
    """Numerically stable LSE over the last axis of a plain array."""
    mx = data.max(axis=-1, keepdims=True)
    return np.log(np.exp(data - mx).sum(axis=-1)) + np.squeeze(mx, -1)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
