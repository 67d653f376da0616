"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Supports exactly the operations the routing and prediction networks need:
dense algebra, elementwise nonlinearities, row softmax, row gather/concat,
a permutation-exact neighbour-mean aggregation, and clamped point-to-segment
projection. No broadcasting beyond row-wise bias addition, no GPU, no fusion.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericError, ShapeError

# Raise NumericError as soon as any op produces a non-finite entry.
FINITE_CHECKS = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError("operation produced NaN or Inf")


class Tensor:
    """An n-d float64 value, optionally tracked for reverse-mode gradients.

    `grad` accumulates across backward() calls until `zero_grad()`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None  # fn(pass_grad) -> tuple of parent grads (or None)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate `.grad` of every reachable tensor with requires_grad.

        Repeated calls without zero_grad() accumulate. The tensor must be a
        scalar (size 1).
        """
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators used by layer code.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _make(data, parents, vjp):
    """Build a result tensor, recording the graph edge when tracking is on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Pass-local gradients live in a dict so a second backward() over the same
    graph adds exactly one more copy of each gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ShapeError("loss is not connected to any tensor with requires_grad")

    # Iterative topological order over the recorded graph.
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; either same shape, or b a 1-D bias broadcast over rows of 2-D a."""
    if a.data.shape == b.data.shape:
        out = a.data + b.data
        _check_finite(out)
        return _make(out, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = a.data + b.data
        _check_finite(out)
        return _make(out, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + c
    _check_finite(out)
    return _make(out, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    _check_finite(out)
    return _make(out, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data
    _check_finite(out)
    return _make(out, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data
    _check_finite(out)
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make(out, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable logistic
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    shape = a.data.shape
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    _check_finite(out)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into place."""
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]
    n = a.data.shape[0]

    def vjp(g):
        da = np.zeros((n, a.data.shape[1]))
        np.add.at(da, idx, g)
        return (da,)

    return _make(out, (a,), vjp)


def concat_rows(tensors) -> Tensor:
    """Stack 2-D tensors vertically; backward splits the gradient."""
    tensors = list(tensors)
    cols = {t.data.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ShapeError("concat_rows expects equal column counts")
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make(out, tuple(tensors), vjp)


def neighbour_mean(x: Tensor, adjacency: np.ndarray) -> Tensor:
    """Per-node mean of neighbour feature rows.

    Summation runs over value-sorted neighbour entries so the result is
    bit-identical under any relabelling of the nodes. Nodes without
    neighbours aggregate to the zero vector. `adjacency` is a constant
    boolean matrix, not part of the gradient graph.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n, d = x.data.shape
    if adj.shape != (n, n):
        raise ShapeError(f"adjacency shape {adj.shape} does not match {n} nodes")
    deg = adj.sum(axis=1)
    out = np.zeros((n, d))
    # Group nodes by degree so each group is one vectorised sorted-sum.
    for k in np.unique(deg):
        if k == 0:
            continue
        nodes = np.nonzero(deg == k)[0]
        neigh = np.nonzero(adj[nodes])[1].reshape(len(nodes), k)
        gathered = x.data[neigh]                       # (m, k, d)
        out[nodes] = np.sort(gathered, axis=1).sum(axis=1) / k

    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)

    def vjp(g):
        # d(mean_i)/d(x_j) = 1/deg_i for j in N(i); summand order is
        # irrelevant to the derivative.
        return ((adj.T * inv_deg) @ g,)

    return _make(out, (x,), vjp)


def project_to_segments(points: Tensor, seg_a: np.ndarray, seg_b: np.ndarray) -> Tensor:
    """Clamp-project each 2-D point onto the nearest of the given segments.

    Ties pick the lowest segment index. Differentiable in the points: the
    Jacobian is the projection onto the segment direction for interior
    feet and zero where the foot clamps to an endpoint.
    """
    if points.data.ndim != 2 or points.data.shape[1] != 2:
        raise ShapeError("project_to_segments expects an (n, 2) tensor of points")
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    if len(a) == 0:
        raise ShapeError("no segments to project onto")
    d = b - a                                          # (m, 2)
    len2 = (d * d).sum(axis=1)                         # (m,)
    p = points.data                                    # (n, 2)
    # t[i, j]: foot parameter of point i on segment j, clamped to [0, 1]
    t = ((p[:, None, :] - a[None, :, :]) * d[None, :, :]).sum(axis=2) / len2[None, :]
    t_cl = np.clip(t, 0.0, 1.0)
    feet = a[None, :, :] + t_cl[:, :, None] * d[None, :, :]
    diff = p[:, None, :] - feet
    dist2 = (diff * diff).sum(axis=2)
    best = dist2.argmin(axis=1)                        # lowest index wins ties
    rows = np.arange(len(p))
    out = feet[rows, best]
    interior = (t[rows, best] > 0.0) & (t[rows, best] < 1.0)
    u = d[best] / np.sqrt(len2[best])[:, None]         # unit directions

    def vjp(g):
        # dP/dp = u u^T on the segment interior, 0 at clamped endpoints.
        coef = (g * u).sum(axis=1) * interior
        return (coef[:, None] * u,)

    return _make(out, (points,), vjp)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Variance-preserving uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
