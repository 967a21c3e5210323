"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a closed set of primitives sufficient to
express the codec networks and their scalar training losses, plus a central
finite-difference oracle used to verify every gradient path. There is no
expression compiler, no fusion, and no mixed precision; everything runs in
64-bit so the finite-difference checks have headroom.

A forward computation builds a graph of ``Tensor`` nodes. ``backward`` walks
the graph once in reverse topological order and returns a gradient for every
named parameter (zeros for parameters the loss does not depend on). Nodes
created from plain arrays are constants and are pruned from the walk.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Mapping

import numpy as np

Array = np.ndarray


class NondeterministicClosureError(RuntimeError):
    """Raised when a closure handed to the finite-difference oracle is not
    reproducible, which would make the numeric derivative meaningless."""


class Tensor:
    """One node of a computation graph wrapping a float64 ndarray.

    ``grad_fn`` maps the output gradient to a tuple of parent gradients
    (aligned with ``parents``). Leaf tensors have no ``grad_fn``; only leaves
    created with ``requires_grad=True`` receive entries in the gradient map.
    """

    __slots__ = ("data", "parents", "grad_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), grad_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.grad_fn: Callable[[Array], tuple] | None = grad_fn
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Wrap an array as a graph constant (no gradient flows into it)."""
    return Tensor(data)


def parameter(data, name=None) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, (a, b), grad_fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return Tensor(a.data * c, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out, (a, b), grad_fn)


def transpose_last(a) -> Tensor:
    """Swap the two trailing axes (used for attention score products)."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ValueError(f"transpose_last expects >=2-d input, got shape {a.data.shape}")

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(np.swapaxes(a.data, -1, -2), (a,), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.data, 0.0), (a,), grad_fn)


def softmax(a) -> Tensor:
    """Row-stable softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return Tensor(out, (a,), grad_fn)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), grad_fn)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x E) by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def grad_fn(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (buf,)

    return Tensor(out, (table,), grad_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale/shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv
    out = gain.data * xhat + bias.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        g_bias = g.sum(axis=reduce_axes) if reduce_axes else g
        gy = g * gain.data
        g_a = inv * (gy - gy.mean(axis=-1, keepdims=True)
                     - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return g_a, g_gain.reshape(gain.data.shape), g_bias.reshape(bias.data.shape)

    return Tensor(out, (a, gain, bias), grad_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(tensors), grad_fn)


def slice_tensor(a, key) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with accumulation."""
    a = _as_tensor(a)
    out = a.data[key]

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return Tensor(out, (a,), grad_fn)


def repeat_rows(a, k: int) -> Tensor:
    """Repeat each leading-axis row k times; gradients sum within each group."""
    a = _as_tensor(a)
    out = np.repeat(a.data, k, axis=0)

    def grad_fn(g):
        return (g.reshape((a.data.shape[0], k) + a.data.shape[1:]).sum(axis=1),)

    return Tensor(out, (a,), grad_fn)


def take_along_last(a, ids) -> Tensor:
    """Pick one entry per row along the last axis; ids shaped like a.shape[:-1]."""
    a = _as_tensor(a)
    ids = np.asarray(ids)
    if ids.shape != a.data.shape[:-1]:
        raise ValueError(f"index shape {ids.shape} does not match rows {a.data.shape[:-1]}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, ids[..., None], g[..., None], axis=-1)
        return (buf,)

    return Tensor(out, (a,), grad_fn)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out, (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def ste_threshold(a) -> Tensor:
    """Hard 0/1 threshold at zero with a straight-through (identity) gradient.

    Used only on the cross-entropy pre-training path; reinforcement stages
    never build a gradient through the quantizer.
    """
    a = _as_tensor(a)

    def grad_fn(g):
        return (g,)

    return Tensor((a.data > 0).astype(np.float64), (a,), grad_fn)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "embedding-lookup": embedding_lookup,
    "layer-norm": layer_norm,
    "concat": concat,
    "slice": slice_tensor,
}


def apply_primitive(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the enumerated primitives by name."""
    try:
        op = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return op(*args, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the gradient-relevant subgraph (constants pruned)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Array]:
    """Gradient of a scalar loss with respect to every named parameter.

    Parameters the loss does not depend on get zero gradients. Each graph
    node is visited exactly once; the loss graph is consumed (gradients are
    not cached on nodes, so re-running requires a fresh forward pass).
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    leaf_grads: dict[int, Array] = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad_fn is None:
                leaf_grads[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
    return {name: leaf_grads.get(id(p), np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# Parameter helpers
# ---------------------------------------------------------------------------

def parameters(arrays: Mapping[str, Array]) -> dict[str, Tensor]:
    """Build a parameter store (name -> trainable leaf) from raw arrays."""
    return {name: parameter(a, name=name) for name, a in arrays.items()}


def detach(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Non-trainable views sharing the same storage (for frozen forward passes)."""
    return {name: Tensor(p.data) for name, p in params.items()}


def fingerprint(params: Mapping[str, Tensor]) -> str:
    """Order-independent content hash of a parameter store."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    closure: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure`` must rebuild the loss from the current parameter values on
    every call and be deterministic; a second evaluation that differs from
    the first is reported as an oracle failure. Up to ``max_coords``
    coordinates are sampled across all parameters.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    first = closure().item()
    if closure().item() != first:
        raise NondeterministicClosureError(
            "closure returned different losses on repeated evaluation")
    analytic = backward(closure(), params)

    coords = [(name, idx) for name, p in params.items()
              for idx in range(p.data.size)]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        saved = flat[idx]
        flat[idx] = saved + eps
        up = closure().item()
        flat[idx] = saved - eps
        down = closure().item()
        flat[idx] = saved
        numeric = (up - down) / (2 * eps)
        exact = analytic[name].reshape(-1)[idx]
        err = abs(exact - numeric) / (abs(exact) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
