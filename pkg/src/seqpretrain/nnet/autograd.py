"""A small reverse-mode autodiff engine over numpy arrays.

Each op computes its value eagerly and, when any input requires a gradient,
records a closure mapping the upstream gradient to per-input gradients.
``backward`` walks the recorded graph once in reverse topological order and
then releases it; calling it again on the same graph raises
``GraphStateError``.

Besides the elementwise/matmul primitives, a few fused ops (layer norm,
softmax, log-softmax, the two training losses) carry hand-derived backward
rules. That keeps the node count of a Transformer step in the hundreds.
"""

from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np


class GraphStateError(RuntimeError):
    """Backward requested on something that is not a live recorded graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return scale(self, 1.0 / scalar)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitives ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _node(table.data[ids], (table,), bw)


# -- fused ops -------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node(y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep.astype(x.data.dtype)))


def weighted_sq_error(pred: Tensor, target: np.ndarray, weights: np.ndarray,
                      denom: float) -> Tensor:
    """``sum_{b,t} weights[b,t] * ||pred[b,t] - target[b,t]||^2 / denom``."""
    diff = pred.data - target
    w = weights[..., None]
    value = (w * diff * diff).sum() / denom

    def bw(g):
        return (g * 2.0 * w * diff / denom,)

    return _node(np.asarray(value), (pred,), bw)


def smoothed_nll(logprobs: Tensor, targets: np.ndarray, eps_ls: float,
                 valid: np.ndarray) -> Tensor:
    """Label-smoothed cross entropy averaged over ``valid`` positions.

    The target distribution at each position is ``(1 - eps_ls)`` on the
    reference token plus ``eps_ls / V`` spread over the whole vocabulary.
    """
    V = logprobs.shape[-1]
    n = int(valid.sum())
    q = np.full(logprobs.shape, eps_ls / V, dtype=logprobs.data.dtype)
    np.put_along_axis(q, targets[..., None],
                      np.take_along_axis(q, targets[..., None], axis=-1) + (1.0 - eps_ls), axis=-1)
    q *= valid[..., None]
    # -sum(q * lp) rewritten as -lp_t + eps * mean_v(lp_t - lp_v), then a
    # shifted mean over positions; both are exact when the terms are equal
    lp = logprobs.data
    lp_t = np.take_along_axis(lp, targets[..., None], axis=-1)
    per_pos = (-lp_t + eps_ls * (lp_t - lp).mean(axis=-1, keepdims=True))[..., 0][valid]
    value = per_pos[0] + (per_pos - per_pos[0]).sum() / n

    def bw(g):
        return (-g * q / n,)

    return _node(np.asarray(value), (logprobs,), bw)


# -- driver ----------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen = [], set()
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if not isinstance(loss, Tensor):
        raise GraphStateError(f"backward needs a Tensor produced by a forward pass, got {type(loss).__name__}")
    if loss._released:
        raise GraphStateError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any trainable tensor; run a forward pass first")
    if loss.data.size != 1:
        raise GraphStateError(f"loss must be a scalar, got shape {loss.shape}")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                pending[key] = gp if key not in pending else pending[key] + gp
        node._parents = ()
        node._backward = None
        node._released = True
