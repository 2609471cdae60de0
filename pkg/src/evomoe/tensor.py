"""Reverse-mode autodiff on float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient. Ops build a DAG by
recording a backward closure and the parent tensors on each result;
Tensor.backward() runs a topological sort and calls the closures in reverse
order. Everything is float64: the models here are small enough that we buy
gradient-check headroom instead of speed.

Conventions:
  * gradients accumulate: leaf .grad sums across backward() calls until the
    caller clears it (the optimizer does this after each step),
  * backward() releases the graph (closures and parent links), so a second
    backward through the same nodes is an error rather than a silent no-op,
  * broadcasting follows numpy; backward sums gradients down to each
    operand's shape,
  * integer arguments (token ids, routing indices) are plain numpy arrays,
    never Tensors.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (eval, probes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ---- basic introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph plumbing ----

    def backward(self) -> None:
        """Backprop from a scalar. Frees the graph afterwards."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no graph")
        if self._prev is None:
            raise ContractError("backward() again through a released graph")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev or ():
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            # Release closures and parent links; drop intermediate grads.
            # _prev = None marks a released graph node (vs () for a leaf),
            # so a second backward through it can be rejected.
            is_leaf = node._backward is None
            node._backward = None
            if not is_leaf:
                node._prev = None
                if node is not self:
                    node.grad = None

    # ---- arithmetic ----

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate gradient g into t (no-op for tensors outside the graph)."""
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise and reductions ----


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gg = np.asarray(g).reshape((1,) * x.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(gg, x.shape).copy())

    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---- shape ops ----


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _acc(x, g.reshape(x.shape))

    return _node(data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    data = x.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        _acc(x, g.transpose(inv))

    return _node(data, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _acc(p, piece)

    return _node(data, tuple(parts), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _acc(x, gx)

    return _node(data, (x,), backward)


# ---- matmul ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.shape))
        _acc(b, _unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


# ---- gathers and scatters ----


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= weight.shape[0]:
        raise ContractError(
            f"embedding ids out of range [0, {weight.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _acc(weight, gw)

    return _node(data, (weight,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out = x[idx] along axis 0; idx may repeat."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _acc(x, gx)

    return _node(data, (x,), backward)


def scatter_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Inverse of take_rows for unique idx: out[idx] = values, zeros elsewhere."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("scatter_rows requires unique row indices")
    data = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    data[idx] = values.data

    def backward(g):
        _acc(values, g[idx])

    return _node(data, (values,), backward)


def gather2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elementwise pick from a 2-d tensor: out[k] = x[rows[k], cols[k]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = x.data[rows, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        _acc(x, gx)

    return _node(data, (x,), backward)


# ---- nonlinear blocks ----


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(x, (g - dot) * y)

    return _node(y, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swiglu(x: Tensor) -> Tensor:
    """Gated activation: split the last axis in half into (g, v), return silu(g) * v.

    silu(t) = t * sigmoid(t). The output's last axis is half the input's.
    """
    h = x.shape[-1]
    if h % 2 != 0:
        raise ShapeError(f"swiglu needs an even last axis, got {x.shape}")
    gate = x.data[..., : h // 2]
    val = x.data[..., h // 2 :]
    sig = _sigmoid(gate)
    data = gate * sig * val

    def backward(g):
        gx = np.empty_like(x.data)
        # d silu(t)/dt = sigmoid(t) * (1 + t * (1 - sigmoid(t)))
        gx[..., : h // 2] = g * val * sig * (1.0 + gate * (1.0 - sig))
        gx[..., h // 2 :] = g * gate * sig
        _acc(x, gx)

    return _node(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm params must be ({c},), got gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        sum_axes = tuple(range(g.ndim - 1))
        _acc(bias, g.sum(axis=sum_axes))
        _acc(gain, (g * xhat).sum(axis=sum_axes))
        gh = g * gain.data
        # closed form for d/dx of (x - mu(x)) / sqrt(var(x) + eps)
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (gh - m1 - xhat * m2))

    return _node(data, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean token-level cross entropy with an ignore label.

    logits: (N, V), targets: (N,) int. Positions equal to ignore_index are
    excluded from the mean; all-excluded is a contract error (undefined mean).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects (N, V) logits with (N,) targets, "
            f"got {logits.shape} and {targets.shape}"
        )
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy: every position is excluded")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True)
    probs = e / se
    logp = z - np.log(se)
    rows = np.nonzero(valid)[0]
    data = -logp[rows, targets[rows]].sum() / n_valid

    def backward(g):
        gx = probs.copy()
        gx[rows, targets[rows]] -= 1.0
        gx[~valid] = 0.0
        _acc(logits, gx * (float(g) / n_valid))

    return _node(np.asarray(data), (logits,), backward)


# ---- gradient checking ----


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode grads and central differences.

    f must map x to a scalar Tensor. Relative error per coordinate is
    |a - d| / max(|a|, |d|, 1e-8). Mutates x.data in place during probing and
    restores it; clears x.grad first so stale accumulation cannot leak in.
    """
    was_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    x.requires_grad = was_grad

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(a - fd) / denom))
