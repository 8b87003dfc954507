"""Reverse-mode autodiff over dense float64 numpy arrays.

Deliberately small: dynamic shapes, no broadcasting beyond bias-add, every
op carries its own backward closure. Everything differentiable here is
checked against central finite differences in the test suite, so keep new
ops simple enough to pass that gate.

A computation graph is confined to one thread; tensors are immutable after
construction except for their grad buffers.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of self w.r.t. every tensor in its graph.

        Without a seed, self must be a scalar. Grads add into existing
        buffers (sum rule), so call zero_grad() between independent passes.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError("seed shape must match tensor shape")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative topo sort; deep graphs come up in training loops
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        _accum(self, seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, delta in zip(node._parents, node._backward(node.grad)):
                if delta is not None:
                    _accum(parent, delta)

    # Operator sugar; constants are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def _accum(t: Tensor, delta: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    # _parents is only ever set when something upstream requires grad, so
    # checking it is enough to keep tracking through intermediates.
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b) -> Tensor:
    """Elementwise add. The only broadcast allowed: a 1-D bias onto matrix rows."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        return _from_op(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.data.shape[1] == b.data.shape[0]:
        return _from_op(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    if b.data.ndim == 0:
        return _from_op(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        return _from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.data.ndim == 0:
        return _from_op(a.data * b.data, (a, b), lambda g: (g * b.data, (g * a.data).sum()))
    raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias broadcast over rows)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: both operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    return _from_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose: 2-D only")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def pow_const(a: Tensor, p: float) -> Tensor:
    return _from_op(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


# -------------------------------------------------------------- nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _np_sigmoid(a.data)
    return _from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    # x * sigmoid(x); derivative s * (1 + x * (1 - s))
    s = _np_sigmoid(a.data)
    return _from_op(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _from_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    y = np_softmax(a.data, axis=axis)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _from_op(y, (a,), bwd)


# ------------------------------------------------------------------ reshaping


def concat_last_dim(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_dim: empty input")
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=-1))

    return _from_op(out, tuple(parts), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: empty input")
    heights = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    splits = np.cumsum(heights)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=0))

    return _from_op(out, tuple(parts), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)

    return _from_op(a.data[..., lo:hi].copy(), (a,), bwd)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        return (full,)

    return _from_op(a.data[lo:hi].copy(), (a,), bwd)


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Each row repeated `times` consecutive times; grad sums within groups."""
    if times < 1:
        raise ShapeError("repeat_rows: times must be >= 1")
    out = np.repeat(a.data, times, axis=0)

    def bwd(g):
        n = a.data.shape[0]
        return (g.reshape(n, times, *a.data.shape[1:]).sum(axis=1),)

    return _from_op(out, (a,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding_lookup: id out of range 0..{vocab - 1}")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _from_op(table.data[ids], (table,), bwd)


# -------------------------------------------------------------------- reducers


def tsum(a: Tensor) -> Tensor:
    return _from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _from_op(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, float(g) / n),)
    )


def cross_entropy(logits: Tensor, target) -> Tensor:
    """-log softmax(logits)[target].

    1-D logits with an int target give that row's loss; 2-D logits with a
    target per row give the mean over rows.
    """
    if logits.data.ndim == 1:
        rows = logits.data[None, :]
        targets = np.asarray([int(target)], dtype=np.int64)
        scale = 1.0
    elif logits.data.ndim == 2:
        rows = logits.data
        targets = np.asarray(target, dtype=np.int64)
        if targets.shape != (rows.shape[0],):
            raise ShapeError("cross_entropy: one target per logits row")
        scale = 1.0 / rows.shape[0]
    else:
        raise ShapeError("cross_entropy: logits must be 1-D or 2-D")
    if targets.size and (targets.min() < 0 or targets.max() >= rows.shape[1]):
        raise IndexError(f"cross_entropy: target outside vocabulary 0..{rows.shape[1] - 1}")

    probs = np_softmax(rows, axis=-1)
    nll = -np.log(probs[np.arange(rows.shape[0]), targets])
    loss = nll.mean() if logits.data.ndim == 2 else nll[0]

    def bwd(g):
        d = probs.copy()
        d[np.arange(rows.shape[0]), targets] -= 1.0
        d *= float(g) * scale
        return (d.reshape(logits.data.shape) if logits.data.ndim == 1 else d,)

    return _from_op(np.asarray(loss), (logits,), bwd)


# -------------------------------------------------- transformer-specific ops


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise RMS normalization with a learned per-column scale."""
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],):
        raise ShapeError("rms_norm: x must be (T, D) and gamma (D,)")
    d = x.data.shape[1]
    inv = 1.0 / np.sqrt((x.data**2).mean(axis=1, keepdims=True) + eps)  # (T,1)
    y = x.data * inv * gamma.data

    def bwd(g):
        gg = g * gamma.data
        # d/dx_ij of x_ij*inv_i: inv_i - x_ij^2*inv_i^3/D, with cross terms
        dot = (gg * x.data).sum(axis=1, keepdims=True)
        dx = gg * inv - x.data * (inv**3) * dot / d
        dgamma = (g * x.data * inv).sum(axis=0)
        return (dx, dgamma)

    return _from_op(y, (x, gamma), bwd)


def rope(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """Rotary position embedding over consecutive column pairs of a (T, D) block.

    Row t is rotated by angles (t + offset) * base**(-2i/D); the rotation is
    orthogonal, so the backward pass applies the inverse rotation.
    """
    cos, sin = _rope_tables(x.data.shape[0], x.data.shape[1], offset, base)
    y = _rope_apply(x.data, cos, sin)

    def bwd(g):
        return (_rope_apply(g, cos, -sin),)

    return _from_op(y, (x,), bwd)


def _rope_tables(rows: int, dim: int, offset: int, base: float):
    if dim % 2 != 0:
        raise ShapeError("rope: feature dim must be even")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pos = np.arange(offset, offset + rows, dtype=np.float64)[:, None]
    ang = pos * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0, x1 = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return out


# ----------------------------------------------------------- plain-numpy kin


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


np_sigmoid = _np_sigmoid


def np_silu(x: np.ndarray) -> np.ndarray:
    return x * _np_sigmoid(x)


def np_rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    inv = 1.0 / np.sqrt((x**2).mean(axis=1, keepdims=True) + eps)
    return x * inv * gamma


def np_rope(x: np.ndarray, offset: int = 0, base: float = 10000.0) -> np.ndarray:
    cos, sin = _rope_tables(x.shape[0], x.shape[1], offset, base)
    return _rope_apply(x, cos, sin)


# ------------------------------------------------------------------ optimizers


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; the default trainer step."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
