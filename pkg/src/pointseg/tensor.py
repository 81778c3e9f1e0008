"""Dense tensors with reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Each op
returns a new :class:`Tensor` that remembers its parents and a closure mapping
the output gradient to parent gradients; :meth:`Tensor.backward` replays
those closures in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_owned")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self._owned = False  # whether self.grad may be updated in place
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def _accumulate(self, g: np.ndarray):
        # the first contribution is stored by reference (it may be shared with
        # another tensor or be a read-only view); copy only when a second arrives
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def _own_grad(self):
        if self.grad is not None and not self._owned:
            self.grad = np.array(self.grad, dtype=self.data.dtype, copy=True)
            self._owned = True

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if not self.requires_grad:
            raise ArgumentError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        interior = set(id(t) for t in order if t._backward is not None)
        for t in order:
            if id(t) in interior:
                t.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for t in reversed(order):
            if t._backward is not None:
                if t.grad is not None:
                    t._backward(t.grad)
                t.grad = None  # interior grads are transient
            else:
                t._own_grad()


def _topological(root: Tensor):
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


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    # scale = 1 on the positive side, slope on the negative side; a float mask
    # multiply is much cheaper than np.where on large arrays
    scale = np.multiply(x.data < 0, x.dtype.type(slope - 1.0), dtype=x.dtype)
    scale += 1

    def backward(g):
        x._accumulate(g * scale)

    return _result(x.data * scale, (x,), backward)


def norm(x, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    sq = x.data * x.data
    n = np.sqrt(sq.sum(axis=axis, keepdims=True))

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        x._accumulate(np.where(n > 0, gk * x.data / safe, 0.0))

    return _result(n if keepdims else np.squeeze(n, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return _result(np.broadcast_to(x.data, shape), (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    try:
        data = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _result(data, ts, backward)


def gather_rows(x, idx) -> Tensor:
    """``out[...] = x[idx[...]]`` along axis 0; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].ravel()[0]
        raise IndexError(f"row index {int(bad)} out of range for {n} rows")
    trailing = x.shape[1:]

    def backward(g):
        flat = idx.ravel()
        g2 = g.reshape(flat.size, -1)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(n, flat.size)
        )
        x._accumulate(np.asarray(scatter @ g2).reshape((n,) + trailing))

    return _result(x.data[idx], (x,), backward)


def gather_neighbors(features, neighbors) -> Tensor:
    """Q x K x d neighbor features from an N x d table and a Q x K index."""
    idx = getattr(neighbors, "indices", neighbors)
    return gather_rows(features, idx)


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def max(x, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, g, axis=axis)
        x._accumulate(full)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and probabilistic heads


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied to every slice along the leading axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"last axis {x.shape[-1]} does not match weight input width {d_in}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match output width {d_out}")
        out += bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(np.ones(g2.shape[0], dtype=g2.dtype) @ g2)

    return _result(out.reshape(lead + (d_out,)), parents, backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), backward)


def _max_middle(a: np.ndarray) -> np.ndarray:
    """``a.max(axis=1)`` for a 3-D array, as a loop over the (short) middle axis."""
    m = a[:, 0].copy()
    for j in range(1, a.shape[1]):
        np.maximum(m, a[:, j], out=m)
    return m


def attentive_sum(fhat, weight) -> Tensor:
    """Fused ``sum_k fhat * softmax_k(fhat @ weight)`` for Q x K x D input.

    Equivalent to ``sum(mul(fhat, softmax(affine(fhat, weight), axis=1)), axis=1)``
    with one backward pass instead of four.
    """
    fhat, weight = as_tensor(fhat), as_tensor(weight)
    if fhat.ndim != 3:
        raise ShapeError(f"expected Q x K x D input, got {fhat.shape}")
    q, k, d = fhat.shape
    if weight.shape != (d, d):
        raise ShapeError(f"score weight {weight.shape} for feature width {d}")
    f2 = fhat.data.reshape(-1, d)
    logits = (f2 @ weight.data).reshape(q, k, d)
    logits -= _max_middle(logits)[:, None, :]
    s = np.exp(logits, out=logits)
    s /= np.einsum("qkd->qd", s)[:, None, :]
    out = np.einsum("qkd,qkd->qd", fhat.data, s)

    def backward(g):
        gs = s * g[:, None, :]
        # d logits = s * g * (fhat - out), the softmax Jacobian folded into the sum
        dlog = gs * (fhat.data - out[:, None, :])
        dlog2 = dlog.reshape(-1, d)
        if fhat.requires_grad:
            gs += (dlog2 @ weight.data.T).reshape(q, k, d)
            fhat._accumulate(gs)
        if weight.requires_grad:
            weight._accumulate(f2.T @ dlog2)

    return _result(out, (fhat, weight), backward)


def softmax_lastaxis(x) -> Tensor:
    return softmax(x, axis=-1)


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), backward)


def softmax_cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean (optionally class-weighted) negative log-likelihood over N rows."""
    from .errors import DataError

    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        row = int(np.flatnonzero((labels < 0) | (labels >= c))[0])
        raise DataError(f"label {int(labels[row])} in row {row} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    if class_weights is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)[labels]
    total = w.sum()
    loss = -(w * logp[rows, labels]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accumulate(g * p * (w / total)[:, None])

    return _result(np.asarray(loss), (logits,), backward)
