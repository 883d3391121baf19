"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the graph in reverse topological order and accumulates gradients.
Gradients add up across backward calls until zero_grad, so multi-loss
accumulation works without extra machinery.

Reductions that sum over an interchangeable axis (attention weights over
atoms, pooling) go through sum_sorted, which sorts summands by value
before reducing. Floating-point addition is order-sensitive; sorting
first makes those reductions bitwise invariant under input permutation.
softmax uses the same trick for its denominator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """A non-differentiable tensor."""
    return Tensor(value, requires_grad=False)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every grad-requiring node."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any grad-requiring tensor")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _result(
        data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _result(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    data = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _result(data, (a, b), back)


def transpose_last(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ValueError("transpose_last needs at least 2 dimensions")
    return _result(a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.data.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.size,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[k] : offsets[k + 1]], 0, axis)
            for k in range(len(tensors))
        )

    return _result(data, tensors, back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[..., start:stop]

    def back(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return _result(data, (a,), back)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for d in sorted(d % a.data.ndim for d in ax):
                g = np.expand_dims(g, d)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result(data, (a,), back)


def sum_sorted(a: Tensor, axis: int) -> Tensor:
    """Sum over one axis with summands sorted by value first.

    The value is equal to a plain sum up to rounding, but is a function
    of the multiset of summands, so it does not change when the axis is
    permuted. Used for attention and pooling reductions over atoms.
    """
    data = np.sort(a.data, axis=axis).sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis % a.data.ndim), a.data.shape).copy(),)

    return _result(data, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[d] for d in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul_scalar(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# Nonlinearities

def _softmax_forward(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    return e / denom


def softmax(a: Tensor) -> Tensor:
    y = _softmax_forward(a.data)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    y = (x - m) - np.log(denom)

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), back)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_forward(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_forward(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return _result(y, (a,), lambda g: (g * _sigmoid_forward(a.data),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.data >= 0
    y = np.where(mask, a.data, slope * a.data)
    return _result(y, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer norm over the last axis (population variance)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (a,), back)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("embedding index out of range")
    data = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(data, (table,), back)


# ---------------------------------------------------------------------------
# Loss helpers

def mse_loss(pred: Tensor, target) -> Tensor:
    diff = sub(pred, _wrap(target))
    return mean(mul(diff, diff))


def bce_with_logits_loss(logits: Tensor, target) -> Tensor:
    # softplus(z) - y*z is the stable form of -log sigmoid mixed by label
    t = _wrap(target)
    return mean(sub(softplus(logits), mul(t, logits)))


def cross_entropy_with_logits(logits: Tensor, target_index) -> Tensor:
    """Mean negative log-likelihood; logits (N, V), integer targets (N,)."""
    idx = np.asarray(target_index, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError("logits must be (N, V)")
    if idx.shape != (logits.data.shape[0],):
        raise ValueError("one target index per row")
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(idx.size), idx] = 1.0
    picked = tensor_sum(mul(log_softmax(logits), constant(onehot)), axis=-1)
    return mul_scalar(mean(picked), -1.0)


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class GradCheckReport:
    per_param: dict
    max_rel_error: float
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error <= self.tol


def grad_check(
    f,
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    max_coords: int = 32,
) -> GradCheckReport:
    """Compare backward() gradients of the scalar f() against central
    differences on up to max_coords sampled coordinates per parameter.

    The relative error per parameter is ||g_ad - g_fd|| /
    max(||g_ad||, ||g_fd||, 1e-12) over the sampled coordinates.
    """
    params = list(params)
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = {}
    for p in params:
        analytic[p.name] = (
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        )

    per_param = {}
    failures = []
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        size = flat.size
        k = min(max_coords, size)
        coords = rng.choice(size, size=k, replace=False) if k < size else np.arange(size)
        fd = np.empty(k, dtype=np.float64)
        for pos, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            lp = float(f().data)
            flat[c] = orig - eps
            lm = float(f().data)
            flat[c] = orig
            fd[pos] = (lp - lm) / (2.0 * eps)
        ad = analytic[p.name].reshape(-1)[coords]
        if not (np.all(np.isfinite(ad)) and np.all(np.isfinite(fd))):
            failures.append(f"{p.name}: non-finite gradient")
            per_param[p.name] = float("inf")
            continue
        num = float(np.linalg.norm(ad - fd))
        den = max(float(np.linalg.norm(ad)), float(np.linalg.norm(fd)), 1e-12)
        rel = num / den
        per_param[p.name] = rel
        worst = max(worst, rel)
        if rel > tol:
            failures.append(f"{p.name}: rel error {rel:.3e} > {tol:.1e}")
    return GradCheckReport(
        per_param=per_param, max_rel_error=worst, tol=tol, failures=failures
    )


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"RMATCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, params, config: dict) -> None:
    """Binary checkpoint: magic, JSON config echo, then named float64
    little-endian arrays in the given order."""
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p.data) for p in params]
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<Q", len(items)))
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q" if arr.ndim else "<0Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str):
    """Returns (ordered name->array dict, config dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    (cfg_len,) = struct.unpack("<Q", take(8))
    config = json.loads(take(cfg_len).decode("utf-8"))
    (n_items,) = struct.unpack("<Q", take(8))
    out = {}
    for _ in range(n_items):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return out, config
