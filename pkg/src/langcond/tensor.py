"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in the toolkit runs on these: contiguous row-major float64
arrays (numpy-backed) that record the operations producing them so that
``backward()`` can fill in gradients. 64-bit floats throughout keep the
finite-difference checks tight; there is no GPU path and no mixed
precision by design.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "Rng",
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "relu",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gather_rows",
    "dropout",
    "transpose_last2",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "tensor_sum",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Rng:
    """Deterministic random stream: same seed gives the same numbers on
    every platform (PCG64).

    Named child streams (``child("dropout")``) let independent consumers
    draw without disturbing each other's sequences.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _key: tuple[int, ...] | None = None):
        self.seed = int(seed)
        self._key = _key if _key is not None else (self.seed,)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(self._key))))

    def child(self, tag: str) -> "Rng":
        """Independent stream derived from this seed and a string tag."""
        return Rng(self.seed, self._key + (zlib.crc32(tag.encode("utf-8")),))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice_weighted(self, n: int, probs: np.ndarray, size=None):
        return self._gen.choice(n, size=size, p=probs)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"key": list(self._key), "state": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self._key = tuple(int(k) for k in state["key"])
        self._gen.bit_generator.state = state["state"]


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape.

    Tensors produced by the ops below remember their parents; calling
    ``backward()`` on a scalar result fills ``grad`` for every tensor with
    ``requires_grad`` reachable from it. Data is treated as immutable once
    it has been consumed by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Populates ``grad`` on every
        requires-grad tensor that contributed to this value."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward() already called on this graph; build a fresh graph or reset first")
        self._done = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast, last two contract."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(data, (a, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _result(data, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    Masked positions are expected to carry a large negative sentinel; they
    come out as (numerically) zero weight.
    """
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            x._accumulate(p * (g - dot))

    return _result(p, (x,), backward_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - logz
    p = np.exp(out)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0)
            gain._accumulate(gg.reshape(gain.data.shape))
        if bias.requires_grad:
            gb = g.reshape(-1, x.data.shape[-1]).sum(axis=0)
            bias._accumulate(gb.reshape(bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _result(data, (x, gain, bias), backward_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select along axis 0 by integer index array (any index shape).

    Duplicated indices sum their gradients into the same source row, which
    is what embedding lookups and per-sample weight gathers both need.
    """
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"gather index out of range for axis 0 of size {x.data.shape[0]}")
    data = x.data[idx]

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _result(data, (x,), backward_fn)


def dropout(x: Tensor, rate: float, rng: Rng, training: bool = True) -> Tensor:
    """Inverted dropout. No random draws happen when inactive, so the rng
    stream stays aligned across train/infer call sites."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.uniform(size=x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def transpose_last2(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.swapaxes(x.data, -1, -2)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.swapaxes(g, -1, -2))

    return _result(np.ascontiguousarray(data), (x,), backward_fn)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    inv = np.argsort(axes)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.ascontiguousarray(np.transpose(g, inv)))

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    old = x.data.shape

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))

    return _result(x.data.reshape(shape), (x,), backward_fn)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice [start, start+size) along one axis."""
    x = _wrap(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[sl] = g
            x._accumulate(gx)

    return _result(np.ascontiguousarray(x.data[sl]), (x,), backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(data, tuple(tensors), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _wrap(x)
    data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).astype(np.float64))

    return _result(data, (x,), backward_fn)
