"""Dense float64 tensors with reverse-mode autodiff.

A small tape: every operation returns a Tensor whose node records its
parent tensors and a backward closure. ``backward()`` walks the reachable
graph in descending creation order, which is a valid reverse topological
order (parents are always created before children) and fixes the gradient
accumulation order, so repeated runs are bit-identical.

Gradients accumulate additively into ``.grad``; call ``zero_grad`` (or
reassign) between optimizer steps. Backward must run before any leaf
``.data`` buffer is mutated in place, because closures capture views.
"""

from __future__ import annotations

import itertools
import struct
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, TrainingError

_node_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_idx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bw = None
        self._idx = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # arithmetic sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division only supports scalars")
        return mul(self, Tensor(1.0 / other))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_node(data: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    """Create a graph node.

    ``bw(grad_out)`` must return one gradient array (or None) per parent.
    If no parent requires grad the node degenerates to a constant and the
    closure is dropped.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``. The loss must be scalar."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    reachable: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in reachable:
                reachable[id(p)] = p
                stack.append(p)

    order = sorted(reachable.values(), key=lambda t: t._idx, reverse=True)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = flow.get(id(t))
        if g is None or t._bw is None:
            continue
        for p, gp in zip(t._parents, t._bw(g)):
            if gp is None or not p.requires_grad:
                continue
            acc = flow.get(id(p))
            flow[id(p)] = gp if acc is None else acc + gp

    for t in order:
        if not t.requires_grad:
            continue
        g = flow.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        else:
            g = g.reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return make_node(data, (a, b), lambda g: [
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return make_node(data, (a, b), lambda g: [
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)])


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return [np.broadcast_to(g.reshape(()), x.data.shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, x.data.shape).copy()]

    return make_node(data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    return make_node(data, (x,), lambda g: [g.reshape(x.data.shape)])


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return make_node(data, (x,), lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return make_node(y, (x,), lambda g: [g * (y * (1.0 - y))])


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return make_node(data, (x,), lambda g: [g / x.data])


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return make_node(data, (x,), lambda g: [g * mask])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return [y * (g - (g * y).sum(axis=axis, keepdims=True))]

    return make_node(y, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty list")
    nd = xs[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat axis {axis} out of range for rank {nd}")
    ax = axis % nd
    ref = list(xs[0].shape)
    for x in xs[1:]:
        if x.ndim != nd or any(i != ax and x.shape[i] != ref[i] for i in range(nd)):
            raise DimensionError(
                f"concat shapes disagree off axis {ax}: {ref} vs {list(x.shape)}")
    data = np.concatenate([x.data for x in xs], axis=ax)
    offsets = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return list(np.split(g, offsets, axis=ax))

    return make_node(data, tuple(xs), bw)


def maximum(x: Tensor, axis: int) -> Tensor:
    """Max-reduce one axis; gradient flows to the first maximal entry."""
    data = x.data.max(axis=axis)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return [gx]

    return make_node(data, (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Index axis 0 with an integer array of any shape.

    Output shape is ``idx.shape + x.shape[1:]``; backward scatter-adds in
    flat index order.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(
            f"gather index out of range [0, {x.shape[0]}): "
            f"min {idx.min()}, max {idx.max()}")
    data = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.ravel(), g.reshape((-1,) + x.data.shape[1:]))
        return [gx]

    return make_node(data, (x,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


class LinearParams:
    """Weight [in_dim, out_dim] and bias [out_dim]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
               zero_init: bool = False) -> "LinearParams":
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = glorot_uniform(rng, in_dim, out_dim)
        return cls(Tensor(w, requires_grad=True),
                   Tensor(np.zeros(out_dim), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """y[..., j] = sum_i x[..., i] * W[i, j] + b[j], over any leading dims."""
    in_dim, out_dim = p.weight.shape
    if x.shape[-1] != in_dim:
        raise DimensionError(
            f"linear: input shape {list(x.shape)} does not match weight "
            f"shape {list(p.weight.shape)}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, in_dim)
    y = x2 @ p.weight.data + p.bias.data

    def bw(g):
        g2 = g.reshape(-1, out_dim)
        return [(g2 @ p.weight.data.T).reshape(x.data.shape),
                x2.T @ g2,
                g2.sum(axis=0)]

    return make_node(y.reshape(lead + (out_dim,)), (x, p.weight, p.bias), bw)


class BatchNormParams:
    def __init__(self, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        self.training = True

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormParams":
        return cls(Tensor(np.ones(dim), requires_grad=True),
                   Tensor(np.zeros(dim), requires_grad=True),
                   np.zeros(dim), np.ones(dim), momentum, eps)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def named(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_stats(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Normalize [N, dim] over the batch axis (population variance); in
    eval mode use the running statistics instead."""
    if x.ndim != 2 or x.shape[1] != p.dim:
        raise DimensionError(
            f"batch_norm: input shape {list(x.shape)} does not match dim {p.dim}")
    n = x.shape[0]
    if p.training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * var
    else:
        mu = p.running_mean
        var = p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mu) * inv_std
    y = p.gamma.data * xhat + p.beta.data

    if p.training:
        def bw(g):
            dxhat = g * p.gamma.data
            dvar = (dxhat * (x.data - mu)).sum(axis=0) * (-0.5) * inv_std ** 3
            dmu = (-dxhat * inv_std).sum(axis=0) + dvar * (-2.0 / n) * (x.data - mu).sum(axis=0)
            dx = dxhat * inv_std + dvar * 2.0 * (x.data - mu) / n + dmu / n
            return [dx, (g * xhat).sum(axis=0), g.sum(axis=0)]
    else:
        def bw(g):
            return [g * p.gamma.data * inv_std,
                    (g * xhat).sum(axis=0),
                    g.sum(axis=0)]

    return make_node(y, (x, p.gamma, p.beta), bw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float,
              names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update, in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("adam_step: params/grads/state are misaligned")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            name = names[i] if names else f"param[{i}]"
            raise TrainingError(f"non-finite gradient for {name}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint file: "TDCV", version u32, then per-array records of
# name_len u32 | name utf-8 | rank u64 | dims u64... | data f64...
# all little-endian
# ---------------------------------------------------------------------------

_MAGIC = b"TDCV"
_VERSION = 1


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype=np.float64)  # tobytes() emits C order
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a TDCV checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
            entries[name] = data.astype(np.float64)
    return entries
