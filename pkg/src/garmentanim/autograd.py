"""Minimal dense-array reverse-mode differentiation.

Every operation records its parents and a closure that maps the output
gradient to parent gradients. There is no global tape: a graph is just the
set of tensors reachable from a loss, so independent graphs (for example two
garment streams sharing parameters) never interfere.

Gradients are accumulated in a dictionary owned by :func:`reverse_gradient`,
not on the tensors, which keeps tensors immutable once produced.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class GraphError(ValueError):
    """Raised for invalid differentiation requests (non-scalar loss, NaNs)."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An immutable array node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Callable | None = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def sin(x: Tensor) -> Tensor:
    return _node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return _node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _node(out, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _node(out.astype(xd.dtype, copy=False), (x,), backward)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# --- linear algebra / shape ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch axes into one GEMM instead of summing per-batch products
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(part if t.requires_grad else None
                     for part, t in zip(np.split(g, splits, axis=axis), tensors))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), backward)


# --- reductions (accumulated in float64) --------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = (np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64) / count).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return _node(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (out * (g - inner),)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; no affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(xd - mu).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = ((xd - mu) * rstd).astype(xd.dtype)

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True, dtype=np.float64)
        gx = (g * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        return ((rstd * (g - gm - xhat * gx)).astype(xd.dtype),)

    return _node(xhat, (x,), backward)


# --- parameters ---------------------------------------------------------------

class ParamSet:
    """Named parameters with a per-parameter trainable flag.

    Parameter tensors are replaced, never mutated, by :meth:`assign`; a
    frozen parameter therefore keeps its exact bytes across optimizer steps.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None,
                 trainable: Mapping[str, bool] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            flag = bool(trainable.get(name, False)) if trainable else False
            self.add(name, arr, flag)

    def add(self, name: str, array, trainable: bool = False) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(array, dtype=np.asarray(array).dtype if np.asarray(array).dtype.kind == "f"
                       else DEFAULT_DTYPE)
        self._tensors[name] = Tensor(arr, requires_grad=trainable, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self):
        return self._tensors.items()

    def array(self, name: str) -> np.ndarray:
        return self._tensors[name].data

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def is_trainable(self, name: str) -> bool:
        return self._tensors[name].requires_grad

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.requires_grad]

    def set_trainable(self, names: Iterable[str] | str, flag: bool = True) -> None:
        if isinstance(names, str):
            names = self.names(names)
        for n in names:
            self._tensors[n] = Tensor(self._tensors[n].data, requires_grad=flag, name=n)

    def freeze_all(self) -> None:
        self.set_trainable(list(self._tensors), False)

    def assign(self, name: str, array: np.ndarray) -> None:
        old = self._tensors[name]
        if array.shape != old.shape:
            raise ValueError(f"shape mismatch for {name}: {array.shape} vs {old.shape}")
        self._tensors[name] = Tensor(np.asarray(array, dtype=old.dtype), old.requires_grad, name=name)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), t.requires_grad)
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.astype(dtype), t.requires_grad)
        return out

    def num_elements(self, names: Iterable[str] | None = None) -> int:
        names = self._tensors if names is None else names
        return int(sum(self._tensors[n].size for n in names))

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names, shapes and raw bytes of matching parameters."""
        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            arr = np.ascontiguousarray(self._tensors[n].data)
            h.update(n.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


# --- differentiation ------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable node; keyed by ``id``."""
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise GraphError("non-finite loss value")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def reverse_gradient(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. every trainable parameter.

    Trainable parameters the loss does not depend on get zero arrays; frozen
    parameters are absent from the result.
    """
    grads = backward(loss)
    out = {}
    for name in params.trainable_names():
        t = params[name]
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out


def finite_difference_gradient(f: Callable[[ParamSet], Tensor | float], params: ParamSet,
                               eps: float = 1e-3,
                               coords: Mapping[str, Sequence[int]] | None = None) -> dict[str, np.ndarray]:
    """Central-difference estimate of the gradient of ``f`` at ``params``.

    Probing happens on a float64 copy of ``params`` so that the step is
    exactly ``eps``; ``f`` must therefore follow its inputs' dtype. ``coords``
    optionally restricts probing to flat indices per parameter (unprobed
    entries are NaN). Without it every coordinate of every trainable
    parameter is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = params.astype(np.float64)
    names = work.trainable_names() if coords is None else list(coords)

    def evaluate() -> float:
        val = f(work)
        val = float(np.asarray(val.data if isinstance(val, Tensor) else val).reshape(()))
        if not math.isfinite(val):
            raise GraphError("objective returned a non-finite value at a probe point")
        return val

    out: dict[str, np.ndarray] = {}
    for name in names:
        base = work.array(name)
        flat_idx = range(base.size) if coords is None else coords[name]
        est = np.full(base.size, 0.0 if coords is None else np.nan)
        for i in flat_idx:
            probe = base.copy().reshape(-1)
            orig = probe[i]
            probe[i] = orig + eps
            work.assign(name, probe.reshape(base.shape))
            fp = evaluate()
            probe[i] = orig - eps
            work.assign(name, probe.reshape(base.shape))
            fm = evaluate()
            est[i] = (fp - fm) / (2.0 * eps)
        work.assign(name, base)
        out[name] = est.reshape(base.shape)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
