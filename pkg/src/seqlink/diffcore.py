"""Small reverse-mode autodiff layer on top of numpy.

Every primitive records itself on the active :class:`Tape`; ``backward``
replays the tape in reverse creation order, which is a valid reverse
topological order because a node can only be created after its inputs.

Gradients are accumulated into leaf arrays (parameters and any input array
created with ``requires_grad=True``). Intermediate adjoints live only for the
duration of one backward call, so calling ``backward`` twice on the same tape
adds exactly twice the single-call gradient to the leaves.
"""
from __future__ import annotations

import json
from collections.abc import Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_VERSION = 1


class DiffError(Exception):
    """Base class for errors raised by the autodiff layer."""


class ShapeError(DiffError, ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NumericOverflowError(DiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value produced")


class UsageError(DiffError, RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations created inside the ``with`` block on
    arrays that require gradients are recorded here.
    """

    def __init__(self):
        self.nodes: list[Array] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: "Array", seed: np.ndarray | None = None) -> None:
        backward(self, output, seed)


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Array:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Array{label}(shape={self.shape}, op={self.op})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _finite(op: str, data: np.ndarray) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericOverflowError(op)
    return data


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Array:
    out = Array.__new__(Array)
    out.data = _finite(op, data)
    out.grad = None
    out.name = None
    out.op = op
    tape = _tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("div", a, b)
    return _make("div", a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def square(a: Array) -> Array:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a: Array) -> Array:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh identity: no exp overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Array) -> Array:
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Array) -> Array:
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Array) -> Array:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Array) -> Array:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make("log", y, (a,), lambda g: (g / a.data,))


# linear algebra / structure ------------------------------------------------

def matmul(a, b) -> Array:
    """``a @ b`` for ``a`` of shape (..., m) and ``b`` of shape (m, k)."""
    a, b = as_array(a), as_array(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])

    def back(g):
        ga = g @ b.data.T
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), back)


def transpose(a: Array) -> Array:
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Array, shape: tuple) -> Array:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Array, idx) -> Array:
    basic = _is_basic_index(idx)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", a.data[idx], (a,), back)


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    arrays = [as_array(x) for x in arrays]
    try:
        data = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError("concat", [x.shape for x in arrays]) from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _make("concat", data, tuple(arrays),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    try:
        data = np.stack([x.data for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError("stack", [x.shape for x in arrays]) from None
    n = len(arrays)
    return _make("stack", data, tuple(arrays),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum(a: Array, axis=None, keepdims: bool = False) -> Array:  # noqa: A001
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Array, axis: int = -1, allowed: np.ndarray | None = None) -> Array:
    """Numerically stable softmax; entries where ``allowed`` is False get 0."""
    x = a.data
    if allowed is not None:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
        if not allowed.any(axis=axis).all():
            raise UsageError("softmax: a row has no allowed entries")
        shift = np.max(np.where(allowed, x, -np.inf), axis=axis, keepdims=True)
        e = np.where(allowed, np.exp(np.where(allowed, x - shift, 0.0)), 0.0)
    else:
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), back)


# losses ----------------------------------------------------------------------

def masked_mse(pred: Array, target, weight=None) -> Array:
    """Mean squared error over entries with nonzero weight (weight in {0,1})."""
    target = as_array(target)
    if pred.shape != target.shape:
        raise ShapeError("masked_mse", [pred.shape, target.shape])
    diff = sub(pred, target)
    if weight is None:
        return mean(square(diff))
    weight = np.broadcast_to(np.asarray(weight, dtype=DTYPE), pred.shape)
    total = weight.sum()
    if total == 0:
        raise UsageError("masked_mse: no weighted entries")
    return mul(sum(mul(square(diff), weight)), 1.0 / total)


def mse(pred: Array, target) -> Array:
    return masked_mse(pred, target)


def binary_cross_entropy(prob: Array, labels) -> Array:
    labels = np.asarray(labels, dtype=DTYPE)
    if prob.shape != labels.shape:
        raise ShapeError("binary_cross_entropy", [prob.shape, labels.shape])
    eps = 1e-12
    p = add(mul(prob, 1.0 - 2 * eps), eps)
    ll = add(mul(log(p), labels), mul(log(sub(1.0, p)), 1.0 - labels))
    return mul(mean(ll), -1.0)


# backward ------------------------------------------------------------------------

def backward(tape: Tape, output: Array, seed: np.ndarray | None = None) -> None:
    """Accumulate d(output)/d(leaf) into every leaf's ``grad``."""
    if not any(node is output for node in reversed(tape.nodes)):
        raise UsageError("backward called before a forward pass recorded this output")
    if seed is None:
        if output.data.size != 1:
            raise UsageError("backward on a non-scalar output needs an explicit seed")
        seed = np.ones_like(output.data)
    grads = {id(output): np.asarray(seed, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# parameters --------------------------------------------------------------------------

class ParameterStore:
    """Named registry of trainable arrays plus Adam state."""

    def __init__(self):
        self.params: dict[str, Array] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Array:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        p = Array(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = p
        self.adam_m[name] = np.zeros_like(p.data)
        self.adam_v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def n_values(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def copy(self) -> "ParameterStore":
        return ParameterStore.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        names = list(self.params)
        return {
            "format_version": CHECKPOINT_VERSION,
            "names": names,
            "shapes": [list(self.params[n].shape) for n in names],
            "values": [self.params[n].data.ravel().tolist() for n in names],
            "adam_moments": {
                "m": [self.adam_m[n].ravel().tolist() for n in names],
                "v": [self.adam_v[n].ravel().tolist() for n in names],
            },
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterStore":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise UsageError(f"unsupported checkpoint version {d.get('format_version')!r}")
        store = cls()
        for i, (name, shape) in enumerate(zip(d["names"], d["shapes"])):
            store.add(name, np.array(d["values"][i], dtype=DTYPE).reshape(shape))
            store.adam_m[name] = np.array(d["adam_moments"]["m"][i], dtype=DTYPE).reshape(shape)
            store.adam_v[name] = np.array(d["adam_moments"]["v"][i], dtype=DTYPE).reshape(shape)
        store.step = int(d["step"])
        return store

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def adam_step(store: ParameterStore, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, step: int | None = None,
              names: Iterable[str] | None = None) -> ParameterStore:
    """Bias-corrected Adam update using the gradients currently in ``store``."""
    step = store.step + 1 if step is None else step
    if step < 1:
        raise UsageError(f"adam_step: step must be >= 1, got {step}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name in (store.params if names is None else names):
        p = store.params[name]
        g = p.grad
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.step = step
    return store


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Array, weight: Array, bias: Array | None = None) -> Array:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
