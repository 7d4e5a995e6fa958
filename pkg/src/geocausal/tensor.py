"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding its inputs and
a backward closure. :func:`backward` linearizes the graph reachable from a
scalar loss into a :class:`ComputationTape` (topological order) and walks it
in reverse, accumulating gradients into every tensor with ``requires_grad``.

Reductions accumulate in float64 and cast back to float32.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step met a NaN or infinite gradient."""

    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite gradient at step {step} in parameter {name!r}")
        self.step = step
        self.name = name


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.ascontiguousarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(values, op: str, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(DTYPE).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values + b.values, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values - b.values, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _make(av / bv, "div", (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape),
                            _unbroadcast(-g * av / (bv * bv), b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _make(np.log(xv), "log", (x,), lambda g: (g / xv,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(x.values * mask, "relu", (x,), lambda g: (g * mask,))


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xv = x.values
    inner = _SQRT_2_OVER_PI * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)
    y = 0.5 * xv * (1.0 + t)

    def backward_fn(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _make(y, "gelu", (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.values)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.values.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.values, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def take(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.values[index], "index", (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return _make(np.concatenate([t.values for t in tensors], axis=axis), "concat",
                 tuple(tensors), backward_fn)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.values, shape).copy(), "broadcast", (x,),
                 lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    y = x.values.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(DTYPE)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _make(y, "sum", (x,), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra and normalizations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward_fn(g):
        da = np.matmul(g, np.swapaxes(bv, -1, -2))
        db = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _make(np.matmul(av, bv), "matmul", (a, b), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(DTYPE)

    def backward_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(DTYPE)
        return (y * (g - inner),)

    return _make(y, "softmax", (x,), backward_fn)


def layer_norm(x: Tensor, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then apply gain/bias."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs a normalized axis of length >= 2, got {x.shape}")
    xv = x.values.astype(np.float64)
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = centered * inv
    xhat = xhat64.astype(DTYPE)

    def norm_backward(g):
        g64 = g.astype(np.float64)
        dx = inv * (g64 - g64.mean(axis=-1, keepdims=True)
                    - xhat64 * (g64 * xhat64).mean(axis=-1, keepdims=True))
        return (dx.astype(DTYPE),)

    out = _make(xhat, "layer_norm", (x,), norm_backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative Bernoulli log likelihood, computed stably from logits."""
    z = logits.values.astype(np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = 1.0 / (1.0 + np.exp(-z))

    def backward_fn(g):
        return (((p - y) * (float(np.asarray(g).reshape(-1)[0]) / n)).astype(DTYPE),)

    return _make(np.asarray(losses.mean(), dtype=DTYPE), "bce_logits", (logits,), backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, keep)


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Per-sample residual-branch dropping (stochastic depth) over axis 0."""
    if rng is None or rate <= 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (rng.random(shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class ComputationTape:
    """Graph nodes reachable from a loss, in topological order."""

    tensors: list = field(default_factory=list)

    def __len__(self):
        return len(self.tensors)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf and node."""
    if loss.values.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = ComputationTape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.values)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             learning_rate: float, momentum: float = 0.0,
             velocities: Sequence[np.ndarray] | None = None,
             weight_decay: float = 0.0, step: int = 0,
             names: Sequence[str] | None = None) -> list:
    """In-place momentum SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    Returns the velocity buffers (created on first use).
    """
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    names = names or [f"param{i}" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {name!r} has shape {p.shape}, gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(step, name)
    for p, g, v in zip(params, grads, velocities):
        if weight_decay:
            g = g + weight_decay * p
        v *= momentum
        v += g
        p -= learning_rate * v
    return list(velocities)


class SGD:
    """Momentum SGD over named leaf tensors."""

    def __init__(self, params: dict, learning_rate: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(t.values) for t in self.params.values()]
        self.steps = 0

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        tensors = list(self.params.values())
        sgd_step([t.values for t in tensors], [t.grad for t in tensors],
                 self.learning_rate, self.momentum, self.velocities,
                 self.weight_decay, self.steps, list(self.params))
        self.steps += 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GCTN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict):
    """Write named float32 arrays in the GCTN little-endian format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            arr = np.asarray(value.values if isinstance(value, Tensor) else value, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GCTN checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.values)) for p in params)
