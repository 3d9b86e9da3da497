"""Dense float64 tensors with taped reverse-mode autodiff and an Adam optimizer.

Everything runs on contiguous numpy float64 arrays. Ops record onto the
active Tape; backward replays the tape once in reverse. Gradients accumulate
into Parameter.grad until zero_grads is called, which keeps multi-segment
batch accumulation explicit.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# GELU tanh approximation constants, fixed so checkpoints are portable:
# gelu(x) = 0.5*x*(1 + tanh(GELU_SCALE*(x + GELU_CUBIC*x^3)))
GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)
GELU_CUBIC = 0.044715

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Leaf tensor with a persistent gradient buffer and a stable name."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications.

    Ops append in execution order, which is a topological order of the
    eagerly built graph, so one reverse sweep propagates all gradients.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)


_LOCAL = threading.local()


def _push_tape(tape: Tape) -> None:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    stack.append(tape)


def _pop_tape(tape: Tape) -> None:
    stack = _LOCAL.stack
    if not stack or stack[-1] is not tape:
        raise RuntimeError("tape context exited out of order")
    stack.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_LOCAL, "stack", None)
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += g
            else:
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach g.shape from shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _record(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b with w (in, out); b broadcasts over leading dims of x."""
    if w.ndim != 2:
        raise ValueError(f"linear expects 2-d weight, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"linear dims mismatch: input has width {x.shape[-1]}, weight expects {w.shape[0]}"
        )
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} incompatible with weight {w.shape}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x2.T, g2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, vjp)


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation (constants in module docstring)."""
    x = _as_tensor(x)
    sq = x.data * x.data
    t = np.tanh(GELU_SCALE * (x.data + GELU_CUBIC * (sq * x.data)))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def vjp(g):
        # d = 0.5*[(1 + t) + x*(1 - t^2)*u'] with u' = GELU_SCALE*(1 + 3*GELU_CUBIC*x^2),
        # built in place to avoid temporaries on large activations
        d = sq * (3.0 * GELU_CUBIC)
        d += 1.0
        d *= GELU_SCALE
        tt = t * t
        np.subtract(1.0, tt, out=tt)
        d *= tt
        d *= x.data
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _record(out, (x,), vjp)


def sin(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sin(x.data))
    return _record(out, (x,), lambda g: (g * np.cos(x.data),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis with max-subtraction for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each trailing-axis row to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm affine shape mismatch: x rows {n}, gain {gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    diff = x.data - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = diff * inv
    out = Tensor(xhat * gain.data + bias.data)

    def vjp(g):
        gxhat = g * gain.data
        gx = gxhat - gxhat.mean(axis=-1, keepdims=True)
        gx -= xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx *= inv
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), vjp)


def mse_loss(pred: Tensor, target, mask) -> Tensor:
    """sum(mask * (pred - target)^2) / sum(mask); gradient flows to pred only."""
    target = _as_tensor(target)
    mask = _as_tensor(mask)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(
            f"mse_loss shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    m = mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mse_loss mask entries must be 0 or 1")
    denom = m.sum()
    if denom == 0.0:
        raise ValueError("mse_loss mask is all zero: no supervised positions")
    diff = pred.data - target.data
    out = Tensor(np.sum(m * diff * diff) / denom)

    def vjp(g):
        return (g * 2.0 * m * diff / denom, None, None)

    return _record(out, (pred, target, mask), vjp)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _record(out, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(out, (x,), vjp)


def index_select(x: Tensor, axis: int, indices: np.ndarray) -> Tensor:
    """Gather along an axis; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(x.data, indices, axis=axis))

    def vjp(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices.reshape(-1), np.moveaxis(g, axis, 0).reshape(-1, *moved.shape[1:]))
        return (full,)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for p in params:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """One Adam update with bias correction. Grads are left in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[], float], params: Sequence[Parameter], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a deterministic scalar function.

    f re-evaluates from the current parameter values; each coordinate is
    perturbed by +/- h in turn. This is the independent oracle the analytic
    backward pass is checked against, so it never touches the tape.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    grads: dict[str, np.ndarray] = {}
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f())
            flat[i] = orig - h
            f_minus = float(f())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"non-finite evaluation while differencing {p.name}[{i}]")
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads[p.name] = g.reshape(p.data.shape)
    return grads
