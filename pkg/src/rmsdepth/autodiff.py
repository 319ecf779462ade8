"""A small reverse-mode differentiation tape over numpy arrays.

Operations are plain functions over :class:`Var`. When a :class:`Tape` is
active (``with Tape() as tape:``) every op whose inputs require gradients
appends a node holding its vector-Jacobian product; outside a tape the same
functions just compute values, so inference and training share one numeric
path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

_ACTIVE: list["Tape"] = []


class Var:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None  # make ndarray (op) Var defer to the Var's reflected operator

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def param(data, name: str | None = None) -> Var:
    return Var(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Var:
    return data if isinstance(data, Var) else Var(np.asarray(data, dtype=np.float64))


@dataclass
class Node:
    op: str
    out: Var
    inputs: tuple[Var, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        return backward(self, loss)


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, out_data: np.ndarray, inputs: Sequence[Var], vjp) -> Var:
    """Wrap ``out_data`` and, if a tape is active, append the node to it."""
    tape = _tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Var(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, out, tuple(inputs), vjp))
    return out


def custom_vjp(op: str, fwd: Callable, bwd: Callable, *inputs: Var):
    """Register a hand-written forward/backward pair as one tape node.

    ``fwd(*arrays) -> (out, residuals)``; ``bwd(residuals, g_out) -> grads``
    with one entry (or None) per input.
    """
    out_data, res = fwd(*[v.data for v in inputs])
    return record(op, out_data, inputs, lambda g: bwd(res, g))


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep. Returns gradients keyed by ``id(var)`` and fills ``var.grad`` on leaves."""
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TapeError("loss is detached from the tape (no parameter reaches it)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for v, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not v.requires_grad:
                continue
            if gi.shape != v.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {v.data.shape}")
            prev = grads.get(id(v))
            grads[id(v)] = gi if prev is None else prev + gi
    leaves = {}
    for node in tape.nodes:
        for v in node.inputs:
            if v.requires_grad and id(v) not in produced and id(v) not in leaves:
                leaves[id(v)] = v
    for key, v in leaves.items():
        v.grad = grads.get(key, np.zeros_like(v.data))
        grads[key] = v.grad
    return grads


def grad_of(params: dict[str, Var], loss_fn: Callable[[], Var]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` under a fresh tape and return ``(loss, {name: grad})``."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return float(loss.data), {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()
    }


# -- elementwise ------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _unary(op, x: Var, y: np.ndarray, dydx: Callable[[], np.ndarray]) -> Var:
    return record(op, y, (x,), lambda g: (g * dydx(),))


def exp(x: Var) -> Var:
    y = np.exp(x.data)
    return _unary("exp", x, y, lambda: y)


def log(x: Var) -> Var:
    return _unary("log", x, np.log(x.data), lambda: 1.0 / x.data)


def abs_(x: Var) -> Var:
    return _unary("abs", x, np.abs(x.data), lambda: np.sign(x.data))


def square(x: Var) -> Var:
    return _unary("square", x, x.data * x.data, lambda: 2.0 * x.data)


def relu(x: Var) -> Var:
    return _unary("relu", x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(x.data.dtype))


def tanh(x: Var) -> Var:
    y = np.tanh(x.data)
    return _unary("tanh", x, y, lambda: 1.0 - y * y)


def sigmoid(x: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _unary("sigmoid", x, y, lambda: y * (1.0 - y))


def softplus(x: Var) -> Var:
    return _unary(
        "softplus", x, np.logaddexp(0.0, x.data), lambda: 0.5 * (1.0 + np.tanh(0.5 * x.data))
    )


def clip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary("clip", x, np.clip(x.data, lo, hi), lambda: inside.astype(x.data.dtype))


def huber(x: Var, delta: float) -> Var:
    a = np.abs(x.data)
    quad = a <= delta
    y = np.where(quad, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))
    return _unary("huber", x, y, lambda: np.where(quad, x.data, delta * np.sign(x.data)))


# -- reductions and shape ----------------------------------------------------


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", np.asarray(y), (x,), vjp)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Var, shape) -> Var:
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Var, axes) -> Var:
    inv = np.argsort(axes)
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Var, idx) -> Var:
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return record("getitem", x.data[idx], (x,), vjp)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [const(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return record(
        "concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(x: Var, idx: np.ndarray) -> Var:
    """Gather rows of a 2-D ``[M, C]`` Var; ``idx`` may have any shape."""
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, x.shape[1]))
        return (out,)

    return record("take_rows", x.data[idx], (x,), vjp)


def scatter_rows(x: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Sum rows of ``x`` (shape ``idx.shape + [C]``) into an ``[n_rows, C]`` output."""
    idx = np.asarray(idx)
    C = x.shape[-1]
    out = np.zeros((n_rows, C), dtype=x.data.dtype)
    np.add.at(out, idx.reshape(-1), x.data.reshape(-1, C))
    return record("scatter_rows", out, (x,), lambda g: (g[idx],))


# -- linear algebra and layers -------------------------------------------------


def matmul(a, b) -> Var:
    a, b = const(a), const(b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), vjp)


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """``x @ W.T (+ b)`` with ``W`` stored ``[out, in]``."""
    W = const(W)
    Wt = record("transpose", W.data.T, (W,), lambda g: (g.T,))
    y = matmul(x, Wt)
    return y if b is None else add(y, b)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis. An all-zero row maps to ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    C = x.shape[-1]

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, C).sum(axis=0)
        gbeta = g.reshape(-1, C).sum(axis=0)
        return gx, ggamma, gbeta

    return record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def _patches(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, _, _, C = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, Ho, Wo, k, k, C),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )


def conv2d(x: Var, W: Var, b: Var | None = None, stride: int = 1, pad: int | None = None) -> Var:
    """Channel-last convolution. ``x``: ``[B, H, W, Cin]``; ``W``: ``[k, k, Cin, Cout]``."""
    k, _, Cin, Cout = W.shape
    if x.shape[-1] != Cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {Cin}")
    pad = (k - 1) // 2 if pad is None else pad
    B, H, Wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (Wd + 2 * pad - k) // stride + 1
    cols = _patches(xp, k, stride, Ho, Wo).reshape(B * Ho * Wo, k * k * Cin)
    Wm = W.data.reshape(k * k * Cin, Cout)
    y = (cols @ Wm).reshape(B, Ho, Wo, Cout)
    if b is not None:
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(-1, Cout)
        gW = (cols.T @ g2).reshape(W.shape)
        gcols = (g2 @ Wm.T).reshape(B, Ho, Wo, k, k, Cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, pad:pad + H, pad:pad + Wd] if pad else gxp
        out = [gx, gW]
        if b is not None:
            out.append(g2.sum(axis=0))
        return out

    inputs = (x, W) if b is None else (x, W, b)
    return record("conv2d", y, inputs, vjp)


def upsample2(x: Var) -> Var:
    """Nearest-neighbour ×2 upsampling of ``[B, H, W, C]``."""
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    B, H, W, C = x.shape
    return record(
        "upsample2", y, (x,),
        lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),),
    )


def avg_pool(x: Var, k: int) -> Var:
    if k == 1:
        return x
    B, H, W, C = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {k}")
    y = x.data.reshape(B, H // k, k, W // k, k, C).mean(axis=(2, 4))
    return record(
        "avg_pool", y, (x,),
        lambda g: (g.repeat(k, axis=1).repeat(k, axis=2) / (k * k),),
    )


# -- optimization ---------------------------------------------------------------


@dataclass
class StepDecaySchedule:
    """``lr(e) = max(lr0 - step_abs * floor(e / every_epochs), floor_frac * lr0)``."""

    lr0: float = 1e-4
    step_abs: float = 1e-5
    every_epochs: int = 10
    floor_frac: float = 0.5

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return max(self.lr0 - self.step_abs * math.floor(epoch / self.every_epochs),
                   self.floor_frac * self.lr0)


def lr_at(schedule: StepDecaySchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Var], lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            lr=lr,
            **kw,
        )


def adam_step(state: AdamState, params: dict[str, Var], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, applied in place in sorted-name order."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {state.step}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
