"""Dense-tensor numeric kernel with reverse-mode automatic differentiation.

Tensors hold float64 numpy arrays. Every differentiable operation records a
node on a thread-local tape (`Graph`); `backward(loss)` replays the tape in
exact reverse order and accumulates gradients additively into every
`requires_grad` tensor reachable from the loss. The tape is consumed by
`backward`, so calling it twice without new forward work is an error.

Shape discipline is strict: binary elementwise ops require equal shapes,
with one exception — adding a bias vector over the rows of a matrix. Any
other broadcast must be made explicit through `tile_axis`/`reshape`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, GraphError, InputError, NumericError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "parameter",
    "constant",
    "zeros",
    "no_grad",
    "is_recording",
    "active_graph",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "sum_all",
    "sum_axis",
    "mean_axis",
    "concat",
    "stack",
    "take_rows",
    "take_index",
    "reshape",
    "permute",
    "transpose_last",
    "tile_axis",
    "scale_rows",
    "dropout",
    "layer_norm",
    "cross_entropy_rows",
    "AdamWState",
    "adamw_step",
    "clip_global_norm",
]


class Tensor:
    """A dense float64 array plus optional gradient storage."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Graph:
    """Recorded tape of one forward pass, replayed in reverse by backward."""

    __slots__ = ("nodes", "spent")

    def __init__(self):
        # each node: (out_tensor, input_tensors, backward_fn)
        self.nodes: list[tuple] = []
        self.spent = False

    def record(self, out: Tensor, inputs: tuple, bwd) -> None:
        self.nodes.append((out, inputs, bwd))
        self.spent = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not self.nodes:
            if self.spent:
                raise GraphError("backward already called for this forward pass")
            raise GraphError("no recorded operations to differentiate")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, bwd in reversed(self.nodes):
            out_grad = out.grad
            if out_grad is None:
                continue
            grads = bwd(out_grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g
        self.nodes.clear()
        self.spent = True


_tls = threading.local()


def active_graph() -> Graph:
    """The calling thread's current tape (created on first use)."""
    g = getattr(_tls, "graph", None)
    if g is None:
        g = Graph()
        _tls.graph = g
    return g


def is_recording() -> bool:
    return getattr(_tls, "recording", True)


@contextmanager
def no_grad():
    """Disable tape recording; forward math only."""
    prev = is_recording()
    _tls.recording = False
    try:
        yield
    finally:
        _tls.recording = prev


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss over the active tape."""
    active_graph().backward(loss)


def _apply(data: np.ndarray, inputs: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    req = False
    if is_recording():
        for t in inputs:
            if t.requires_grad:
                req = True
                break
    out.requires_grad = req
    if req:
        active_graph().record(out, inputs, bwd)
    return out


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; N-d inputs are treated as stacks of matrices.

    Gradients: dA = dC @ B^T, dB = A^T @ dC (transposes on the last two axes).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bwd(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return _apply(out, (a, b), bwd)


def _is_bias_broadcast(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. The only permitted broadcast is a bias vector over rows."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g

        return _apply(a.data + b.data, (a, b), bwd)
    if _is_bias_broadcast(a, b):
        axes = tuple(range(a.ndim - 1))

        def bwd(g):
            return g, g.sum(axis=axes)

        return _apply(a.data + b.data, (a, b), bwd)
    raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        return g, -g

    return _apply(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _apply(ad * bd, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _apply(-x.data, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _apply(x.data * c, (x,), bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g,)

    return _apply(x.data + c, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _apply(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _apply(y, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    y = np.maximum(xd, 0.0)

    def bwd(g):
        return (g * (xd > 0.0),)

    return _apply(y, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along `axis`; subtracts the per-slice maximum."""
    xd = x.data
    if not (-xd.ndim <= axis < xd.ndim):
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _apply(y, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _apply(np.asarray(x.data.sum()), (x,), bwd)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _apply(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _apply(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise InputError("concat requires at least one tensor")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(xs))
        )

    return _apply(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bwd)


def stack(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise InputError("stack requires at least one tensor")

    def bwd(g):
        parts = np.split(g, len(xs), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in parts)

    return _apply(np.stack([t.data for t in xs], axis=axis), tuple(xs), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding lookup); gradient scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _apply(x.data[idx], (x,), bwd)


def take_index(x: Tensor, axis: int, i: int) -> Tensor:
    """Select index `i` along `axis`, dropping that axis."""
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = i
        gx[tuple(sl)] = g
        return (gx,)

    return _apply(np.take(x.data, i, axis=axis), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply(x.data.reshape(shape), (x,), bwd)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _apply(x.data.transpose(axes), (x,), bwd)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    return _apply(x.data.swapaxes(-1, -2), (x,), bwd)


def tile_axis(x: Tensor, axis: int, reps: int) -> Tensor:
    """Explicitly repeat a size-1 axis; gradient sums back over it."""
    if x.shape[axis] != 1:
        raise DimensionError(
            f"tile_axis requires size 1 along axis {axis}, got {x.shape}"
        )

    def bwd(g):
        return (g.sum(axis=axis, keepdims=True),)

    reps_vec = [1] * x.ndim
    reps_vec[axis] = reps
    return _apply(np.tile(x.data, reps_vec), (x,), bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x (N, C) by the matching entry of s (N,)."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows shapes: {x.shape} vs {s.shape}")
    xd, sd = x.data, s.data

    def bwd(g):
        return g * sd[:, None], (g * xd).sum(axis=1)

    return _apply(xd * sd[:, None], (x, s), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) at train time."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * mask,)

    return _apply(x.data * mask, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalisation over the last axis, with affine output."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} vs feature dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def bwd(g):
        axes = tuple(range(xd.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        gx = g * gd
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _apply(xhat * gd + bias.data, (x, gain, bias), bwd)


def cross_entropy_rows(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows.

    `weights` are per-row nonnegative floats (0/1 masks in practice); the
    loss is the weight-normalised average, so appending zero-weight rows is
    a no-op. Raises if all weights are zero.
    """
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
        raise DimensionError(
            f"cross_entropy_rows shapes: logits {logits.shape}, targets "
            f"{targets.shape}, weights {weights.shape}"
        )
    total_w = weights.sum()
    if total_w <= 0.0:
        raise InputError("cross_entropy_rows: all row weights are zero")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    shifted = ld - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(ld.shape[0])
    loss = -(weights * logp[rows, targets]).sum() / total_w

    def bwd(g):
        p = np.exp(logp)
        grad = p * (weights / total_w)[:, None]
        grad[rows, targets] -= weights / total_w
        return (grad * g.reshape(-1)[0],)

    return _apply(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class AdamWState:
    """First/second moments and step count for a fixed parameter set."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    *,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update: bias-corrected moments, decay applied to the
    parameter itself (decoupled), not to the gradient."""
    if set(params) != set(state.m):
        raise InputError("optimizer state does not match the parameter set")
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif np.isnan(g).any():
            raise NumericError(f"NaN gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= lr * (update + weight_decay * p.data)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm
