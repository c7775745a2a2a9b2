"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every trainable quantity in the package is a :class:`Tensor`.  Each forward op
records its parents and a backward closure on a tape that lives only as long
as the output tensors reference it; :func:`backward` walks the tape once in
reverse topological order and then releases it.

Broadcasting is deliberately narrow: an operand may match the other's shape
exactly, be a scalar, or be a bias row whose shape equals the trailing
dimension of the other operand.  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GraphError",
    "NumericError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "exp",
    "log",
    "relu",
    "square",
    "sum",
    "mean",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "take",
    "gather_last",
    "embedding",
    "log_softmax",
    "softmax",
    "layer_norm",
    "custom",
    "softmax_logprobs",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "make_rng",
    "derive_seed",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, stale graph, missing grads)."""


class NumericError(ArithmeticError):
    """Non-finite values or an iterative routine that failed to converge."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if not grad_enabled():
        return out
    if any(p._consumed for p in parents):
        raise GraphError("operand belongs to a graph already consumed by backward")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "a_row"
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, which: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{which}_scalar":
        return np.asarray(g.sum()).reshape(shape)
    if kind == f"{which}_row":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``a`` may carry leading batch dimensions: ``(..., m, k) @ (k, n)`` applies
    the same right operand to every batch entry; ``(..., m, k) @ (..., k, n)``
    requires identical batch dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = _as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)
    return _make(out, (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(out, xs, bw, "stack")


def take(x: Tensor, idx) -> Tensor:
    """Basic or advanced numpy indexing with scatter-add backward."""
    x = _as_tensor(x)
    out = np.array(x.data[idx], copy=True)
    src_shape = x.shape

    def bw(g):
        gx = np.zeros(src_shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), bw, "take")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., ] = x[..., index[...]]`` along the last axis."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {index.shape} != {x.shape[:-1]}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    src_shape = x.shape

    def bw(g):
        gx = np.zeros(src_shape)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), bw, "gather_last")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]
    n, d = weight.shape

    def bw(g):
        gw = np.zeros((n, d))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, d))
        return (gw,)

    return _make(out, (weight,), bw, "embedding")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_reduce_to(g, kind, "a", sa), _reduce_to(g, kind, "b", sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_reduce_to(g, kind, "a", sa), -_reduce_to(g, kind, "b", sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(
        out,
        (a, b),
        lambda g: (_reduce_to(g * bd, kind, "a", ad.shape), _reduce_to(g * ad, kind, "b", bd.shape)),
        "mul",
    )


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_np(np.atleast_1d(x.data)).reshape(x.shape)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """Stable ``log(sigmoid(x)) = -softplus(-x)``."""
    x = _as_tensor(x)
    z = x.data
    out = -(np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    s = _sigmoid_np(np.atleast_1d(-z)).reshape(z.shape)
    return _make(out, (x,), lambda g: (g * s,), "log_sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def log_softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax along ``axis``; ``mask`` (broadcastable, True = keep) drops entries."""
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        gz = np.where(mask, g, 0.0) if mask is not None else g
        gx = gz - p * np.sum(gz, axis=axis, keepdims=True)
        return (gx,)

    return _make(out, (x,), bw, "log_softmax")


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def softmax_logprobs(logits) -> Tensor:
    """Log-probabilities of a logit vector (logsumexp-stabilised)."""
    logits = _as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits")
    return log_softmax(logits, axis=-1)


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine parameters."""
    x = _as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd
    d = xd.shape[-1]

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def custom(inputs: Sequence[Tensor], value: np.ndarray, backward_fn, op: str = "custom") -> Tensor:
    """Wrap an externally computed value whose vector-Jacobian product is known.

    ``backward_fn(g)`` must return one gradient per input (or None).
    """
    return _make(np.asarray(value, dtype=np.float64), tuple(inputs), backward_fn, op)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the tape is released afterwards,
    so a second call on the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by an earlier backward; rerun the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Moment buffers are keyed by position in ``params``, so the same parameter
    list must be passed every step.
    """
    if len(params) != len(grads):
        raise GraphError("params and grads differ in length")
    for i, g in enumerate(grads):
        if g is None:
            raise GraphError(f"parameter {i} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Convenience wrapper binding a fixed parameter list to an AdamState."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)


# ----------------------------------------------------------------------------
# randomness
# ----------------------------------------------------------------------------


def derive_seed(seed: int, *path: str | int) -> list[int]:
    """Entropy list naming one random stream: the root seed plus a component path."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            words.append(int.from_bytes(part.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
            rest = part.encode("utf-8")[8:]
            while rest:
                words.append(int.from_bytes(rest[:8].ljust(8, b"\0"), "little"))
                rest = rest[8:]
        else:
            words.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return words


def make_rng(seed: int, *path: str | int) -> np.random.Generator:
    """Philox (64-bit counter-based) generator for one named component.

    Streams are isolated by path, e.g. ``make_rng(seed, "rl", "sample", step)``;
    nothing in the package touches numpy's global RNG.
    """
    ss = np.random.SeedSequence(derive_seed(seed, *path))
    return np.random.Generator(np.random.Philox(ss))
