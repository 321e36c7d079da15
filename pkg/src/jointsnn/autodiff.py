"""Dense float64 tensors with a tape-based reverse-mode autodiff engine.

Only the operations the networks, losses and factorized weights need are
provided. Every operation takes and returns :class:`Tensor`; when a
:class:`Tape` is active and an operand requires gradients, the operation
is recorded together with a closure computing the vector-Jacobian product.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum(mul(x, x))
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StatisticsError, TapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Flip to False to skip the per-operation finiteness scan in hot loops.
CHECK_FINITE = True

_node_ids = itertools.count(1)
_active_tapes: list["Tape"] = []


class Tensor:
    """A dense n-d array of doubles with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("id", "op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records operations in execution order; replays them in reverse.

    A tape may be replayed once. A second :meth:`backward` raises
    :class:`TapeError` because intermediate buffers are released after the
    first pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._seen: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        node = _Node(op, tuple(inputs), output, backward)
        for t in inputs:
            self._seen.setdefault(id(t), t)
        output.node_id = node.id
        self._seen[id(output)] = output
        self.nodes.append(node)

    def touch(self, t: Tensor) -> None:
        """Make ``t`` part of the tape so it receives a (possibly zero) gradient."""
        self._seen.setdefault(id(t), t)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None, retain_all: bool = False) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` requiring grad.

        With ``retain_all`` intermediate tensors get their gradients too.
        Tensors reached by the tape but receiving no gradient (for instance
        through :func:`detach`) get an exact zero array.
        """
        if self._consumed:
            raise TapeError("tape already replayed; record a new tape for another backward pass")
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward without explicit grad needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if retain_all:
                node.output.grad = g if g is not None else np.zeros_like(node.output.data)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi
        for k, t in self._seen.items():
            if t.requires_grad and t.node_id is None:
                g = grads.get(k)
                t.grad = g if g is not None else np.zeros_like(t.data)
        if id(loss) in grads and loss.node_id is None and loss.requires_grad:
            loss.grad = grads[id(loss)]
        self._consumed = True
        self.nodes = []


def active_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("mul_scalar", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly zero is taken as 0."""
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    """Value copy that blocks gradient flow back into ``a``."""
    out = Tensor(a.data.copy())
    tape = active_tape()
    if tape is not None and a.requires_grad:
        tape.touch(a)
    return out


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ConfigError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def repeat(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    shape = (n,) + a.shape
    return _make("repeat", np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g.sum(axis=0),))


def index(a: Tensor, i: int) -> Tensor:
    """Select entry ``i`` along the leading axis."""
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[i] = g
        return (full,)

    return _make("index", a.data[i].copy(), (a,), backward)


def unstack(a: Tensor) -> list[Tensor]:
    return [index(a, i) for i in range(a.shape[0])]


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N, C, H, W] with ``w`` [O, C, k, k].

    Internally the patch matrix is laid out channels-last so both the
    gather and the backward scatter run over contiguous channel runs.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected rank-4 input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    xp = np.zeros((n, hp, wp, c))
    xp[:, padding:padding + h, padding:padding + wd, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    del xp
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros((n, hp, wp, c))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + wd, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return _make("conv2d", out, (x, w), backward)


# --------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    count = a.data.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make("mean", np.asarray(out), (a,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects rank 4, got shape {x.shape}")
    return mean(x, axis=(2, 3))


# --------------------------------------------------------------------------
# probabilities


def _check_rank2(op, x):
    if x.ndim != 2:
        raise DimensionError(f"{op} expects rank-2 logits, got shape {x.shape}")


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    _check_rank2("softmax", x)
    p = softmax_array(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("softmax", p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    _check_rank2("log_softmax", x)
    out = log_softmax_array(x.data)
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


# --------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean and variance for :func:`batch_norm`."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats, training: bool) -> Tensor:
    """Per-channel batch normalization of a rank-4 tensor.

    Training mode normalizes with the biased batch variance and moves the
    running statistics by ``BN_MOMENTUM`` (unbiased variance, as in most
    frameworks). Eval mode uses the running statistics.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects rank 4, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    gd = gamma.data.reshape(bshape)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise StatisticsError("batch_norm in training mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * invstd
        running.mean = (1 - BN_MOMENTUM) * running.mean + BN_MOMENTUM * mu.reshape(c)
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running.var = (1 - BN_MOMENTUM) * running.var + BN_MOMENTUM * unbiased

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd
            dx = invstd / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        invstd = 1.0 / np.sqrt(running.var.reshape(bshape) + BN_EPS)
        xhat = (x.data - running.mean.reshape(bshape)) * invstd

        def backward(g):
            return g * gd * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return _make("batch_norm", out, (x, gamma, beta), backward)
