"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation here returns a :class:`Tensor`.  When gradients are enabled
and at least one operand requires a gradient, the result remembers its
parents and a closure mapping the upstream gradient to per-parent gradients.
:func:`backward` walks that graph once in reverse topological order.

Broadcasting follows NumPy rules for the elementwise family (bias vectors
broadcast along the last axis, attention masks along the leading batch/head
axes); gradients are summed back to each operand's shape.

Randomness goes through ``numpy.random.Generator`` backed by the PCG64 bit
generator, which is the single PRNG used repo-wide.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_GRAD_ENABLED = True
CHECK_FINITE = True


class NumericsError(Exception):
    """Base class for errors raised by tensor operations."""


class ShapeError(NumericsError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(NumericsError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; extra ints select an independent substream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register an operation defined outside this module.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    return _result(op, np.asarray(data, dtype=DTYPE), parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise and linear family
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; a Python float ``b`` acts as a scale."""
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    return mul(a, float(c))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape)
    vec = b.ndim == 1
    bd = b.data[:, None] if vec else b.data
    if a.data.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, bd)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if vec:
            g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), bd.shape)
            if vec:
                gb = gb[:, 0]
        return ga, gb

    return _result("matmul", out[..., 0] if vec else out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _result("relu", np.where(pos, x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return _result("exp", y, (x,), bw)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _result("log", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis.

    A zero-variance row maps to zeros before gain/bias since the variance is
    clamped by ``eps``.
    """
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=-1, keepdims=True) / n
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return gx, gg, gb

    return _result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), bw)


def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted logsumexp normalisation."""
    y = _log_softmax_np(x.data, axis)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = np.exp(_log_softmax_np(x.data, axis))

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result("embedding", table.data[ids], (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; the keep-mask is drawn from ``rng`` so runs replay."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _result("dropout", x.data * keep, (x,), bw)


# ---------------------------------------------------------------------------
# shape plumbing and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _result("reshape", y, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result("transpose", np.transpose(x.data, axes), (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def tsum(x: Tensor, axis=None) -> Tensor:
    y = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result("sum", y, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def index(x: Tensor, key) -> Tensor:
    y = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result("index", np.array(y, dtype=DTYPE), (x,), bw)


def take_last(x: Tensor, idx) -> Tensor:
    """``out[..., ] = x[..., idx[...]]``: pick one entry along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError("take_last", x.shape, idx.shape)
    y = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _result("take_last", y, (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError("stack", *sorted(shapes))
    y = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result("stack", y, ts, bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.ndim != 0:
        raise ShapeError("backward (loss must be a scalar)", loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp


def finite_diff_grad(f: Callable[[], float], params: Iterable[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` with respect to each tensor in ``params``.

    ``f`` takes no arguments and reads the parameters it closes over; each
    coordinate is perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def call() -> float:
        with no_grad():
            v = f()
        return v.item() if isinstance(v, Tensor) else float(v)

    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = call()
            flat[i] = orig - eps
            fm = call()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Noam-scheduled Adam
# ---------------------------------------------------------------------------


def noam_rate(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("noam step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def noam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], step: int, d_model: int,
              warmup: int, scale: float, state: AdamState) -> float:
    """One bias-corrected Adam update at the Noam rate for ``step``; returns the rate."""
    lr = noam_rate(step, d_model, warmup, scale)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


class NoamOptimizer:
    def __init__(self, params: dict[str, Tensor], d_model: int, warmup: int, scale: float = 1.0,
                 clip_norm: float | None = None):
        self.params = params
        self.d_model = d_model
        self.warmup = warmup
        self.scale = scale
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.step_num = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, divisor: float = 1.0) -> float:
        grads = {k: p.grad / divisor for k, p in self.params.items() if p.grad is not None}
        if self.clip_norm:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        self.step_num += 1
        return noam_step(self.params, grads, self.step_num, self.d_model, self.warmup, self.scale, self.state)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"NATCKPT\x00"
CKPT_VERSION = 1


class CheckpointFormatError(NumericsError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: magic, u32 version, u64 step, u32 epoch, u32 count, then per
    parameter u32 name length, utf-8 name, u32 rank, u64 dims, <f8 payload."""
    parts = [CKPT_MAGIC, struct.pack("<IQII", CKPT_VERSION, ckpt.step, ckpt.epoch, len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointFormatError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, step, epoch, count = take("<IQII")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointFormatError(f"{path}: truncated")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated payload for {name}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return Checkpoint(params=params, step=step, epoch=epoch)
