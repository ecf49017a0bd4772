"""Minimal reverse-mode autodiff on float64 numpy arrays.

Everything here is deterministic: ops are pure functions of their inputs
and (where relevant) an explicit numpy Generator. A Tape records executed
ops in order; backward() replays the record in exact reverse order and
accumulates gradients additively into every parameter it saw.

No broadcasting beyond what the fixed architecture needs (scalars and a
trailing bias axis). Shapes are checked eagerly; non-finite results raise.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

# Toggle for the per-op finiteness contract. Left on: the models here are
# small and a NaN caught at the op that produced it is worth the ~5% cost.
ASSERT_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    return a


def _check_finite(a: np.ndarray, op: str) -> None:
    if ASSERT_FINITE and not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite output of op '{op}'")


class Tensor:
    """A float64 array plus the bookkeeping backward() needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_id")

    _next_id = 0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._id = Tensor._next_id
        Tensor._next_id += 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detached(self) -> "Tensor":
        """A constant view of the same storage (gradients do not flow)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.name = self.name
        t._id = Tensor._next_id
        Tensor._next_id += 1
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of executed ops plus the parameters they touched.

    A tape is single-use: one backward() consumes it. clear() drops the
    record and zeroes the gradients of every registered parameter.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[int, Tensor] = {}
        self.consumed = False
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise TapeError("a Tape is already active")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def watch(self, t: Tensor) -> None:
        if t.requires_grad:
            self.params[t._id] = t
            self._tracked.add(t._id)

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t._id in self._tracked

    def record(self, out: Tensor, inputs: tuple, backward_fn, op: str) -> None:
        for t in inputs:
            if t.requires_grad:
                self.params[t._id] = t
                self._tracked.add(t._id)
        self._tracked.add(out._id)
        self.nodes.append(_Node(out, inputs, backward_fn, op))

    def clear(self) -> None:
        for p in self.params.values():
            p.grad = None
        self.nodes = []
        self._tracked = set()
        self.consumed = False


def _record(out_data, inputs, backward_fn, op) -> Tensor:
    """Create the op output and, if a tape is active and any input is
    tracked, record the op. backward_fn(g) must return one gradient array
    (or None) per input."""
    out = Tensor(out_data)
    _check_finite(out.data, op)
    tape = Tape._active
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn, op)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over the tape; returns {parameter: d loss / d parameter}.

    Gradients also accumulate additively into each parameter's .grad.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.out._id, None)
        if g_out is None:
            continue
        g_inputs = node.backward_fn(g_out)
        for t, g in zip(node.inputs, g_inputs):
            if g is None:
                continue
            if t._id in grads:
                grads[t._id] = grads[t._id] + g
            else:
                grads[t._id] = g

    out: dict[Tensor, np.ndarray] = {}
    for pid, p in tape.params.items():
        g = grads.get(pid)
        if g is None:
            g = np.zeros_like(p.data)
        if p.grad is None:
            p.grad = g.copy()
        else:
            p.grad = p.grad + g
        out[p] = g
    return out


def clip_gradients(grads: dict, lo: float, hi: float) -> dict:
    """Elementwise clamp of a gradient map into [lo, hi]."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo}, {hi}")
    return {k: np.clip(g, lo, hi) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        ga = g if a.shape == out.shape else np.sum(g).reshape(a.shape)
        gb = g if b.shape == out.shape else np.sum(g).reshape(b.shape)
        return ga, gb

    return _record(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bwd(g):
        ga = g if a.shape == out.shape else np.sum(g).reshape(a.shape)
        gb = -g if b.shape == out.shape else -np.sum(g).reshape(b.shape)
        return ga, gb

    return _record(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != out.shape:
            ga = np.sum(ga).reshape(a.shape)
        if b.shape != out.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _record(out, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s
    return _record(out, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd, "matmul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
    out = x.data + b.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return _record(out, (x, b), bwd, "bias_add")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a per-channel (last axis) vector."""
    if s.data.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise ShapeError(f"channel_scale: {x.shape} * {s.shape}")
    out = x.data * s.data

    def bwd(g):
        axes = tuple(range(g.ndim - 1))
        return g * s.data, (g * x.data).sum(axis=axes)

    return _record(out, (x, s), bwd, "channel_scale")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd, "concat")


def slice_(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    out = x.data[key]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[key] = g
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), bwd, "slice")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _record(out, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0.0, x.data, slope * x.data)
    mask = x.data > 0.0
    return _record(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return _record(out, (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data)
    if lo is not None:
        mask = mask * (x.data >= lo)
    if hi is not None:
        mask = mask * (x.data <= hi)
    return _record(out, (x,), lambda g: (g * mask,), "clamp")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), bwd, "softmax")


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis (axis dropped)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g, -1) * soft,)

    return _record(out, (x,), bwd, "logsumexp")


def sum_(x: Tensor) -> Tensor:
    out = x.data.sum()
    shape = x.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_(x: Tensor) -> Tensor:
    out = x.data.mean()
    shape = x.shape
    n = x.data.size
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.mean(diff * diff)
    n = diff.size

    def bwd(g):
        d = (2.0 / n) * diff * g
        return d, -d

    return _record(out, (a, b), bwd, "mse")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: eval mode is the identity, no rescaling needed."""
    if not train or rate == 0.0:
        return _record(x.data.copy(), (x,), lambda g: (g,), "dropout")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(DTYPE) / keep
    out = x.data * mask
    return _record(out, (x,), lambda g: (g * mask,), "dropout")


def gaussian_sample(mean: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw: mean + exp(logvar/2) * eps, eps ~ N(0, 1)."""
    if mean.shape != logvar.shape:
        raise ShapeError(f"gaussian_sample: {mean.shape} vs {logvar.shape}")
    eps = rng.standard_normal(mean.shape)
    std = np.exp(0.5 * logvar.data)
    out = mean.data + std * eps

    def bwd(g):
        return g, g * 0.5 * std * eps

    return _record(out, (mean, logvar), bwd, "gaussian_sample")


# ---------------------------------------------------------------------------
# spatial ops (NHWC layout, square kernels)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N,H,W,C) -> (N,OH,OW,KH,KW,C) patch view (copied)."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # sliding_window_view yields (N, H', W', C, KH, KW)
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add inverse of _im2col. cols: (N,OH,OW,KH,KW,C)."""
    n, oh, ow, kh, kw, c = cols.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (N,H,W,Cin), w: (KH,KW,Cin,Cout)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: {x.shape} * {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: output would be empty for input {x.shape}")
    cols = _im2col(x.data, kh, kw, stride, pad)
    cols2 = cols.reshape(n * oh * ow, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wm).reshape(n, oh, ow, cout)

    def bwd(g):
        g2 = g.reshape(n * oh * ow, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gcols = (g2 @ wm.T).reshape(n, oh, ow, kh, kw, cin)
        gx = _col2im(gcols, h, wd, stride, pad)
        return gx, gw

    return _record(out, (x, w), bwd, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (N,H,W,Cin), w: (KH,KW,Cin,Cout); output (N, (H-1)s-2p+KH, ...).

    Exactly the adjoint of conv2d with the same stride/pad, so a
    stride-2 pad-1 4x4 kernel doubles the spatial size.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d_transpose: {x.shape} * {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d_transpose: output would be empty for input {x.shape}")
    # each input pixel deposits a (KH,KW,Cout) patch
    x2 = x.data.reshape(n * h * wd, cin)
    patches = (x2 @ w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)).reshape(
        n, h, wd, kh, kw, cout
    )
    out = _col2im(patches, oh, ow, stride, pad)

    def bwd(g):
        gcols = _im2col(g, kh, kw, stride, pad)  # (N,H,W,KH,KW,Cout)
        gc2 = gcols.reshape(n * h * wd, kh * kw * cout)
        gx = (gc2 @ w.data.transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)).reshape(x.shape)
        gw = (x2.T @ gc2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        return gx, np.ascontiguousarray(gw)

    return _record(out, (x, w), bwd, "conv2d_transpose")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel (last axis) batch norm. running_* are plain buffers,
    updated in place in train mode and frozen in eval mode."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: params {gamma.shape} for {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    nred = x.data.size // c

    def bwd(g):
        ggamma = np.sum(g * xhat, axis=axes)
        gbeta = np.sum(g, axis=axes)
        if train:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).sum(axis=axes) / nred)
        else:
            gx = g * gamma.data * inv
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd, "batch_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: params {gain.shape} for {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        axes = tuple(range(x.data.ndim - 1))
        ggain = np.sum(g * xhat, axis=axes)
        gbias = np.sum(g, axis=axes)
        gh = g * gain.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd, "layer_norm")
