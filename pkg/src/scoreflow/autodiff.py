"""Minimal dense-tensor engine with define-by-run reverse-mode autodiff.

Values are float64 numpy arrays. Operations executed inside an active
:class:`Tape` whose inputs require gradients are recorded in execution order;
``Tape.backward`` replays them in reverse. Outside a tape nothing is recorded,
which is how inference runs.

Broadcasting is restricted to trailing dimensions: the smaller operand's shape
must be a suffix of the larger one's.
"""

from __future__ import annotations

import math

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
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
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def gelu(self):
        return gelu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Use as a context manager; build a fresh tape for every step.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def record(self, out, inputs, backward_fn, op):
        self.records.append((out, inputs, backward_fn, op))

    def __len__(self):
        return len(self.records)

    def backward(self, loss, params=None):
        """Reverse pass from a scalar ``loss``.

        Sets ``.grad`` on every tracked leaf. When ``params`` is given, returns
        their gradients in order, with zeros for parameters the loss never
        touched.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, inputs, backward_fn, op in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for t, gi in zip(inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise RuntimeError(f"{op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                leaves[key] = t
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key]
        if params is None:
            return None
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
                p.grad = g
            out.append(g)
        return out


def backward(loss, params=None):
    """Run the reverse pass on the innermost active tape."""
    if not _TAPES:
        raise RuntimeError("backward called with no active Tape")
    return _TAPES[-1].backward(loss, params)


def _result(data, inputs, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward_fn, op)
    return out


def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ValueError(f"{op}: shapes {a_shape} and {b_shape} are not trailing-broadcastable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(y, (a,), bw, "gelu")


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elementwise(op_kind, a, b=None):
    """Dispatch by name: add, sub, mul, scale, tanh, gelu, relu."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"tanh": tanh, "gelu": gelu, "relu": relu}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind == "scale":
        return scale(as_tensor(a), b)
    if op_kind in unary:
        return unary[op_kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None):
    y = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(y, (a,), bw, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    y = a.data.reshape(shape)
    return _result(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    """Swap the last two axes."""
    y = np.swapaxes(a.data, -1, -2)
    return _result(y, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    y = np.transpose(a.data, axes)
    return _result(np.ascontiguousarray(y), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def getitem(a, index):
    y = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(np.array(y, copy=True), (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(y, tuple(tensors), bw, "concat")


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    y = table.data[ids]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _result(y, (table,), bw, "embedding")


def frame_window(x, width):
    """Stack frames t-width..t+width of an F x D tensor into F x (2*width+1)*D.

    Out-of-range frames are zeros.
    """
    n, d = x.shape
    padded = np.zeros((n + 2 * width, d))
    padded[width:width + n] = x.data
    y = np.concatenate([padded[k:k + n] for k in range(2 * width + 1)], axis=1)

    def bw(g):
        gp = np.zeros_like(padded)
        for k in range(2 * width + 1):
            gp[k:k + n] += g[:, k * d:(k + 1) * d]
        return (gp[width:width + n],)

    return _result(y, (x,), bw, "frame_window")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(y, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        d = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits, targets):
    """Mean negative log-softmax of the target entries of a B x V tensor."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be B x V, got {logits.shape}")
    b, v = logits.shape
    if b == 0 or targets.shape != (b,):
        raise ValueError(f"need {b} >= 1 targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target index out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, targets])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / b),)

    return _result(np.array(loss), (logits,), bw, "softmax_cross_entropy")


def mse(a, b):
    """Mean squared difference over all entries."""
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------- optimisation

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError("lr must be positive")
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name or i}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state):
    state.step(grads)
    return params


def warmup_cosine(step, total, peak, warmup, min_ratio=0.3):
    """Linear warmup to ``peak`` then cosine decay to ``min_ratio * peak``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return peak * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def linear_decay(step, start_lr, end_lr, start_step, end_step):
    """Constant ``start_lr`` until ``start_step``, linear to ``end_lr`` at ``end_step``."""
    if step <= start_step:
        return start_lr
    if step >= end_step:
        return end_lr
    frac = (step - start_step) / (end_step - start_step)
    return start_lr + frac * (end_lr - start_lr)
