"""Minimal dense-tensor math with reverse-mode differentiation.

Values are numpy arrays (row-major). Training runs in float32; tests run in
float64 where bit-level reproducibility and finite-difference checks matter.
Tensors are immutable once created: ops allocate new outputs and record a
backward closure on the computation graph.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (e.g. contrastive baselines)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph --------------------------------------------------------------

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; leaf grads accumulate additively."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*ts):
    return _grad_enabled and any(t.requires_grad or t._parents for t in ts)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward):
    if _needs_graph(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")

    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def reshape(a, shape):
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes):
    a = _wrap(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return _make(out_data, tensors, backward)


def take_rows(table, ids):
    """Row gather (embedding lookup); backward scatter-adds into the table."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accum(gt)

    return _make(out_data, (table,), backward)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean_(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def gelu(a):
    """Gaussian error linear unit (tanh approximation); smooth for grad checks."""
    a = _wrap(a)
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def rotate_half(a):
    """Map (x1, x2) halves of the last axis to (-x2, x1); rotary helper."""
    a = _wrap(a)
    h = a.shape[-1] // 2
    x1, x2 = a.data[..., :h], a.data[..., h:]
    out_data = np.concatenate([-x2, x1], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        a._accum(np.concatenate([g2, -g1], axis=-1))

    return _make(out_data, (a,), backward)


def layernorm(x, gain, bias, eps=1e-5):
    """Zero-mean/unit-variance over the last axis, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        if gain.requires_grad or gain._parents:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad or bias._parents:
            bias._accum(_unbroadcast(g, bias.shape))
        if x.requires_grad or x._parents:
            gy = g * gain.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
            x._accum(gx)

    return _make(out_data, (x, gain, bias), backward)


def softmax_rows(x, mask=None):
    """Row softmax over the last axis. `mask` marks allowed entries (True).

    Masked entries get probability 0; a fully masked row yields all zeros
    rather than NaN so strict causal masks stay well defined at position 0.
    """
    x = _wrap(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        z = np.where(mask, x.data, -np.inf)
    else:
        z = x.data
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        p = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)

    def backward(g):
        gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
        x._accum(gx)

    return _make(p, (x,), backward)


def log_softmax_rows(x):
    x = _wrap(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def backward(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (x,), backward)


def cross_entropy(logits, targets, weights=None):
    """Weighted next-token cross-entropy: -sum w_i log p_i[t_i] / sum w_i.

    `weights` are constants (no gradient flows into them); positions with
    weight 0 are ignored. Raises IndexError for out-of-vocabulary targets.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of vocabulary [0, {vocab})")
    if weights is None:
        weights = np.ones(n, dtype=logits.dtype)
    else:
        weights = np.asarray(weights, dtype=logits.dtype)
        if weights.shape != (n,):
            raise ShapeError(f"weights shape {weights.shape} != ({n},)")
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy requires positive total weight")

    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1))
    logp = z[np.arange(n), targets] - lse
    out_data = np.asarray(-(weights * logp).sum() / wsum, dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        grad = p * weights[:, None]
        grad[np.arange(n), targets] -= weights
        logits._accum(g * grad / wsum)

    return _make(out_data, (logits,), backward)


def bce_with_logits(logit, target):
    """Numerically stable binary cross-entropy on a raw logit tensor."""
    logit = _wrap(logit)
    x = logit.data
    t = np.asarray(target, dtype=x.dtype)
    out_data = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(out_data.mean(), dtype=x.dtype)

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-x))
        logit._accum(g * (s - t) / x.size)

    return _make(out_data, (logit,), backward)


def grad_check(f, params, rng=None, step=1e-5, samples_per_tensor=8):
    """Compare analytic gradients of scalar `f(params)` to central differences.

    Checks a seeded random subset of coordinates per tensor (all coordinates
    when the tensor is small). Returns a report dict with the max relative
    error; callers assert against their tolerance (1e-4 for full models).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise NumericError("grad_check requires 64-bit parameters")
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    loss.backward()
    # snapshot now: f() may clear grads on subsequent finite-difference calls
    grads = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    worst = 0.0
    per_tensor = []
    for p, analytic in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = (np.arange(n) if n <= samples_per_tensor
               else rng.choice(n, size=samples_per_tensor, replace=False))
        t_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            dn = float(f().data)
            flat[i] = orig
            fd = (up - dn) / (2 * step)
            an = float(analytic.reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1e-8)
            t_worst = max(t_worst, abs(fd - an) / denom)
        per_tensor.append(t_worst)
        worst = max(worst, t_worst)
    return {"max_rel_err": worst, "per_tensor": per_tensor, "loss": float(loss.data)}
