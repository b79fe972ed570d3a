"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward rule; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order, visiting each node
once. Only leaf tensors keep a gradient, and leaf gradients accumulate across
backward passes until :meth:`Tensor.zero_grad` is called.

Operations keep the floating dtype of their inputs (float32 for training,
float64 for verification). Shapes follow the ``[batch, channel, time]``
convention used by the rest of the package.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from eegattn.exceptions import ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

REDUCE_TIME_STATS = ("mean", "max", "std", "l2", "entropy")
REDUCE_CHANNEL_STATS = ("mean", "max", "entropy")


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    """Coerce operands; python scalars take the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = np.expm1(np.minimum(x.data, 0))
    if alpha != 1.0:
        neg *= alpha
    out = np.maximum(x.data, 0) + neg
    # derivative is 1 for x > 0 (where neg == 0) and neg + alpha otherwise
    slope = neg + alpha if alpha == 1.0 else np.where(x.data > 0, 1.0, neg + alpha).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * slope,), "elu")


ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "elu": elu, "relu": relu}


def elementwise(x: Tensor, kind: str) -> Tensor:
    try:
        return ELEMENTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; valid: {sorted(ELEMENTWISE)}") from None


# ---------------------------------------------------------------------------
# shape and reduction primitives


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    return _result(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),),
        "sum",
    )


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    return _result(
        x.data.mean(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,),
        "mean",
    )


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward, "max")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Every index of an operand must appear in the other operand or in the
    output, which holds for all contractions used in this package.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        missing = set(s) - set(other) - set(out_sub)
        if missing:
            raise ValueError(f"einsum index {sorted(missing)} only in one operand: {subscripts}")

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _result(np.einsum(subscripts, a.data, b.data, optimize=True), (a, b), backward, "einsum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def entropy(x: Tensor, axis: int) -> Tensor:
    """Shannon entropy of ``softmax(x)`` along ``axis``."""
    ls = log_softmax(x, axis=axis)
    return mul(tsum(mul(exp(ls), ls), axis=axis), -1.0)


# ---------------------------------------------------------------------------
# named operations over [B, C, T]


def _check_3d(x: Tensor, name: str):
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected [batch, channel, time], got shape {x.shape}")


def conv_time(x: Tensor, w: Tensor, groups: int = 1, padding: str = "same", bias: Optional[Tensor] = None) -> Tensor:
    """Grouped 1-D convolution along time (cross-correlation, as in CNN layers).

    ``x`` is ``[B, C, T]``, ``w`` is ``[F, C/groups, K]``. Same padding puts
    ``(K-1)//2`` zeros on the left and the rest on the right.
    """
    _check_3d(x, "conv_time")
    if w.ndim != 3:
        raise ShapeError(f"conv_time: kernel must be [F, C/groups, K], got {w.shape}")
    B, C, T = x.shape
    F, Cg, K = w.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"conv_time: input channels C={C} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv_time: kernel in-channel dim {Cg} != C/groups = {C // groups}")
    if F % groups:
        raise ShapeError(f"conv_time: filters F={F} not divisible by groups={groups}")
    if K < 1:
        raise ShapeError("conv_time: kernel length K must be >= 1")
    if padding == "same":
        left = (K - 1) // 2
        right = K - 1 - left
    elif padding == "valid":
        if T < K:
            raise ShapeError(f"conv_time: time length T={T} shorter than kernel K={K} in valid mode")
        left = right = 0
    else:
        raise ValueError(f"conv_time: padding must be 'same' or 'valid', got {padding!r}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv_time: bias shape {bias.shape} != ({F},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    Tp = xp.shape[2]
    Tout = Tp - K + 1
    win = sliding_window_view(xp, K, axis=2).reshape(B, groups, Cg, Tout, K)
    wg = w.data.reshape(groups, F // groups, Cg, K)
    out = np.einsum("bgctk,gfck->bgft", win, wg, optimize=True).reshape(B, F, Tout)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gg = g.reshape(B, groups, F // groups, Tout)
        gx = gw = gb = None
        if x.requires_grad:
            gwin = np.einsum("bgft,gfck->bgctk", gg, wg, optimize=True).reshape(B, C, Tout, K)
            gxp = np.zeros((B, C, Tp), dtype=x.dtype)
            for k in range(K):
                gxp[:, :, k : k + Tout] += gwin[..., k]
            gx = gxp[:, :, left : left + T]
        if w.requires_grad:
            gw = np.einsum("bgft,bgctk->gfck", gg, win, optimize=True).reshape(F, Cg, K)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return _result(out, parents, backward, "conv_time")


def _std_time(x: Tensor) -> Tensor:
    mu = x.data.mean(axis=2, keepdims=True)
    dev = x.data - mu
    sd = np.sqrt((dev * dev).mean(axis=2))
    T = x.shape[2]

    def backward(g):
        safe = np.where(sd > 0, sd, 1.0)
        coef = np.where(sd > 0, g / (T * safe), 0.0)
        return (coef[..., None] * dev,)

    return _result(sd, (x,), backward, "std")


def _l2_time(x: Tensor) -> Tensor:
    nrm = np.sqrt((x.data * x.data).sum(axis=2))

    def backward(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        coef = np.where(nrm > 0, g / safe, 0.0)
        return (coef[..., None] * x.data,)

    return _result(nrm, (x,), backward, "l2")


def reduce_time(x: Tensor, stat: str) -> Tensor:
    """Per-channel statistic over time, ``[B, C, T] -> [B, C]``.

    ``std`` is the population standard deviation (zero for T=1);
    ``entropy`` is the entropy of the softmax over time.
    """
    _check_3d(x, "reduce_time")
    if stat == "mean":
        return mean(x, axis=2)
    if stat == "max":
        return amax(x, axis=2)
    if stat == "std":
        return _std_time(x)
    if stat == "l2":
        return _l2_time(x)
    if stat == "entropy":
        return entropy(x, axis=2)
    raise ValueError(f"unknown time statistic {stat!r}; valid: {REDUCE_TIME_STATS}")


def reduce_channels(x: Tensor, stat: str) -> Tensor:
    """Per-time-step statistic across channels, ``[B, C, T] -> [B, T]``."""
    _check_3d(x, "reduce_channels")
    if stat == "mean":
        return mean(x, axis=1)
    if stat == "max":
        return amax(x, axis=1)
    if stat == "entropy":
        return entropy(x, axis=1)
    raise ValueError(f"unknown channel statistic {stat!r}; valid: {REDUCE_CHANNEL_STATS}")


def covariance(x: Tensor) -> Tensor:
    """Sample covariance over time (divisor T-1), ``[B, C, T] -> [B, C, C]``."""
    _check_3d(x, "covariance")
    T = x.shape[2]
    if T < 2:
        raise ShapeError(f"covariance needs T >= 2, got T={T}")
    centered = sub(x, mean(x, axis=2, keepdims=True))
    return mul(einsum("bct,bdt->bcd", centered, centered), 1.0 / (T - 1))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    axis: int = 1,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis except ``axis``.

    In training mode the batch statistics are used and the running
    statistics are updated in place (unbiased variance, as in common
    frameworks). In eval mode the running statistics are used.
    """
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        n = x.data.size // x.shape[axis]
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        unbiased = var.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gxhat = g * g_
            gx = inv / n * (
                n * gxhat - gxhat.sum(axis=red, keepdims=True) - xhat * (gxhat * xhat).sum(axis=red, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv

        def backward(g):
            return g * g_ * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

    out = (xhat * g_ + b_).astype(x.dtype)
    return _result(out, (x, gamma, beta), backward, "batchnorm")


def pooled_length(n: int, size: int, stride: int) -> int:
    """Output length of a valid-mode pool; may be <= 0 for too-short inputs."""
    if n < size:
        return 0
    return (n - size) // stride + 1


def avg_pool_time(x: Tensor, size: int, stride: int) -> Tensor:
    _check_3d(x, "avg_pool_time")
    B, C, T = x.shape
    if size > T:
        raise ShapeError(f"avg_pool_time: pool size {size} > time length {T} (valid mode)")
    n = pooled_length(T, size, stride)
    win = sliding_window_view(x.data, size, axis=2)[:, :, ::stride][:, :, :n]
    out = win.mean(axis=3)

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / size
        for j in range(n):
            gx[:, :, j * stride : j * stride + size] += share[:, :, j : j + 1]
        return (gx,)

    return _result(out, (x,), backward, "avg_pool_time")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity outside training mode or for ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[B, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = einsum("bi,oi->bo", x, weight)
    return add(out, bias) if bias is not None else out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor, step: float = 1e-6) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)``.
    ``theta`` is perturbed in place and restored afterwards.
    """
    if theta.dtype != np.float64:
        raise TypeError("grad_check needs float64 data")
    saved_grad = theta.grad
    was = theta.requires_grad
    theta.requires_grad = True
    theta.grad = None
    out = f(theta)
    if out.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite at theta")
    out.backward()
    analytic = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    theta.grad = saved_grad
    theta.requires_grad = was

    numeric = np.zeros_like(theta.data)
    flat = theta.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(theta).data)
        flat[i] = orig - step
        fm = float(f(theta).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: f not finite around coordinate {i}")
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
