"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is built eagerly: every operation returns a new ``Value`` holding
its result and a closure that maps the output gradient to parent gradients.
Backward closures are themselves written in terms of ``Value`` operations,
so gradients are ordinary graph nodes and can be differentiated again.
This is what makes the gradient-penalty term (a norm of an input gradient,
differentiated with respect to parameters) work without special casing.
"""

from __future__ import annotations

import numpy as np

from .errors import CapabilityError, ContractError

__all__ = [
    "Value",
    "constant",
    "parameter",
    "add",
    "mul",
    "matmul",
    "concat",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "silu",
    "power",
    "sqrt",
    "clip",
    "vsum",
    "mean",
    "squared_norm",
    "softmax",
    "log_softmax",
    "conv1d",
    "conv1d_out_len",
    "batchnorm_time",
    "linear",
    "one_hot",
    "grad",
    "input_gradient_graph",
]


class Value:
    """A node in the computation graph: an ndarray plus backward bookkeeping.

    ``vjp`` takes the output gradient (a Value of the same shape as ``data``)
    and returns one gradient Value (or None) per parent. Leaves have no vjp.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "op")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, op="leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Value":
        return Value(self.data, op="detach")

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.shape})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), _scalar(-1.0, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), mul(self, _scalar(-1.0, self)))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        other = _lift(other, self)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other, self), power(self, -1.0))

    def __neg__(self):
        return mul(self, _scalar(-1.0, self))

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def constant(data, dtype=None) -> Value:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind not in "fc":
        arr = arr.astype(np.float64)
    return Value(arr, op="const")


def parameter(data, dtype=None) -> Value:
    arr = np.array(data, dtype=dtype, copy=True)
    return Value(arr, requires_grad=True, op="param")


def _lift(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=like.data.dtype), op="const")


def _scalar(x, like: Value) -> Value:
    return Value(np.asarray(x, dtype=like.data.dtype), op="const")


def _zeros_like(v: Value) -> Value:
    return Value(np.zeros(v.shape, dtype=v.data.dtype), op="const")


# --- shape plumbing -------------------------------------------------------


def _unbroadcast(g: Value, shape: tuple) -> Value:
    """Reduce a broadcast gradient back down to ``shape``."""
    extra = len(g.shape) - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    return g


def reshape(x: Value, shape) -> Value:
    old = x.shape

    def vjp(g):
        return (reshape(g, old),)

    return Value(x.data.reshape(shape), (x,), vjp, op="reshape")


def transpose(x: Value, axes=None) -> Value:
    if axes is None:
        axes = tuple(reversed(range(len(x.shape))))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return Value(np.transpose(x.data, axes), (x,), vjp, op="transpose")


def broadcast_to(x: Value, shape) -> Value:
    old = x.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return Value(np.broadcast_to(x.data, shape).copy(), (x,), vjp, op="broadcast")


def take(x: Value, key) -> Value:
    """Numpy basic/advanced indexing; gradient scatter-adds into the source."""
    src_shape = x.shape
    src_dtype = x.data.dtype

    def vjp(g):
        return (scatter(g, key, src_shape, src_dtype),)

    return Value(x.data[key], (x,), vjp, op="take")


def scatter(g: Value, key, shape, dtype) -> Value:
    """Adjoint of ``take``: place ``g`` at ``key`` inside a zero array."""

    def vjp(gg):
        return (take(gg, key),)

    out = np.zeros(shape, dtype=dtype)
    np.add.at(out, key, g.data)
    return Value(out, (g,), vjp, op="scatter")


def concat(values, axis=0) -> Value:
    values = list(values)
    sizes = [v.shape[axis] for v in values]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        outs = []
        for i in range(len(values)):
            sl = [slice(None)] * len(g.shape)
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(take(g, tuple(sl)))
        return tuple(outs)

    return Value(np.concatenate([v.data for v in values], axis=axis), tuple(values), vjp, op="concat")


# --- arithmetic -----------------------------------------------------------


def add(a: Value, b: Value) -> Value:
    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return Value(a.data + b.data, (a, b), vjp, op="add")


def mul(a: Value, b: Value) -> Value:
    def vjp(g):
        return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))

    return Value(a.data * b.data, (a, b), vjp, op="mul")


def power(x: Value, p: float) -> Value:
    def vjp(g):
        return (mul(g, mul(_scalar(p, x), power(x, p - 1.0))),)

    return Value(x.data**p, (x,), vjp, op="power")


def sqrt(x: Value) -> Value:
    return power(x, 0.5)


def matmul(a: Value, b: Value) -> Value:
    """Matrix product; supports 2-D @ 2-D and N-D @ 2-D (leading batch axes)."""
    if len(b.shape) != 2:
        raise ContractError(f"matmul rhs must be 2-D, got {b.shape}")
    if len(a.shape) < 2:
        raise ContractError(f"matmul lhs must be at least 2-D, got {a.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b))
        if len(a.shape) == 2:
            gb = matmul(transpose(a), g)
        else:
            k = a.shape[-1]
            n = b.shape[1]
            a2 = reshape(a, (-1, k))
            g2 = reshape(g, (-1, n))
            gb = matmul(transpose(a2), g2)
        return (ga, gb)

    return Value(a.data @ b.data, (a, b), vjp, op="matmul")


# --- elementwise nonlinearities ------------------------------------------


def exp(x: Value) -> Value:
    out_data = np.exp(x.data)

    def vjp(g):
        return (mul(g, out),)

    out = Value(out_data, (x,), vjp, op="exp")
    return out


def log(x: Value) -> Value:
    def vjp(g):
        return (mul(g, power(x, -1.0)),)

    return Value(np.log(x.data), (x,), vjp, op="log")


def sigmoid(x: Value) -> Value:
    # stable in both tails: exp of a nonpositive argument only
    xd = x.data
    pos = xd >= 0
    e = np.exp(np.where(pos, -xd, xd))
    out_data = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        one = _scalar(1.0, x)
        return (mul(g, mul(out, one - out)),)

    out = Value(out_data, (x,), vjp, op="sigmoid")
    return out


def relu(x: Value) -> Value:
    mask = (x.data > 0).astype(x.data.dtype)

    def vjp(g):
        return (mul(g, Value(mask, op="const")),)

    return Value(x.data * mask, (x,), vjp, op="relu")


def silu(x: Value, beta: float = 1.702) -> Value:
    """Smooth GELU-like activation x * sigmoid(beta * x)."""
    return mul(x, sigmoid(mul(x, _scalar(beta, x))))


def clip(x: Value, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient passes through inside the interval."""
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)

    def vjp(g):
        return (mul(g, Value(mask, op="const")),)

    return Value(np.clip(x.data, lo, hi), (x,), vjp, op="clip")


# --- reductions -----------------------------------------------------------


def vsum(x: Value, axis=None, keepdims=False) -> Value:
    in_shape = x.shape
    if axis is None:
        axes = tuple(range(len(in_shape)))
    elif isinstance(axis, int):
        axes = (axis % len(in_shape),)
    else:
        axes = tuple(a % len(in_shape) for a in axis)

    def vjp(g):
        if not keepdims:
            kshape = list(in_shape)
            for a in axes:
                kshape[a] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, in_shape),)

    return Value(np.sum(x.data, axis=axis if axis is None else axes, keepdims=keepdims), (x,), vjp, op="sum")


def mean(x: Value, axis=None, keepdims=False) -> Value:
    total = vsum(x, axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.shape[a % len(x.shape)] for a in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(total, _scalar(1.0 / float(n), x))


def squared_norm(x: Value) -> Value:
    return vsum(mul(x, x))


# --- composite neural ops -------------------------------------------------


def softmax(x: Value, axis: int = -1) -> Value:
    shift = Value(np.max(x.data, axis=axis, keepdims=True), op="const")
    e = exp(x - shift)
    return e / vsum(e, axis=axis, keepdims=True)


def log_softmax(x: Value, axis: int = -1) -> Value:
    shift = Value(np.max(x.data, axis=axis, keepdims=True), op="const")
    z = x - shift
    return z - log(vsum(exp(z), axis=axis, keepdims=True))


def conv1d_out_len(t: int, kernel: int, stride: int, pad: int) -> int:
    return (t + pad - kernel) // stride + 1


def conv1d(x: Value, w: Value, b: Value | None = None, stride: int = 1,
           pad: tuple[int, int] = (0, 0)) -> Value:
    """1-D convolution over time.

    x: (T, C_in); w: (K, C_in, C_out); b: (C_out,) or None.
    Output length = floor((T + pad_left + pad_right - K) / stride) + 1.
    """
    t, cin = x.shape
    k, wcin, cout = w.shape
    if cin != wcin:
        raise ContractError(f"conv1d channel mismatch: input {x.shape} vs weight {w.shape}")
    left, right = pad
    t_out = conv1d_out_len(t, k, stride, left + right)
    if t_out < 1:
        raise ContractError(f"conv1d input too short: T={t}, kernel={k}, pad={pad}")
    if left or right:
        dt = x.data.dtype
        parts = []
        if left:
            parts.append(Value(np.zeros((left, cin), dtype=dt), op="const"))
        parts.append(x)
        if right:
            parts.append(Value(np.zeros((right, cin), dtype=dt), op="const"))
        x = concat(parts, axis=0)
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    windows = take(x, idx)  # (T_out, K, C_in)
    flat = reshape(windows, (t_out, k * cin))
    out = matmul(flat, reshape(w, (k * cin, cout)))
    if b is not None:
        out = out + b
    return out


def batchnorm_time(x: Value, scale: Value, bias: Value, eps: float = 1e-5) -> Value:
    """Normalize each channel over the time axis of one sequence, then affine."""
    if len(x.shape) != 2:
        raise ContractError(f"batchnorm_time expects (T, C), got {x.shape}")
    mu = mean(x, axis=0, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=0, keepdims=True)
    inv = power(var + _scalar(eps, x), -0.5)
    return mul(centered, inv) * scale + bias


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def one_hot(indices, num_classes: int, dtype=np.float64) -> Value:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ContractError(f"one_hot index out of range for {num_classes} classes")
    out = np.zeros((idx.shape[0], num_classes), dtype=dtype)
    out[np.arange(idx.shape[0]), idx] = 1.0
    return Value(out, op="const")


# --- backward pass --------------------------------------------------------


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Value, wrt: list[Value], create_graph: bool = False):
    """Gradients of a scalar ``output`` w.r.t. each Value in ``wrt``.

    Returns ndarrays, or graph Values when ``create_graph`` is set (so the
    gradients can be differentiated again). Values the output does not
    depend on get zero gradients.
    """
    if output.data.shape != ():
        raise ContractError(f"grad root must be scalar, got shape {output.data.shape}")
    wrt_ids = {id(w) for w in wrt}
    grads: dict[int, Value] = {id(output): Value(np.ones((), dtype=output.data.dtype), op="const")}
    if output.requires_grad:
        for node in reversed(_toposort(output)):
            g = grads[id(node)] if id(node) in wrt_ids else grads.pop(id(node))
            if node.vjp is None:
                continue
            if create_graph and getattr(node.vjp, "first_order_only", False):
                raise CapabilityError(
                    f"primitive '{node.op}' has no second-order rule; "
                    "cannot build a differentiable input gradient through it"
                )
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = add(grads[id(p)], pg)
                else:
                    grads[id(p)] = pg
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = _zeros_like(w)
        if create_graph:
            out.append(g)
        else:
            out.append(np.array(g.data, copy=True))
    return out


def input_gradient_graph(output: Value, wrt_input: Value) -> Value:
    """Gradient of a scalar w.r.t. one input, as a differentiable graph node."""
    return grad(output, [wrt_input], create_graph=True)[0]
