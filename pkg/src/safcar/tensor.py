"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Graph` (entered with ``with
Graph() as g:``) whenever one of their inputs requires a gradient. Outside a
graph context nothing is recorded, which is how evaluation runs.

Batched variants of every operation are supported through leading axes; the
shapes in the docstrings describe a single instance.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.array_utils import normalize_axis_tuple
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError, NonFiniteError

_ids = itertools.count()
_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _local.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        if 0 in self.data.shape:
            raise DimensionError(f"tensor extents must be >= 1, got {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.id = next(_ids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# Graph / tape


class Node:
    __slots__ = ("index", "kind", "inputs", "output_id", "backward")

    def __init__(self, index, kind, inputs, output_id, backward):
        self.index = index
        self.kind = kind
        self.inputs = inputs
        self.output_id = output_id
        self.backward = backward

    @property
    def input_ids(self):
        return tuple(t.id for t in self.inputs)

    def __repr__(self):
        return f"Node({self.index}, {self.kind}, in={self.input_ids}, out={self.output_id})"


class Graph:
    """Ordered record of differentiable operations (one per forward pass).

    ``check_finite`` makes every recorded operation verify its output and raise
    :class:`NonFiniteError` naming the node that produced a NaN/Inf.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._previous = None

    def __enter__(self):
        self._previous = getattr(_local, "graph", None)
        _local.graph = self
        return self

    def __exit__(self, *exc):
        _local.graph = self._previous
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, output: Tensor, backward) -> Node:
        node = Node(len(self.nodes), kind, tuple(inputs), output.id, backward)
        self.nodes.append(node)
        return node


def active_graph() -> Graph | None:
    return getattr(_local, "graph", None)


@contextlib.contextmanager
def no_grad():
    previous = getattr(_local, "graph", None)
    _local.graph = None
    try:
        yield
    finally:
        _local.graph = previous


def custom_op(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    out = Tensor._wrap(data)
    graph = active_graph()
    if graph is None:
        return out
    if graph.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {kind} at node {len(graph.nodes)}", len(graph.nodes))
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(kind, inputs, out, backward)
    return out


def backward(graph: Graph, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf reached.

    Returns a mapping tensor -> gradient. Parameters listed in ``params`` that the
    loss does not depend on receive an explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    tensors = {loss.id: loss}
    for node in reversed(graph.nodes):
        g = grads.pop(node.output_id, None)
        tensors.pop(node.output_id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
                tensors[t.id] = t
    result = {}
    for tid, g in grads.items():
        t = tensors[tid]
        if not t.requires_grad:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = t.grad
    for p in params or ():
        if p not in result:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result


# --------------------------------------------------------------------------
# Elementwise


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op("add", (a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op("sub", (a, b), a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op("mul", (a, b), a.data * b.data, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return custom_op("relu", (x,), x.data * mask, bwd)


# --------------------------------------------------------------------------
# Shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {src} to {shape}") from e

    def bwd(g):
        return (g.reshape(src),)

    return custom_op("reshape", (x,), data, bwd)


def flatten(x: Tensor, start_axis: int = 0) -> Tensor:
    start_axis = start_axis % max(x.ndim, 1)
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return custom_op("transpose", (x,), x.data.transpose(axes), bwd)


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return custom_op("sum", (x,), x.data.sum(axis=axis, keepdims=keepdims), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean pooling over ``axis`` (int, tuple or None for all axes)."""
    src = x.shape
    axes = tuple(range(x.ndim)) if axis is None else normalize_axis_tuple(axis, x.ndim)
    count = int(np.prod([src[a] for a in axes]))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src),)

    return custom_op("mean", (x,), x.data.mean(axis=axes, keepdims=keepdims), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from e

    def bwd(g):
        index = [slice(None)] * ndim
        out = []
        for i in range(len(tensors)):
            index[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(index)])
        return tuple(out)

    return custom_op("concat", tensors, data, bwd)


# --------------------------------------------------------------------------
# Linear algebra, softmax, normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``[..., m, k] @ [..., k, n]`` with batch broadcasting."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return custom_op("matmul", (a, b), data, bwd)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    y = _softmax(x.data)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax", (x,), y, bwd)


def softmax_rows(m: Tensor) -> Tensor:
    return softmax(m)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gamma * x + beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return custom_op("layer_norm", (x, gamma, beta), data, bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits [B, K]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [B, K] logits and [B] labels, got {logits.shape}, {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DimensionError(f"label out of range for {logits.shape[1]} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.mean(logsum - z[rows, labels])

    def bwd(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)

    return custom_op("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), bwd)


# --------------------------------------------------------------------------
# Convolutions


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Temporal cross-correlation ``[C_in, T] -> [C_out, T']`` with zero padding."""
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise DimensionError(f"conv1d kernel length must be odd, got {k}")
    if x.shape[-2] != c_in:
        raise DimensionError(f"conv1d input {x.shape} does not match kernels {kernels.shape}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    n, _, t = xd.shape
    t_out = (t + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise DimensionError(f"conv1d output length {t_out} < 1 for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    s0, s1, s2 = xp.strides
    windows = as_strided(xp, (n, t_out, c_in, k), (s0, s2 * stride, s1, s2))
    cols = windows.reshape(n * t_out, c_in * k)
    wmat = kernels.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).reshape(n, t_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        gb = g.reshape(-1, c_out, t_out).sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gm = g.reshape(n, c_out, t_out).transpose(0, 2, 1).reshape(n * t_out, c_out)
        gw = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, t_out, c_in, k)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for j in range(k):
                gxp[:, :, j : j + stride * t_out : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + t]
            if not batched:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return custom_op("conv1d", inputs, out, bwd)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Spatial cross-correlation over channels-last images.

    ``x`` is ``[N, H, W, C_in]``, ``kernels`` is ``[kh, kw, C_in, C_out]``.
    """
    kh, kw, c_in, c_out = kernels.shape
    if x.ndim != 4 or x.shape[-1] != c_in:
        raise DimensionError(f"conv2d input {x.shape} does not match kernels {kernels.shape}")
    n, h, w, _ = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output {ho}x{wo} is empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(xp, (n, ho, wo, kh, kw, c_in), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    cols = windows.reshape(n * ho * wo, kh * kw * c_in)
    wmat = kernels.data.reshape(kh * kw * c_in, c_out)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out)
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        gm = g.reshape(-1, c_out)
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gw = (cols.T @ gm).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, kh, kw, c_in)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return custom_op("conv2d", inputs, out, bwd)


# --------------------------------------------------------------------------
# Gradient checking


def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-5, coords: int | None = None, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``inputs`` are arrays or float64 tensors; ``f(*tensors)`` must return a
    scalar. Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. With
    ``coords`` set, at most that many seeded coordinates per input are probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check eps must be in [1e-7, 1e-3], got {eps}")
    with precision(np.float64):
        tensors = []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.dtype != np.float64:
                    raise ContractError(f"grad_check needs float64 tensors, got {x.dtype} for {x.name or x.id}")
                x.requires_grad = True
                x.grad = None
                tensors.append(x)
            else:
                tensors.append(Tensor(x, requires_grad=True))
        with Graph(check_finite=True) as g:
            y = f(*tensors)
        if y.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
        analytic = backward(g, y, tensors)
        rng = np.random.default_rng(seed)
        worst = 0.0
        with no_grad():
            for t in tensors:
                a = np.asarray(analytic[t]).reshape(-1)
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if coords is not None and flat.size > coords:
                    idx = rng.choice(flat.size, size=coords, replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    plus = float(f(*tensors).data)
                    flat[i] = orig - eps
                    minus = float(f(*tensors).data)
                    flat[i] = orig
                    if not (np.isfinite(plus) and np.isfinite(minus)):
                        raise NonFiniteError(f"non-finite output while perturbing coordinate {i}")
                    num = (plus - minus) / (2 * eps)
                    err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
                    worst = max(worst, err)
        return worst
