"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a Tensor. Ops record a backward
closure on their output; calling backward() on a scalar loss walks the graph
in reverse topological order and accumulates gradients (sum semantics) into
every requires_grad tensor that the loss depends on.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, NumericError, ShapeError


class Tensor:
    """A numpy array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, _prev=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = _prev

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar; the module-level functions hold the actual rules
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g, owned=False):
    """Add g into t.grad. owned=True promises g is a fresh array that no
    one else holds, so it may be adopted without a defensive copy."""
    if t.grad is None:
        if not owned or g.shape != t.data.shape:
            g = np.broadcast_to(g, t.data.shape).astype(np.float64)
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss):
    """Accumulate dloss/dt into every requires_grad tensor reachable from loss.

    Repeated calls keep accumulating; clear gradients between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            _accumulate(a, ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            _accumulate(b, gb, owned=gb is not g)

    out._backward = _bw
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            _accumulate(a, ga, owned=ga is not g)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape), owned=True)

    out._backward = _bw
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape), owned=True)

    out._backward = _bw
    return out


def power(a, p):
    """Elementwise a**p for a constant scalar exponent."""
    a = _as_tensor(a)
    out = Tensor(a.data**p, a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * p * a.data ** (p - 1), owned=True)

    out._backward = _bw
    return out


def exp(a):
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * out.data, owned=True)

    out._backward = _bw
    return out


def log(a):
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g / a.data, owned=True)

    out._backward = _bw
    return out


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0), owned=True)

    out._backward = _bw
    return out


def arccos(a):
    a = _as_tensor(a)
    out = Tensor(np.arccos(a.data), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, -g / np.sqrt(1.0 - a.data**2), owned=True)

    out._backward = _bw
    return out


def cos(a):
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, -g * np.sin(a.data), owned=True)

    out._backward = _bw
    return out


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where nothing clipped."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad, (a,))
    inside = (a.data > lo) & (a.data < hi)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * inside, owned=True)

    out._backward = _bw
    return out


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, (a,))

    def _bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy(), owned=True)
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy(), owned=True)

    out._backward = _bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    out._backward = _bw
    return out


def transpose(a, axes):
    a = _as_tensor(a)
    out = Tensor(a.data.transpose(axes), a.requires_grad, (a,))
    inverse = np.argsort(axes)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    out._backward = _bw
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
        tuple(tensors),
    )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    out._backward = _bw
    return out


def take_rows(a, idx):
    """out[i] = a[i, idx[i]] for a rank-2 tensor and an integer index vector."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx], a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), g)
            _accumulate(a, ga, owned=True)

    out._backward = _bw
    return out


def table_rows(table, idx):
    """Gather table[..., idx] along the last axis; idx may be any int array.

    Used for relative-position bias lookup: table (H, M), idx (n, n) gives
    (H, n, n). Backward scatter-adds into the table.
    """
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(table.data[..., idx], table.requires_grad, (table,))

    def _bw(g):
        if not table.requires_grad:
            return
        m = table.shape[-1]
        flat_idx = idx.ravel()
        if table.data.ndim == 1:
            gt = np.bincount(flat_idx, weights=g.ravel(), minlength=m)
        else:
            per_row = g.reshape(-1, flat_idx.size)
            gt = np.stack(
                [np.bincount(flat_idx, weights=row, minlength=m) for row in per_row]
            ).reshape(table.shape)
        _accumulate(table, gt, owned=True)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# matmul / softmax / conv


def matmul(a, b):
    """Matrix product with numpy batching semantics (rank 2 or batched)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape), owned=True)

    out._backward = _bw
    return out


def _softmax_last(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    """Softmax over the last axis, computed with max-subtraction."""
    a = _as_tensor(a)
    y = _softmax_last(a.data)
    out = Tensor(y, a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, y * (g - dot), owned=True)

    out._backward = _bw
    return out


def softmax_rows(a):
    """Row-wise softmax of a rank-2 tensor; rows sum to 1."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows got NaN input")
    return softmax(a)


def log_softmax(a):
    """log(softmax) over the last axis via the max-shifted log-sum-exp."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y, a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True), owned=True)

    out._backward = _bw
    return out


def _im2col(x_padded, k, stride):
    # (N, C, Hp, Wp) -> (N, C, k, k, oh, ow)
    windows = sliding_window_view(x_padded, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return windows.transpose(0, 1, 4, 5, 2, 3)


def _col2im(cols, x_shape, k, stride, pad):
    # cols: (N, C, k, k, oh, ow) scattered back onto the padded image
    n, c, h, w = x_shape
    oh, ow = cols.shape[4], cols.shape[5]
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad == 0:
        return xp
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of an NCHW input with an OIKK kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW x OIKK, got {x.shape} x {kernel.shape}")
    o, i, k1, k2 = kernel.shape
    if k1 != k2:
        raise ConfigError(f"conv2d kernel must be square, got {k1}x{k2}")
    if x.shape[1] != i:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    n, c, h, w = x.shape
    k = k1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride)  # (N, C, k, k, oh, ow)
    cols2 = np.ascontiguousarray(cols).reshape(n, c * k * k, oh * ow)
    w_flat = kernel.data.reshape(o, c * k * k)
    y = np.matmul(w_flat, cols2).reshape(n, o, oh, ow)
    out = Tensor(y, x.requires_grad or kernel.requires_grad, (x, kernel))

    def _bw(g):
        g2 = g.reshape(n, o, oh * ow)
        if kernel.requires_grad:
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, gw.reshape(o, c, k, k), owned=True)
        if x.requires_grad:
            gcols = np.matmul(w_flat.T, g2).reshape(n, c, k, k, oh, ow)
            _accumulate(x, _col2im(gcols, x.shape, k, stride, padding), owned=True)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# parameters and the optimizer step


class Param:
    """A trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("value", "momentum_buffer")

    def __init__(self, data):
        self.value = Tensor(data, requires_grad=True)
        self.momentum_buffer = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class OptimizerConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: list = field(default_factory=list)  # (epoch, multiplier) pairs

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        epochs = [e for e, _ in self.schedule]
        if sorted(epochs) != epochs or len(set(epochs)) != len(epochs):
            raise ConfigError(f"schedule epochs must be strictly increasing, got {epochs}")

    def lr_at(self, epoch):
        lr = self.learning_rate
        for boundary, mult in self.schedule:
            if epoch >= boundary:
                lr *= mult
        return lr


def zero_grad(params):
    for p in params:
        p.value.grad = None


def sgd_step(params, cfg, epoch):
    """v <- momentum*v + grad + wd*value; value <- value - lr(epoch)*v.

    Clears the gradients it consumed.
    """
    lr = cfg.lr_at(epoch)
    for p in params:
        if p.value.grad is None:
            raise ContractError("sgd_step called with an unpopulated gradient")
        v = p.momentum_buffer
        v *= cfg.momentum
        v += p.value.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.value.data
        p.value.data -= lr * v
        p.value.grad = None


def xavier_uniform(rng, fan_in, fan_out, shape):
    """uniform(+-sqrt(6/(fan_in+fan_out))) init used for all projections."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
