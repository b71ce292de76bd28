"""Dense float64 tensors with reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its parents and a backward rule. ``backward`` collects the nodes
reachable from a scalar loss into a :class:`Tape`, ordered by recording
sequence, and replays it in reverse.
"""

from __future__ import annotations

import itertools
import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, StateError, UsageError, ValidationError

DTYPE = np.float64
LOG_CLAMP = 1e-12

_sequence = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording on the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_sequence)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._seq = next(_sequence)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- tape -------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in recording order."""

    nodes: list[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def replay(self, loss: Tensor, seed: np.ndarray | None = None) -> list[Tensor]:
        """Propagate from ``loss``; returns the leaves that received a gradient."""
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if seed is None else seed}
        reached: list[Tensor] = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                reached.append(node)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return reached


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Returns the leaves reached, in reverse recording order.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    return Tape.from_loss(loss).replay(loss)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _record(np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped below at ``LOG_CLAMP``."""
    clamped = np.maximum(a.data, LOG_CLAMP)
    live = a.data > LOG_CLAMP
    return _record(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    x = a.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return _record(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, concat, scale."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "concat": concat, "scale": scale}
    if kind not in table:
        raise ParameterError(f"unknown elementwise kind {kind!r}")
    if kind == "concat":
        return concat(list(operands), **kwargs)
    return table[kind](*operands, **kwargs)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} out of range for {ndim}-d operands")
    axis = axis % ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), back)


def scatter_rows(a: Tensor, rows: np.ndarray, total: int) -> Tensor:
    """Place the rows of ``a`` at positions ``rows`` of a zero tensor with ``total`` rows."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((total,) + a.shape[1:], dtype=DTYPE)
    out[rows] = a.data
    return _record(out, (a,), lambda g: (g[rows],))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m x k and a k x n tensor (a may carry leading batch axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if ad.ndim > 1 else np.outer(ad, g)
        return ga, gb

    return _record(ad @ bd, (a, b), back)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3, stride 1, zero-padding 1 cross-correlation.

    ``x`` is C_in x H x W or N x C_in x H x W; ``kernel`` is C_out x C_in x 3 x 3.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects (N,)C,H,W input and a 3x3 kernel, got {x.shape}, {kernel.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kernel.shape[1]}")
    cols = _im2col(xd)
    kmat = kernel.data.reshape(c_out, c * 9)
    out = (cols @ kmat.T).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def back(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        gcols = (gmat @ kmat).reshape(n, h, w, c, 3, 3)
        gpad = np.zeros((n, c, h + 2, w + 2), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, 1:-1, 1:-1]
        return (gx if batched else gx[0]), gk

    return _record(out, (x, kernel), back)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {(h, w)}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _record(out, (x,), back)


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the trailing two (spatial) axes."""
    if x.ndim < 3:
        raise DimensionError(f"spatial_mean expects (N,)C,H,W, got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    return _record(out, (x,), lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),))


# -- probability ops --------------------------------------------------------


def softmax_t(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``logits / temperature`` along ``axis`` (max-subtracted)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = logits.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _record(out, (logits,), back)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _record(out, (logits,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def _check_simplex(p: np.ndarray, label: str) -> None:
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6, rtol=0.0):
        raise ValidationError(f"{label} is not a probability vector")


def kl_divergence(p, q: Tensor) -> Tensor:
    """KL(p || q) summed over the last axis (and over any leading axes).

    ``p`` acts as a constant teacher; the gradient reaches ``q`` only.
    """
    pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
    q = as_tensor(q)
    if pd.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {pd.shape} vs {q.shape}")
    _check_simplex(pd, "p")
    _check_simplex(q.data, "q")
    qc = np.maximum(q.data, LOG_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0)
    value = float(plogp.sum() - (pd * np.log(qc)).sum())
    live = q.data > LOG_CLAMP
    return _record(np.array(value), (q,), lambda g: (np.where(live, -g * pd / qc, 0.0),))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Unit-normalize along the last axis.

    Rows whose norm is below ``eps`` map to zero vectors with zero gradient;
    the returned boolean array flags them.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    out = np.where(degenerate, 0.0, x.data / safe)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(degenerate, 0.0, (g - out * inner) / safe),)

    return _record(out, (x,), back), degenerate[..., 0]


# -- normalization ----------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply optional scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def back(g):
        m = xhat.shape[-1]
        gx = inv / m * (m * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx,)

    out = _record(xhat, (x,), back)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.initialized = False

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean[...] = mean
            self.running_var[...] = var
            self.initialized = True
            return
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mean
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * var


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    state: BatchNormState,
    training: bool = True,
    update_stats: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes (channel axis 1).

    In training mode the batch statistics are used and, if ``update_stats``,
    folded into ``state`` with its momentum. Eval mode reads ``state``.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm expects N,C[,H,W], got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            count = x.size // x.shape[1]
            state.update(mu, var * count / max(count - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        m = x.size // x.shape[1]
        invb = inv.reshape(bshape)

        def back(g):
            gsum = g.sum(axis=axes, keepdims=True)
            gxhat = (g * xhat).sum(axis=axes, keepdims=True)
            return (invb / m * (m * g - gsum - xhat * gxhat),)

        out = _record(xhat, (x,), back)
    else:
        if not state.initialized:
            raise StateError("batch_norm in eval mode before any running statistics were recorded")
        invb = (1.0 / np.sqrt(state.running_var + eps)).reshape(bshape)
        xhat = (x.data - state.running_mean.reshape(bshape)) * invb
        out = _record(xhat, (x,), lambda g: (g * invb,))
    if gamma is not None:
        out = mul(out, reshape(gamma, bshape))
    if beta is not None:
        out = add(out, reshape(beta, bshape))
    return out


def normalize(x: Tensor, kind: str, **kwargs) -> Tensor:
    if kind == "layer_norm":
        return layer_norm(x, **kwargs)
    if kind == "batch_norm":
        return batch_norm(x, **kwargs)
    raise ParameterError(f"unknown normalization {kind!r}")


# -- verification -------------------------------------------------------------


def finite_difference_oracle(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` may be a Tensor (perturbed in place and restored) or an array.
    """
    target = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)

    def value():
        with no_grad():
            out = f(x if isinstance(x, Tensor) else target)
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = value()
        flat[i] = saved - h
        down = value()
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the whole gradient."""
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


# -- serialization ------------------------------------------------------------


def tensor_to_bytes(array: np.ndarray, name: str) -> bytes:
    """JSON header {shape, name} (length-prefixed, uint32 LE) then LE float64 data."""
    array = np.asarray(array, dtype="<f8", order="C")
    header = json.dumps({"shape": list(array.shape), "name": name}, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header)) + header + array.tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> tuple[np.ndarray, str]:
    (length,) = struct.unpack_from("<I", blob, 0)
    header = json.loads(blob[4:4 + length].decode("utf-8"))
    shape = tuple(header["shape"])
    data = np.frombuffer(blob, dtype="<f8", offset=4 + length).astype(DTYPE)
    if data.size != int(np.prod(shape)):
        raise ValidationError(f"tensor blob {header['name']!r} holds {data.size} values for shape {shape}")
    return data.reshape(shape), header["name"]


def write_tensor(path, array: np.ndarray, name: str) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array, name))


def read_tensor(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
