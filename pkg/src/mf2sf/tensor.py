"""Minimal dense-tensor reverse-mode autodiff.

A Tensor wraps a numpy array, its gradient buffer, and the closure that
pushes an incoming gradient to its parents. backward() walks the graph in
reverse topological order exactly once. There is no broadcasting except
bias-add; every other op demands explicit shapes and raises ShapeError
naming the op. Training runs in float32; gradient checks build the same
graphs in float64, so ops never hardcode a dtype.

Gradients only flow into subgraphs that contain a requires_grad leaf;
everything else is skipped, which keeps frozen-network forwards cheap.
"""

from __future__ import annotations

import numpy as np

from .kernels import col2im_add, im2col
from .kernels import segment_max as kernel_segment_max


class ShapeError(ValueError):
    """Operands have incompatible shapes for the attempted op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self, seed=None) -> None:
        """Accumulate gradients of self (a scalar unless seed is given) into leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit seed needs a scalar, got shape {self.data.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"backward: seed shape {seed.shape} != value shape {self.data.shape}")
        order = _topo_order(self)
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the actual ops are module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def graph_nodes(root: Tensor) -> int:
    """Number of unique tensors reachable from root (a proxy for op count)."""
    return len(_topo_order(root))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _needs_grad(t: Tensor) -> bool:
    # Gradient flows through a node if it is a grad leaf or was built on one.
    return t.requires_grad or t._parents != ()


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if _needs_grad(p))
    if live:
        out._parents = live
        out._backward = backward
    return out


def _as_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name}: expected Tensor, got {type(x).__name__}")
    return x


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also bias-add when b is (C,) against (..., C)."""
    _as_tensor(a, "add"), _as_tensor(b, "add")
    bias_add = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_add and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _needs_grad(a):
            _accumulate(a, g)
        if _needs_grad(b):
            _accumulate(b, g.sum(axis=tuple(range(g.ndim - 1))) if bias_add else g)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "sub"), _as_tensor(b, "sub")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _needs_grad(a):
            _accumulate(a, g)
        if _needs_grad(b):
            _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "mul"), _as_tensor(b, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _needs_grad(a):
            _accumulate(a, g * b.data)
        if _needs_grad(b):
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    _as_tensor(a, "scalar_mul")
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _node(a.data * np.asarray(c, dtype=a.data.dtype), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "matmul"), _as_tensor(b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if _needs_grad(a):
            _accumulate(a, g @ b.data.T)
        if _needs_grad(b):
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    _as_tensor(a, "relu")
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    # np.maximum rather than np.where(mask, ...): the latter would silently
    # map NaN inputs to 0 because NaN > 0 is False.
    return _node(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    _as_tensor(a, "sigmoid")
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _node(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    _as_tensor(a, "log")

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    _as_tensor(a, "power")
    p = float(p)

    def backward(g):
        _accumulate(a, g * p * np.power(a.data, p - 1.0))

    return _node(np.power(a.data, p), (a,), backward)


def square(a: Tensor) -> Tensor:
    _as_tensor(a, "square")

    def backward(g):
        _accumulate(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is strictly inside."""
    _as_tensor(a, "clip")
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accumulate(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor) -> Tensor:
    _as_tensor(a, "sum")

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), backward)


def mean(a: Tensor) -> Tensor:
    _as_tensor(a, "mean")
    if a.data.size == 0:
        raise ShapeError("mean: empty tensor")
    inv = 1.0 / a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g) * inv))

    return _node(a.data.mean(), (a,), backward)


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient goes to the first argmax on ties."""
    _as_tensor(a, "max_over_axis")
    if a.data.ndim == 0:
        raise ShapeError("max_over_axis: needs at least 1-D input")
    if a.data.shape[axis] == 0:
        raise ShapeError(f"max_over_axis: empty axis {axis} in shape {a.data.shape}")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    # One scan: argmax determines the max, so gather instead of re-reducing.
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(a, buf)

    return _node(out, (a,), backward)


def segment_max(a: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Per-segment max over rows of (N, C); first argmax gets the gradient.

    Empty segments produce an all-zero output row with no gradient flow.
    """
    _as_tensor(a, "segment_max")
    if a.data.ndim != 2:
        raise ShapeError(f"segment_max: needs (N, C) input, got {a.data.shape}")
    out, arg = kernel_segment_max(a.data, segment_ids, n_segments)

    def backward(g):
        buf = np.zeros_like(a.data)
        valid = arg >= 0
        # Each (segment, channel) cell has a distinct source row, and a row
        # serves one segment only, so flat assignment cannot collide.
        cols = np.nonzero(valid)[1]
        buf[arg[valid], cols] = g[valid]
        _accumulate(a, buf)

    return _node(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t, "concat") for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(f"concat: shapes {[t.data.shape for t in tensors]} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs_grad(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(a: Tensor, shape) -> Tensor:
    _as_tensor(a, "reshape")
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.data.shape} -> {shape}") from None

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """SAME-padded conv: x (N, H, W, Cin) with w (k, k, Cin, Cout)."""
    _as_tensor(x, "conv2d"), _as_tensor(w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: shapes {x.data.shape} vs {w.data.shape}")
    k = w.data.shape[0]
    if w.data.shape[1] != k or w.data.shape[2] != x.data.shape[3]:
        raise ShapeError(f"conv2d: shapes {x.data.shape} vs {w.data.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, h, wd, cin = x.data.shape
    cout = w.data.shape[3]
    cols, (oh, ow) = im2col(x.data, k, stride)
    flat = cols.reshape(n * oh * ow, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (flat @ wmat).reshape(n, oh, ow, cout)

    def backward(g):
        gflat = g.reshape(n * oh * ow, cout)
        if _needs_grad(w):
            _accumulate(w, (flat.T @ gflat).reshape(w.data.shape))
        if _needs_grad(x):
            gcols = (gflat @ wmat.T).reshape(n, oh, ow, k, k, cin)
            _accumulate(x, col2im_add(gcols, k, stride, h, wd))

    return _node(out, (x, w), backward)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (N, H, W, C)."""
    _as_tensor(a, "upsample2x")
    if a.data.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-D, got {a.data.shape}")
    n, h, w, c = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _node(np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2), (a,), backward)


def scatter_to_grid(pillars: Tensor, indices: np.ndarray, hw) -> Tensor:
    """Place per-pillar vectors (P, C) at flat pixel indices into (H, W, C)."""
    _as_tensor(pillars, "scatter_to_grid")
    h, w = hw
    if pillars.data.ndim != 2:
        raise ShapeError(f"scatter_to_grid: pillars must be (P, C), got {pillars.data.shape}")
    indices = np.asarray(indices)
    if indices.shape != (pillars.data.shape[0],):
        raise ShapeError(f"scatter_to_grid: indices {indices.shape} vs pillars {pillars.data.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise ShapeError(f"scatter_to_grid: index out of range for {h}x{w} grid")
    c = pillars.data.shape[1]
    grid = np.zeros((h * w, c), dtype=pillars.data.dtype)
    np.add.at(grid, indices, pillars.data)

    def backward(g):
        _accumulate(pillars, g.reshape(h * w, c)[indices])

    return _node(grid.reshape(h, w, c), (pillars,), backward)
