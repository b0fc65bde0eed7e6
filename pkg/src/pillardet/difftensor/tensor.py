"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: every operation the detector needs is a hand-written
primitive with an explicit backward rule, evaluated eagerly on numpy.
Gradients of broadcast operands are summed back down to the operand shape.
Graphs are built only while gradient recording is enabled (see `no_grad`),
so inference runs allocation-free of tape state.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 ndarray plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff machinery --------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _wire(out: Tensor, parents: tuple, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def has_nonfinite(t: Tensor) -> bool:
    return not np.all(np.isfinite(t.data))


# -- arithmetic primitives ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _wire(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    return _wire(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _wire(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _wire(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward():
        if a.requires_grad:
            a._accumulate(-out.grad)

    return _wire(out, (a,), backward)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = Tensor(a.data**p)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * p * a.data ** (p - 1.0))

    return _wire(out, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * np.sign(a.data))

    return _wire(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out.data)

    return _wire(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _wire(out, (a,), backward)


def sqrt(a) -> Tensor:
    """Square root with subgradient 0 at exactly zero input."""
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            nz = a.data > 0.0
            g[nz] = out.grad[nz] * 0.5 / out.data[nz]
            a._accumulate(g)

    return _wire(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))

    return _wire(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x >= 0
    val = np.empty_like(x)
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = Tensor(val)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * out.data * (1.0 - out.data))

    return _wire(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def backward():
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(out.grad * inside)

    return _wire(out, (a,), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; `cond` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * cond, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * ~cond, b.shape))

    return _wire(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    return _wire(out, (a, b), backward)


# -- reductions and shape ops ------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % a.ndim for ax in axes):
                    g = np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _wire(out, (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max_(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first maximal element."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)
    out = Tensor(out_data)

    def backward():
        if a.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis=axis)
            a._accumulate(buf)

    return _wire(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    return _wire(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))

    def backward():
        if a.requires_grad:
            if axes is None:
                a._accumulate(out.grad.transpose())
            else:
                inverse = np.argsort(np.asarray(axes))
                a._accumulate(out.grad.transpose(inverse))

    return _wire(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, ext in zip(tensors, extents):
            if t.requires_grad:
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(offset, offset + ext)
                t._accumulate(out.grad[tuple(sl)])
            offset += ext

    return _wire(out, tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.data[sl])

    def backward():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = out.grad
            a._accumulate(buf)

    return _wire(out, (a,), backward)


# -- gather / scatter --------------------------------------------------------


def gather_rows(a, idx) -> Tensor:
    """Select rows (leading axis) by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, out.grad)
            a._accumulate(buf)

    return _wire(out, (a,), backward)


def gather_axis1(a, idx) -> Tensor:
    """a: (C, M), idx: int array of any shape S -> output (C, *S)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"gather_axis1 expects a 2D source, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[:, idx])

    def backward():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (slice(None), idx), out.grad)
            a._accumulate(buf)

    return _wire(out, (a,), backward)


def take_along_axis1(a, idx) -> Tensor:
    """a: (N, M), idx: (N, K) -> (N, K), rows indexed independently."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ValueError(f"take_along_axis1 shape mismatch: {a.shape} with {idx.shape}")
    out = Tensor(np.take_along_axis(a.data, idx, axis=1))
    rows = np.arange(a.shape[0])[:, None]

    def backward():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), out.grad)
            a._accumulate(buf)

    return _wire(out, (a,), backward)


def masked_max(a, counts) -> Tensor:
    """Max over axis 1 of a (N, V, C) tensor, ignoring padded slots.

    counts[n] gives the number of valid leading slots in row n; rows with
    count zero yield zeros. Gradient flows to the first maximal valid slot.
    """
    a = as_tensor(a)
    if a.ndim != 3:
        raise ValueError(f"masked_max expects (N, V, C), got {a.shape}")
    counts = np.asarray(counts, dtype=np.int64)
    n, v, c = a.shape
    if counts.shape != (n,):
        raise ValueError(f"counts shape {counts.shape} does not match leading extent {n}")
    if np.any(counts < 0) or np.any(counts > v):
        raise ValueError("counts must lie in [0, V]")
    valid = np.arange(v)[None, :, None] < counts[:, None, None]
    masked = np.where(valid, a.data, -np.inf)
    idx = np.argmax(masked, axis=1)
    out_data = np.take_along_axis(a.data, idx[:, None, :], axis=1)[:, 0, :]
    out_data = np.where(counts[:, None] > 0, out_data, 0.0)
    out = Tensor(out_data)

    def backward():
        if a.requires_grad:
            g = np.where(counts[:, None] > 0, out.grad, 0.0)
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx[:, None, :], g[:, None, :], axis=1)
            a._accumulate(buf)

    return _wire(out, (a,), backward)


def scatter_cols(features, coords, grid_hw) -> Tensor:
    """Scatter per-column features (C, N) into a zero image (C, H, W).

    coords is an (N, 2) integer array of (row, col) cells; duplicates are an
    error because each pillar owns exactly one cell.
    """
    features = as_tensor(features)
    if features.ndim != 2:
        raise ValueError(f"scatter_cols expects (C, N) features, got {features.shape}")
    coords = np.asarray(coords, dtype=np.int64)
    h, w = int(grid_hw[0]), int(grid_hw[1])
    n = features.shape[1]
    if coords.shape != (n, 2):
        raise ValueError(f"coords shape {coords.shape} does not match {n} columns")
    if n:
        if coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w:
            raise ValueError("coords fall outside the grid")
        flat = coords[:, 0] * w + coords[:, 1]
        if np.unique(flat).size != n:
            raise ValueError("duplicate coords in scatter_cols")
    img = np.zeros((features.shape[0], h, w))
    img[:, coords[:, 0], coords[:, 1]] = features.data
    out = Tensor(img)

    def backward():
        if features.requires_grad:
            features._accumulate(out.grad[:, coords[:, 0], coords[:, 1]])

    return _wire(out, (features,), backward)


# -- convolutions ------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    c, h, w = x_shape
    gxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    gc = gcols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, i, j]
    if padding:
        return gxp[:, padding : padding + h, padding : padding + w]
    return gxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Single-image 2D convolution: x (Cin, H, W), weight (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d shapes: x {x.shape}, weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[0]}, weight expects {cin}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    y = wmat @ cols
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[:, None]
    out = Tensor(y.reshape(cout, ho, wo))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        gy = out.grad.reshape(cout, ho * wo)
        if weight.requires_grad:
            weight._accumulate((gy @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gy.sum(axis=1))
        if x.requires_grad:
            gcols = wmat.T @ gy
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo))

    return _wire(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, factor: int = 2) -> Tensor:
    """Upsampling transposed convolution with kernel = stride = factor.

    x (Cin, H, W), weight (Cin, Cout, f, f) -> (Cout, H*f, W*f). Because the
    kernel exactly tiles the output there is no overlap-add.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    cin, cout, fh, fw = weight.shape
    if fh != factor or fw != factor:
        raise ValueError(f"conv_transpose2d requires kernel == factor, got {weight.shape}")
    if x.shape[0] != cin:
        raise ValueError(f"conv_transpose2d channel mismatch: input {x.shape[0]}, weight expects {cin}")
    _, h, w = x.shape
    y = np.einsum("ihw,iojk->ohjwk", x.data, weight.data).reshape(cout, h * factor, w * factor)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[:, None, None]
    out = Tensor(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward():
        g = out.grad.reshape(cout, h, factor, w, factor)
        if x.requires_grad:
            x._accumulate(np.einsum("ohjwk,iojk->ihw", g, weight.data))
        if weight.requires_grad:
            weight._accumulate(np.einsum("ohjwk,ihw->iojk", g, x.data))
        if bias is not None and bias.requires_grad:
            bias._accumulate(out.grad.sum(axis=(1, 2)))

    return _wire(out, parents, backward)


# -- composed helpers --------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max subtracted, detached)."""
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))
