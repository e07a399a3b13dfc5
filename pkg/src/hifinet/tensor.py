"""Minimal dense tensor engine with hand-written backward passes.

Every value flowing through the network is a :class:`Tensor` holding a
float64 ``numpy`` array.  Operations are plain functions that build the
result tensor and attach a closure computing the input gradients; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.

Conventions used throughout:

* convolution is cross-correlation (no kernel flip), NCHW layout;
* elementwise ops require equal shapes, except a scalar operand or a
  single-channel mask broadcast over the channel axis;
* accumulation order is fixed (row-major), so single-threaded runs are
  bit-reproducible.
"""

from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64
MAGIC = b"HFT1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or consumes NaN/Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_valid(self) -> bool:
        """True when all values (and the gradient, if any) are finite."""
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and self.grad.shape == self.data.shape and bool(np.isfinite(self.grad).all())
        return ok

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: ``g`` may be shared with another node or a view
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate buffers are not needed once propagated
                    node.grad = None if node is not self else node.grad

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``out`` as a graph node; ``backward`` receives d(loss)/d(out)."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


class ParamSet:
    """Named parameters, iterated in sorted-name order."""

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._p: dict[str, Tensor] = {}
        for k, v in (params or {}).items():
            self[k] = v

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name!r}")
        t.requires_grad = True
        self._p[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __len__(self) -> int:
        return len(self._p)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._p))

    def keys(self) -> list[str]:
        return sorted(self._p)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._p[k]) for k in sorted(self._p)]

    def values(self) -> list[Tensor]:
        return [self._p[k] for k in sorted(self._p)]

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.zero_grad()

    def num_params(self) -> int:
        return sum(t.size for t in self._p.values())


# --------------------------------------------------------------------------
# elementwise


def _mask_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    """Validate shapes; return True when ``b`` is a mask broadcast over channels."""
    if a.shape == b.shape:
        return False
    if (a.ndim >= 3 and b.ndim == a.ndim and b.shape[-3] == 1
            and b.shape[:-3] == a.shape[:-3] and b.shape[-2:] == a.shape[-2:]):
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return make_op(a.data + c, (a,), lambda g: _push(a, g))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _push(a, g)
        _push(b, g)

    return make_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return make_op(a.data - c, (a,), lambda g: _push(a, g))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _push(a, g)
        _push(b, -g)

    return make_op(a.data - b.data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: _push(a, g * s))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b)
    bcast = _mask_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        _push(a, g * b.data)
        if b.requires_grad:
            gb = g * a.data
            _push(b, gb.sum(axis=-3, keepdims=True) if bcast else gb)

    return make_op(out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: _push(a, g * pos))


def log(a, floor: float = 1e-12) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient where the floor is active."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, floor)
    live = a.data > floor
    return make_op(np.log(clipped), (a,), lambda g: _push(a, np.where(live, g / clipped, 0.0)))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``relu`` or ``scale``."""
    if op == "relu":
        return relu(a)
    if op == "scale":
        return scale(a, b)
    fn = {"add": add, "sub": sub, "mul": mul}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a, b)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: _push(a, g.reshape(old)))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: _push(a, g.transpose(inv)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _push(t, g[tuple(idx)])

    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def take(a, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Gather entries of ``a`` along ``axis``; repeated indices accumulate grads."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim

    def backward(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        _push(a, ga)

    return make_op(np.take(a.data, idx, axis=ax), (a,), backward)


def pick(a, index: Sequence[int]) -> Tensor:
    """For a 2-D ``a``, select ``a[i, index[i]]`` per row."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need [B,K] and B indices, got {a.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"pick: index out of range for {a.shape[1]} classes")
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        _push(a, ga)

    return make_op(a.data[rows, idx], (a,), backward)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: inner/batch dims disagree for {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _push(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _push(b, np.swapaxes(a.data, -1, -2) @ g)

    return make_op(a.data @ b.data, (a, b), backward)


def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (b, ho, wo, c, k, k), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return win.reshape(b * ho * wo, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add window gradients back; ``dcols`` columns are ordered (ki, kj, c)."""
    b, c, hp, wp = shape
    d = dcols.reshape(b, ho, wo, k, k, c)
    out = np.zeros((b, hp, wp, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return out.transpose(0, 3, 1, 2)


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [C_in,H,W] or [B,C_in,H,W], ``w`` is [C_out,C_in,k,k] and ``b``
    is [C_out] or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    xd, squeeze = _as_batch(x.data, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,k,k], got {w.shape}")
    cout, cin, k, _ = w.shape
    bsz, c, h, wd = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channel axis has {c} but kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis has {b.shape} but kernel has {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded height/width {h + 2 * padding}x{wd + 2 * padding}")
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(wd, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = np.ascontiguousarray(xp)
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(cout, cin * k * k)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            _push(w, (gm.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _push(b, gm.sum(axis=0))
        if x.requires_grad:
            wk = w.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
            dxp = _col2im(gm @ wk, xp.shape, k, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _push(x, dxp[0] if squeeze else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def depthwise_conv2d(x, w, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation; ``w`` is [C,k,k], stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    xd, squeeze = _as_batch(x.data, "depthwise_conv2d")
    bsz, c, h, wd = xd.shape
    if w.ndim != 3 or w.shape[0] != c or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernel {w.shape} does not match {c} channels")
    k = w.shape[1]
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise ShapeError(f"depthwise_conv2d: kernel {k} exceeds padded map {h + 2 * padding}x{wd + 2 * padding}")
    ho, wo = conv_out_size(h, k, 1, padding), conv_out_size(wd, k, 1, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((bsz, c, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + ho, j:j + wo] * w.data[None, :, i, j, None, None]
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g4, xp[:, :, i:i + ho, j:j + wo])
            _push(w, gw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += g4 * w.data[None, :, i, j, None, None]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _push(x, dxp[0] if squeeze else dxp)

    return make_op(out, (x, w), backward)


def bias_add(x, b, gate: np.ndarray | None = None) -> Tensor:
    """Add per-channel bias ``b`` along axis 1, optionally multiplied by a
    constant ``gate`` broadcastable to ``x`` (e.g. a validity mask)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis 1 of {x.shape}")
    view = b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    term = view if gate is None else view * gate
    sum_axes = tuple(i for i in range(x.ndim) if i != 1)

    def backward(g):
        _push(x, g)
        if b.requires_grad:
            gg = g if gate is None else g * gate
            _push(b, gg.sum(axis=sum_axes))

    return make_op(x.data + term, (x, b), backward)


# --------------------------------------------------------------------------
# normalisation, resampling, reductions


def softmax(logits, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(logits)
    if x.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    if not np.isfinite(x.data.sum()):
        raise NumericError("softmax: non-finite logits")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _push(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return make_op(s, (x,), backward)


def resample(x, factor: int, mode: str) -> Tensor:
    """``down_avg`` averages factor x factor blocks; ``up_nearest`` replicates."""
    x = as_tensor(x)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"resample factor must be a power of two, got {factor}")
    if x.ndim < 2:
        raise ShapeError(f"resample needs spatial axes, got {x.shape}")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    f = factor
    if mode == "down_avg":
        if h % f or w % f:
            raise ShapeError(f"resample: extent {h}x{w} not divisible by {f}")
        blocks = x.data.reshape(lead + (h // f, f, w // f, f))
        out = blocks.mean(axis=(-3, -1))

        def backward(g):
            _push(x, np.repeat(np.repeat(g, f, axis=-2), f, axis=-1) / (f * f))

    elif mode == "up_nearest":
        out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

        def backward(g):
            _push(x, g.reshape(lead + (h, f, w, f)).sum(axis=(-3, -1)))

    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return make_op(out, (x,), backward)


def _axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"reduce: axis {ax} invalid for shape {a.shape}")
    return tuple(sorted(ax % a.ndim for ax in axes))


def reduce(op: str, a, axes=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``l2norm`` over ``axes`` (all axes when None)."""
    a = as_tensor(a)
    ax = _axes(a, axes)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1

    def expand(g):
        return g if keepdims else np.expand_dims(g, ax)

    if op == "sum":
        out = a.data.sum(axis=ax, keepdims=keepdims)

        def backward(g):
            _push(a, np.broadcast_to(expand(g), a.shape))

    elif op == "mean":
        out = a.data.sum(axis=ax, keepdims=keepdims) / count

        def backward(g):
            _push(a, np.broadcast_to(expand(g) / count, a.shape))

    elif op == "l2norm":
        norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
        out = norm if keepdims else np.squeeze(norm, axis=ax)
        safe = np.where(norm > 0, norm, 1.0)

        def backward(g):
            _push(a, np.where(norm > 0, expand(g) * a.data / safe, 0.0))

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return make_op(np.asarray(out, dtype=DTYPE), (a,), backward)


def sum_(a, axes=None, keepdims=False) -> Tensor:
    return reduce("sum", a, axes, keepdims)


def mean(a, axes=None, keepdims=False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def l2norm(a, axes=None, keepdims=False) -> Tensor:
    return reduce("l2norm", a, axes, keepdims)


# --------------------------------------------------------------------------
# serialisation


def write_tensor(fh: BinaryIO, t) -> None:
    src = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    arr = np.asarray(src, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor record magic {magic!r}")
    (ndim,) = struct.unpack("<I", fh.read(4))
    if ndim > 4:
        raise ValueError(f"tensor record with {ndim} axes")
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(shape))


def tensors_equal(a: Iterable[Tensor], b: Iterable[Tensor]) -> bool:
    return all(x.shape == y.shape and np.array_equal(x.data, y.data) for x, y in zip(a, b, strict=True))
