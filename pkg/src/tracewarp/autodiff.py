"""Dense-tensor reverse-mode automatic differentiation on top of numpy.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` working on raw arrays and a ``backward`` that maps the upstream
gradient to one gradient per input. ``Function.apply`` wires the result into
the graph; :func:`backward` walks the graph from a scalar loss.

Convolution follows the deep-learning convention (cross-correlation, no
kernel flip). Broadcasting is limited to bias-add inside :class:`Conv2d` and
to binary ops where one operand is a 0-d tensor or a Python scalar.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor", "Function", "Tape", "backward", "no_grad", "precision",
    "get_default_dtype", "set_default_dtype", "conv2d", "upsample_nearest2x",
    "leaky_relu", "tanh", "exp", "log", "concat", "matmul", "clamp", "grid_sample",
    "soft_joint_histogram",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

Scalar = Union[int, float]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Optional[Function] = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False):
        return cls(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False):
        return cls(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)

    # -- properties -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __getitem__(self, index):
        return Slice.apply(self, index=index)

    def abs(self):
        return Abs.apply(self)

    def square(self):
        return Square.apply(self)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(only 0-d operands broadcast)")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only the 0-d case can reach here, see _check_binary
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


class Function:
    """Base class for differentiable operations.

    Subclasses store whatever they need for the backward pass on ``self``
    during ``forward``. ``backward`` returns one gradient array (or ``None``)
    per tensor input, in order.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, grad: np.ndarray):  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out


class Tape:
    """Topologically ordered record of the nodes reachable from a loss."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def clear(self) -> None:
        for node in self.nodes:
            node._ctx = None
        self.nodes = []


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    The graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._ctx.backward(g)
        if not isinstance(parent_grads, tuple):
            parent_grads = (parent_grads,)
        for parent, pg in zip(node._ctx.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{type(node._ctx).__name__}.backward returned "
                                   f"shape {pg.shape} for input {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        tape.clear()
    return tape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        _check_binary(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _reduce_to(g, self.shapes[0]), _reduce_to(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_binary(a, b, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _reduce_to(g, self.shapes[0]), _reduce_to(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_binary(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _reduce_to(g * self.b, self.a.shape), _reduce_to(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_binary(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _reduce_to(ga, self.a.shape), _reduce_to(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return g * self.sign


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return 2 * g * self.a


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return g * (1 - self.out * self.out)


class LeakyReLU(Function):
    def forward(self, a, slope=0.2):
        self.scale = np.where(a > 0, 1, slope).astype(a.dtype)
        return a * self.scale

    def backward(self, g):
        return g * self.scale


class Clamp(Function):
    def forward(self, a, lo=None, hi=None):
        self.mask = np.ones(a.shape, dtype=a.dtype)
        if lo is not None:
            self.mask[a < lo] = 0
        if hi is not None:
            self.mask[a > hi] = 0
        return np.clip(a, lo, hi)

    def backward(self, g):
        return g * self.mask


def exp(t: Tensor) -> Tensor:
    return Exp.apply(t)


def log(t: Tensor) -> Tensor:
    return Log.apply(t)


def tanh(t: Tensor) -> Tensor:
    return Tanh.apply(t)


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(t, slope=slope)


def clamp(t: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return Clamp.apply(t, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        kept = list(self.shape)
        for ax in self.axes:
            kept[ax] = 1
        return np.broadcast_to(g.reshape(kept), self.shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.count = int(np.prod([a.shape[ax] for ax in self.axes]))
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        kept = list(self.shape)
        for ax in self.axes:
            kept[ax] = 1
        return np.broadcast_to(g.reshape(kept) / self.count, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes))


class Slice(Function):
    """Basic (non-fancy) indexing."""

    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.ascontiguousarray(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.index] = g
        return out


class Concat(Function):
    def forward(self, *arrays, axis=1):
        ref = arrays[0]
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                    s != r for i, (s, r) in enumerate(zip(arr.shape, ref.shape)) if i != axis % ref.ndim):
                raise ValueError(f"concat: shapes {ref.shape} and {arr.shape} "
                                 f"disagree off axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class MatMul(Function):
    """Batched matrix product over matching leading dimensions."""

    def forward(self, a, b):
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

class Conv2d(Function):
    """Cross-correlation of NCHW input with OCkk weights, plus per-channel bias."""

    def forward(self, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, cw, kh, kw = w.shape
        if c != cw:
            raise ValueError(f"conv2d: input has {c} channels but weight expects {cw} "
                             f"(input {x.shape}, weight {w.shape})")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv2d: kernel {kh}x{kw} must be odd")
        if stride < 1 or padding < 0:
            raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(w.reshape(o, -1), cols) + b[:, None]
        self.cols, self.w = cols, w
        self.meta = (x.shape, xp.shape, stride, padding, ho, wo)
        return out.reshape(n, o, ho, wo)

    def backward(self, g):
        (n, c, h, wd), xp_shape, stride, padding, ho, wo = self.meta
        o, _, kh, kw = self.w.shape
        g3 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g3, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w.shape)
        gb = g3.sum(axis=(0, 2))
        gcols = np.matmul(self.w.reshape(o, -1).T, g3).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return np.ascontiguousarray(gx), gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class UpsampleNearest2x(Function):
    def forward(self, a):
        return a.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g):
        *lead, h2, w2 = g.shape
        return g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1))


def upsample_nearest2x(t: Tensor) -> Tensor:
    return UpsampleNearest2x.apply(t)


class GridSample(Function):
    """Bilinear sampling of ``m`` at absolute pixel coordinates ``coords``.

    ``coords[:, 0]`` holds rows and ``coords[:, 1]`` columns. Coordinates are
    clamped to the image border; the clamped coordinate receives zero gradient.
    """

    def forward(self, m, coords):
        if m.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
            raise ValueError(f"grid_sample: bad shapes {m.shape}, {coords.shape}")
        if m.shape[0] != coords.shape[0] or m.shape[2:] != coords.shape[2:]:
            raise ValueError(f"grid_sample: image {m.shape} and field {coords.shape} disagree")
        n, c, h, w = m.shape
        r = np.clip(coords[:, 0], 0, h - 1)
        q = np.clip(coords[:, 1], 0, w - 1)
        r0 = np.clip(np.floor(r), 0, max(h - 2, 0)).astype(np.intp)
        q0 = np.clip(np.floor(q), 0, max(w - 2, 0)).astype(np.intp)
        r1 = np.minimum(r0 + 1, h - 1)
        q1 = np.minimum(q0 + 1, w - 1)
        fr = (r - r0).astype(m.dtype)[:, None]
        fq = (q - q0).astype(m.dtype)[:, None]
        flat = m.reshape(n, c, h * w)
        idx = [(a * w + b).reshape(n, 1, h * w) for a, b in ((r0, q0), (r0, q1), (r1, q0), (r1, q1))]
        vals = [np.take_along_axis(flat, np.broadcast_to(i, (n, c, h * w)), axis=2).reshape(n, c, h, w)
                for i in idx]
        v00, v01, v10, v11 = vals
        w00 = (1 - fr) * (1 - fq)
        w01 = (1 - fr) * fq
        w10 = fr * (1 - fq)
        w11 = fr * fq
        out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
        inside_r = (coords[:, 0] >= 0) & (coords[:, 0] <= h - 1)
        inside_q = (coords[:, 1] >= 0) & (coords[:, 1] <= w - 1)
        self.saved = (m.shape, idx, vals, fr, fq, (w00, w01, w10, w11), inside_r, inside_q)
        return out

    def backward(self, g):
        (n, c, h, w), idx, vals, fr, fq, weights, inside_r, inside_q = self.saved
        v00, v01, v10, v11 = vals
        size = n * c * h * w
        base = (np.arange(n * c).reshape(n, c, 1) * (h * w))
        gm = np.zeros(size, dtype=g.dtype)
        gflat = g.reshape(n, c, h * w)
        for i, wt in zip(idx, weights):
            target = (base + i).ravel()
            gm += np.bincount(target, weights=(gflat * wt.reshape(n, 1, h * w)).ravel(),
                              minlength=size).astype(g.dtype)
        d_r = (1 - fq) * (v10 - v00) + fq * (v11 - v01)
        d_q = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
        gr = (g * d_r).sum(axis=1) * inside_r
        gq = (g * d_q).sum(axis=1) * inside_q
        gc = np.stack([gr, gq], axis=1).astype(g.dtype)
        return gm.reshape(n, c, h, w), gc


def grid_sample(m: Tensor, coords: Tensor) -> Tensor:
    return GridSample.apply(m, coords)


class SoftJointHistogram(Function):
    """Parzen-window joint histogram of two (N, P) arrays with values in [0, 1].

    Each value spreads over nearby bins with a Gaussian kernel of width
    ``sigma`` bins, truncated at 3 sigma. The kernel is
    ``exp(-d^2/2) - exp(-4.5) * (11 - d^2) / 2`` inside the support, which
    meets zero with zero slope at ``|d| = 3``. Per-value memberships are normalised to sum
    to one, so the (N, bins, bins) result is a joint distribution per sample.
    Only the bins inside the kernel support are touched.
    """

    def forward(self, a, b, bins=16, sigma=0.3):
        if sigma <= 1 / 6:
            raise ValueError("sigma must exceed 1/6 bin so every value reaches a bin")
        if a.shape != b.shape or a.ndim != 2:
            raise ValueError(f"soft_joint_histogram: expected equal (N, P) inputs, got {a.shape}, {b.shape}")
        n, pixels = a.shape
        self.meta = (n, pixels, bins)
        self.wa, self.ia, self.da, self.sa, self.ka = self._memberships(a, bins, sigma)
        self.wb, self.ib, self.db, self.sb, self.kb = self._memberships(b, bins, sigma)
        base = (np.arange(n) * bins * bins)[:, None]
        self.pairs = []
        joint = np.zeros(n * bins * bins, dtype=a.dtype)
        for i in range(self.wa.shape[-1]):
            for j in range(self.wb.shape[-1]):
                flat = (base + self.ia[..., i] * bins + self.ib[..., j]).ravel()
                joint += np.bincount(flat, weights=(self.wa[..., i] * self.wb[..., j]).ravel(),
                                     minlength=joint.size).astype(a.dtype)
                self.pairs.append((i, j, flat))
        return joint.reshape(n, bins, bins) / pixels

    @staticmethod
    def _memberships(x, bins, sigma):
        reach = int(np.floor(3 * sigma + 0.5))
        nearest = np.clip(np.floor(x * bins), 0, bins - 1).astype(np.intp)
        offsets = np.arange(-reach, reach + 1)
        idx = nearest[..., None] + offsets
        valid = (idx >= 0) & (idx < bins)
        width = sigma / bins
        d = (x[..., None] - (idx + 0.5) / bins) / width
        raw = np.exp(-0.5 * d * d)
        floor = np.exp(-4.5)
        active = valid & (np.abs(d) < 3)
        k = np.where(active, raw - floor * (11 - d * d) / 2, 0).astype(x.dtype)
        dk = np.where(active, -d * (raw - floor) / width, 0).astype(x.dtype)
        s = k.sum(axis=-1, keepdims=True)
        return k / s, np.clip(idx, 0, bins - 1), dk, s, k

    @staticmethod
    def _through_normalisation(gw, k, dk, s):
        term1 = (gw * dk).sum(axis=-1) / s[..., 0]
        term2 = (gw * k).sum(axis=-1) * dk.sum(axis=-1) / (s[..., 0] ** 2)
        return term1 - term2

    def backward(self, g):
        n, pixels, bins = self.meta
        gflat = g.reshape(-1) / pixels
        gwa = np.zeros_like(self.wa)
        gwb = np.zeros_like(self.wb)
        for i, j, flat in self.pairs:
            gp = gflat[flat].reshape(n, pixels)
            gwa[..., i] += gp * self.wb[..., j]
            gwb[..., j] += gp * self.wa[..., i]
        ga = self._through_normalisation(gwa, self.ka, self.da, self.sa)
        gb = self._through_normalisation(gwb, self.kb, self.db, self.sb)
        return ga.astype(g.dtype), gb.astype(g.dtype)


def soft_joint_histogram(a: Tensor, b: Tensor, bins: int, sigma: float) -> Tensor:
    return SoftJointHistogram.apply(a, b, bins=bins, sigma=sigma)
