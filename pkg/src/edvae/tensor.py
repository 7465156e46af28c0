"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference runs without allocating any gradient state::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # dloss/dw

Conventions kept stable for reproducibility:

* ``relu`` has gradient 0 at exactly 0.
* ``maxpool2`` routes the gradient to the first maximum in row-major scan
  order of each 2x2 window.
* ``clamp_max(x, c)`` has gradient 1 strictly below ``c`` and 0 at or above.
* Broadcasting follows numpy (trailing-axis alignment); adjoints are summed
  back to the operand shape.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "no_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "relu",
    "clamp_max",
    "sum",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "permute",
    "softmax",
    "log_softmax",
    "conv2d",
    "maxpool2",
    "upsample_nearest2",
    "take_rows",
    "straight_through",
    "custom_op",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """A dense row-major float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Recording order is a topological order of the graph, so the backward pass
    is a single reverse sweep. ``backward`` overwrites (never accumulates)
    ``.grad`` on the tensors it reaches; calling it twice on the same tape
    yields bit-identical gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, root: Tensor, grad=None, retain: Iterable[Tensor] = ()) -> None:
        """Propagate adjoints from ``root`` to every recorded ancestor.

        Leaves (tensors not produced on this tape) receive ``.grad``. Extra
        intermediates to keep gradients for can be listed in ``retain``.
        """
        if grad is None:
            if root.size != 1:
                raise ShapeError(f"backward needs a scalar root or explicit grad, got shape {root.shape}")
            grad = np.ones_like(root.data)
        adj: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=np.float64)}
        keep = {id(t): t for t in retain}
        produced = set()
        tensors: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            key = id(node.out)
            produced.add(key)
            g = adj.get(key)
            if g is None:
                continue
            if key in keep:
                node.out.grad = g
            del adj[key]
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = gi
                    tensors[k] = inp
        for k, g in adj.items():
            if k not in produced:
                tensors[k].grad = g


class no_tape:
    """Context manager suspending recording on all active tapes."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tracked = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        _ACTIVE[-1].record(out, tuple(inputs), backward)
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register an op with a hand-written adjoint.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    return _result(data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0) or np.any(np.isnan(a.data)):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_max(a, c: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data < c
    return _result(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


# reductions and shape --------------------------------------------------------

def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def matmul(a, b) -> Tensor:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# softmax ---------------------------------------------------------------------

def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Max-shifted ``exp(x / temperature)`` normalised along ``axis``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _result(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


# convolution family ------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"{what}: extent {n} with kernel {k}, stride {stride}, padding {pad} "
                         "does not give an integral output size")
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """Patch matrix with rows ``(b, i, j)`` and columns ordered ``(ki, kj, c)``."""
    B, C = x.shape[:2]
    xh = x.transpose(0, 2, 3, 1)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return xh.reshape(-1, C)
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    # channels last keeps the gathered runs contiguous
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _im2col_conv(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    B, _, H, W = x.shape
    O, C, kh, kw = w.shape
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    cols = _im2col(x, kh, kw, 1, padding, Ho, Wo)
    out = (cols @ _kernel_matrix(w).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C, H, W]`` with ``w[O, C, kh, kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = _out_extent(H, kh, stride, padding, "conv2d height")
    Wo = _out_extent(W, kw, stride, padding, "conv2d width")
    wmat = _kernel_matrix(w.data)

    cols = _im2col(x.data, kh, kw, stride, padding, Ho, Wo)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        if kh == kw == 1 and stride == 1 and padding == 0:
            dcols = g2 @ wmat
            return np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2)), gw
        if stride == 1 and padding <= kh - 1 and padding <= kw - 1 and kh == kw:
            # input adjoint of a stride-1 correlation = correlation with the flipped kernel
            return _im2col_conv(g, w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), kh - 1 - padding), gw
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
        dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:padding + H, padding:padding + W]
        return np.ascontiguousarray(dxp), gw

    return _result(np.ascontiguousarray(out), (x, w), backward)


def maxpool2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _result(out, (x,), backward)


def upsample_nearest2(x) -> Tensor:
    """Replicate every cell into a 2x2 block."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


# indexing ----------------------------------------------------------------------

def take_rows(m, idx) -> Tensor:
    """Gather rows ``m[idx]``; the adjoint scatter-adds into ``m``."""
    m = as_tensor(m)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise IndexError(f"row index out of range for {m.shape[0]} rows")

    def backward(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, idx.reshape(-1), g.reshape(-1, *m.shape[1:]))
        return (gm,)

    return _result(m.data[idx], (m,), backward)


def straight_through(x, value) -> Tensor:
    """Forward ``value``, backward the incoming gradient unchanged onto ``x``."""
    x = as_tensor(x)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != x.shape:
        raise ShapeError(f"straight_through shape mismatch: {x.shape} vs {value.shape}")
    return _result(value.copy(), (x,), lambda g: (g,))


# serialization ---------------------------------------------------------------------

_MAGIC = b"EDVT"


def tensor_to_bytes(t) -> bytes:
    """Encode as ``EDVT`` + u32 rank + u32 extents + little-endian float64 data."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = _MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 8 or buf[:4] != _MAGIC:
        raise ValueError("not an EDVT tensor blob (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise ValueError("truncated EDVT header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != end + 8 * count:
        raise ValueError(f"truncated EDVT blob: expected {end + 8 * count} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=end).astype(np.float64)
    return Tensor(data.reshape(shape))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
