"""Dense tensors with reverse-mode automatic differentiation.

Everything else in the package is built on this module: a numpy-backed
``Tensor`` that records the operations applied to it and can replay them
backwards to accumulate gradients into the leaves.  Only the small set of
primitives the fusion network needs is implemented; all of them are
CPU-only, single-threaded and deterministic.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

# Numerical guard for binary cross entropy: probabilities are clamped to
# [BCE_EPS, 1 - BCE_EPS] before the logs so losses stay finite.
BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised when the autograd contract is violated (e.g. non-scalar backward)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d array with optional gradient tracking.

    Values are treated as immutable once the tensor participates in an
    operation; gradients accumulate into ``.grad`` on ``backward()`` and are
    never reset implicitly (call :func:`zero_grads` between steps).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, dtype: Optional[str] = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=DTYPES[dtype])
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

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
    def dtype(self) -> str:
        return _NP_TO_TAG[self.data.dtype]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar.  Repeated calls without clearing grads
        accumulate (sum) into the existing buffers.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = topo_order(self)
        # op-node grads are per-traversal scratch; only leaf grads accumulate
        for node in order:
            if node._backward is not None:
                node.grad = None
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    parents = tuple(parents)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-first ordering of the recorded graph below ``root``.

    Every node appears exactly once; iterative DFS so deep graphs do not
    hit the recursion limit.
    """
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed tensor dtypes in one operation: {sorted(map(str, dtypes))}")


def _broadcast_compatible(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for da, db in zip(a[::-1], b[::-1]):
        if da != db and da != 1 and db != 1:
            return False
    return True


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / affine primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with size-1 axes replicated; see :func:`add`."""
    return add(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad or b._parents:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward, "sigmoid")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward, "reshape")


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.full_like(x.data, g))

    return _make(data, (x,), backward, "sum")


def tmean(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def backward(g):
        _accumulate(x, np.full_like(x.data, g * inv))

    return _make(data, (x,), backward, "mean")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"concat_channels expects equal-rank tensors, got {a.shape} and {b.shape}")
    for axis in range(a.ndim):
        if axis != 1 and a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels mismatch on axis {axis}: {a.shape} vs {b.shape}"
            )
    data = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, g[:, :ca])
        if b.requires_grad or b._parents:
            _accumulate(b, g[:, ca:])

    return _make(data, (a, b), backward, "concat_channels")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with x (N,D), weight (D,O), bias (O,)."""
    _check_same_dtype(x, weight, bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear feature axis mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match out dim {weight.shape[1]}")
    data = x.data @ weight.data + bias.data

    def backward(g):
        if x.requires_grad or x._parents:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad or weight._parents:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=0))

    return _make(data, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input.

    weight is (outC, inC, kH, kW), bias (outC,).  Output spatial size is
    ``(H + 2*padding - kH)//stride + 1`` per axis.
    """
    _check_same_dtype(x, weight, bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d (outC,inC,kH,kW), got {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(
            f"channel axis mismatch: input has {cin} channels, weight expects {cin_w}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"empty output: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _pointwise(x, weight, bias)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = cols[:, :, :oh, :ow]
    data = np.einsum("nchwkl,ockl->nohw", cols, weight.data, optimize=True)
    data += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad or weight._parents:
            _accumulate(weight, np.einsum("nohw,nchwkl->ockl", g, cols, optimize=True))
        if x.requires_grad or x._parents:
            gcols = np.einsum("nohw,ockl->nchwkl", g, weight.data, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (oh - 1) + 1 : stride,
                        j : j + stride * (ow - 1) + 1 : stride] += gcols[:, :, :, :, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, gxp)

    return _make(data, (x, weight, bias), backward, "conv2d")


def _pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    w2 = weight.data[:, :, 0, 0]
    data = np.einsum("nchw,oc->nohw", x.data, w2, optimize=True)
    data += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad or weight._parents:
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)
            _accumulate(weight, gw[:, :, None, None])
        if x.requires_grad or x._parents:
            _accumulate(x, np.einsum("nohw,oc->nchw", g, w2, optimize=True))

    return _make(data, (x, weight, bias), backward, "pointwise_conv")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: channel mixing at each spatial position."""
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be (outC,inC,1,1), got {weight.shape}")
    return conv2d(x, weight, bias, stride=1, padding=0)


def gap_spatial(x: Tensor) -> Tensor:
    """Per-channel mean over the spatial extent; output (N,C,1,1)."""
    if x.ndim != 4:
        raise ShapeError(f"gap_spatial expects (N,C,H,W), got {x.shape}")
    data = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (x.shape[2] * x.shape[3])

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape) * inv)

    return _make(data, (x,), backward, "gap_spatial")


def gmp_spatial(x: Tensor) -> Tensor:
    """Per-channel max over the spatial extent; output (N,C,1,1).

    Backward routes the gradient to the first maximal element in row-major
    order, which keeps results deterministic under ties.
    """
    if x.ndim != 4:
        raise ShapeError(f"gmp_spatial expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    data = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        _accumulate(x, buf.reshape(x.shape))

    return _make(data, (x,), backward, "gmp_spatial")


def channel_mean_max(x: Tensor) -> Tensor:
    """Mean and max along the channel axis, stacked as a 2-channel map.

    Output (N,2,H,W): channel 0 is the mean over C, channel 1 the max.
    Max backward goes to the first maximal channel (row-major tie rule).
    """
    if x.ndim != 4:
        raise ShapeError(f"channel_mean_max expects (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    mean = x.data.mean(axis=1, keepdims=True)
    idx = x.data.argmax(axis=1)[:, None]
    mx = np.take_along_axis(x.data, idx, axis=1)
    data = np.concatenate([mean, mx], axis=1)

    def backward(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx, g[:, 1:2], axis=1)
        buf += g[:, 0:1] / c
        _accumulate(x, buf)

    return _make(data, (x,), backward, "channel_mean_max")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _make(data, (x,), backward, "softmax")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy of a softmax over ``logits`` rows vs integer targets."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N,K) logits, got {logits.shape}")
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {n}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target labels must lie in [0, {k}), got range "
                         f"[{targets.min()}, {targets.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    data = np.asarray((lse - z[rows, targets]).mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        _accumulate(logits, p * (g / n))

    return _make(data, (logits,), backward, "softmax_cross_entropy")


def bce(p: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy against {0,1} targets.

    ``p`` is clamped to [BCE_EPS, 1-BCE_EPS] before the logs; the clamp is
    part of the op, so gradients vanish outside the clamp interval.  Targets
    are constants (labels), never differentiated.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.data.dtype)
    if t.shape != p.shape:
        raise ShapeError(f"bce target shape {t.shape} does not match input {p.shape}")
    lo, hi = BCE_EPS, 1.0 - BCE_EPS
    pc = np.clip(p.data, lo, hi)
    data = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))

    def backward(g):
        inside = (p.data > lo) & (p.data < hi)
        grad = (-t / pc + (1.0 - t) / (1.0 - pc)) * inside
        _accumulate(p, g * grad)

    return _make(data.astype(p.data.dtype, copy=False), (p,), backward, "bce")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
               dtype: str = "f32") -> Tensor:
    """Fan-in scaled uniform init for conv/linear weights."""
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(DTYPES[dtype])
    return Tensor(data, requires_grad=True)


def zeros(shape: Sequence[int], dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DTYPES[dtype]), requires_grad=requires_grad)


TensorLike = Union[Tensor, np.ndarray, float, int]
