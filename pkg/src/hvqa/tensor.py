"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward`
sorts the recorded graph into a :class:`Tape` and replays it in reverse.

Backward closures take the upstream gradient and return one gradient per
parent (``None`` for parents that do not need one). Gradients of interior
nodes live only for the duration of a backward pass; leaves (and tensors
marked with :meth:`Tensor.retain_grad`) accumulate into ``.grad``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Build the output of a differentiable operation.

        ``backward(g)`` must return a tuple aligned with ``parents``.
        The graph is only recorded when grad mode is on and some parent
        requires a gradient.
        """
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- gradient bookkeeping ------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def retain_grad(self) -> "Tensor":
        """Keep this interior node's gradient in ``.grad`` after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_const_like(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _const_like(x, like)


def _const_like(x, like: Tensor | None) -> Tensor:
    dtype = like.dtype if like is not None and not isinstance(x, np.ndarray) else None
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations behind a tensor.

    Each node appears after all of its recorded inputs. :meth:`backward`
    replays the record in reverse, visiting every node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            # reversed so parents are visited left to right
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, seed: np.ndarray | None = None):
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data) if seed is None else seed
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` that requires it."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).backward(loss)


# --------------------------------------------------------------------------
# Elementwise
# --------------------------------------------------------------------------


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(
            f"cannot broadcast shapes {a} and {b}: extents must match or be 1"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    _broadcast_shape(sa, sb)

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    _broadcast_shape(sa, sb)

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return Tensor.from_op(y, (a,), lambda g: (g * (y > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return Tensor.from_op(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * (1 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor.from_op(y, (a,), lambda g: (g * y,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add, sub, mul, relu, sigmoid`` by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("relu", "sigmoid"):
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return fn(_as_tensor(a))
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    return fn(a, b)


# --------------------------------------------------------------------------
# Linear algebra and reductions
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across the leading axes of ``a``,
    or carry the same leading axes as ``a``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        z = np.zeros(src_shape, dtype=dtype)
        z[key] = g
        return (z,)

    return Tensor.from_op(a.data[key], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """``table[ids]`` for an integer array ``ids``; backward scatters into rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"row index out of range [0, {table.shape[0]})")

    def bw(g):
        z = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (z,)

    return Tensor.from_op(table.data[ids], (table,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes no gradient to ``x``."""
    return Tensor(x.data)


def straight_through(value: np.ndarray, surrogate: Tensor) -> Tensor:
    """``surrogate + stop(value - surrogate)`` with the forward pinned to ``value``.

    Writing the sum out can round away from ``value`` by an ulp; this op
    returns ``value`` exactly and passes the gradient to ``surrogate``.
    """
    value = np.asarray(value, dtype=surrogate.dtype)
    if value.shape != surrogate.shape:
        raise ShapeError(f"straight-through shapes differ: {value.shape} vs {surrogate.shape}")
    return Tensor.from_op(value.copy(), (surrogate,), lambda g: (g,))


# --------------------------------------------------------------------------
# Normalizers
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, (x,), bw)


def l2_norm_map(m: Tensor) -> Tensor:
    """Euclidean norm over the last axis (``[..., d] -> [...]``).

    The subgradient at an all-zero vector is taken to be zero.
    """
    if m.ndim < 1 or m.shape[-1] < 1:
        raise ShapeError(f"l2_norm_map needs a non-empty last axis, got {m.shape}")
    md = m.data
    n = np.sqrt((md * md).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        scale = np.where(n > 0, g / safe, 0)
        return (scale[..., None] * md,)

    return Tensor.from_op(n, (m,), bw)


# --------------------------------------------------------------------------
# Selection
# --------------------------------------------------------------------------


def top_k_indices(p, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest entries of ``p``.

    ``p`` is flattened in row-major order. Sorted by descending value;
    ties go to the smaller flat index. Not differentiable.
    """
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    flat = arr.reshape(-1)
    n = flat.size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    # stable sort on the negated values keeps ascending index order among ties
    return np.argsort(-flat, kind="stable")[:k]


def top_k_batched(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_indices` for ``p`` of shape ``[B, n]``."""
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def gather_cells(m: Tensor, indices) -> Tensor:
    """Pick spatial cells by flat row-major index.

    ``m`` is ``[w, h, d]`` with ``indices`` of shape ``[k]``, or batched
    ``[B, w, h, d]`` with ``indices`` of shape ``[B, k]``. Backward scatters
    the upstream gradient into the picked cells and leaves every other cell
    at exactly zero.
    """
    idx = np.asarray(indices, dtype=np.int64)
    batched = m.ndim == 4
    if m.ndim not in (3, 4):
        raise ShapeError(f"gather_cells expects [w,h,d] or [B,w,h,d], got {m.shape}")
    n = m.shape[-3] * m.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"cell index out of range [0, {n})")
    d = m.shape[-1]
    if batched:
        B = m.shape[0]
        if idx.ndim != 2 or idx.shape[0] != B:
            raise ShapeError(f"batched gather needs indices [B, k], got {idx.shape}")
        flat = m.data.reshape(B, n, d)
        rows = np.arange(B)[:, None]
        out = flat[rows, idx]
    else:
        flat = m.data.reshape(n, d)
        out = flat[idx]
    shape = m.shape

    def bw(g):
        z = np.zeros(flat.shape, dtype=g.dtype)
        if batched:
            np.add.at(z, (np.broadcast_to(rows, idx.shape), idx), g)
        else:
            np.add.at(z, idx, g)
        return (z.reshape(shape),)

    return Tensor.from_op(out, (m,), bw)


# --------------------------------------------------------------------------
# Convolution and batch normalization
# --------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output extent and (low, high) zero padding along one spatial axis."""
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        lo = total // 2
        return out, lo, total - lo
    if padding == "valid":
        if k > n:
            raise ShapeError(f"kernel extent {k} exceeds input extent {n}")
        return (n - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d cross-correlation, channels last.

    ``x`` is ``[H, W, C_in]`` or ``[B, H, W, C_in]``; ``kernel`` is
    ``[kh, kw, C_in, C_out]``. Same padding gives ``ceil(H / stride)``
    outputs with zero padding split evenly, extra on the high side.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [B,H,W,C] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    B, H, W, C = xd.shape
    if min(H, W, C) == 0:
        raise ShapeError(f"conv2d input has a zero extent: {x.shape}")
    kh, kw, cin, cout = kernel.shape
    if cin != C:
        raise ShapeError(f"kernel expects {cin} input channels, input has {C}")
    Ho, top, bottom = conv_output_size(H, kh, stride, padding)
    Wo, left, right = conv_output_size(W, kw, stride, padding)
    if kh > H + top + bottom or kw > W + left + right:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (top, bottom), (left, right), (0, 0))) if top + bottom + left + right else xd
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=np.result_type(xd, kernel.data))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + hs : stride, j : j + ws : stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    k2 = kernel.data.reshape(kh * kw * C, cout)
    out = (cols2 @ k2).reshape(B, Ho, Wo, cout)
    if unbatched:
        out = out[0]
    kshape, pshape = kernel.shape, xp.shape

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gk = (cols2.T @ g2).reshape(kshape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, top : top + H, left : left + W, :]
            if unbatched:
                gx = gx[0]
        return gx, gk

    return Tensor.from_op(out, (x, kernel), bw)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize over every axis but the last using batch statistics.

    Returns ``(y, batch_mean, batch_var)``; the variance is the biased
    (population) estimate.
    """
    xd = x.data
    C = xd.shape[-1]
    x2 = xd.reshape(-1, C)
    count = x2.shape[0]
    # statistics accumulate in float64: sparse channels turn small float32
    # summation errors into visible shifts of the normalized output
    mu = x2.mean(axis=0, dtype=np.float64)
    xhat = x2 - mu.astype(xd.dtype)
    var = np.einsum("ij,ij->j", xhat, xhat, dtype=np.float64) / count
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat *= inv
    gd = gamma.data
    y = xhat * gd
    y += beta.data

    def bw(g):
        g2 = g.reshape(-1, C)
        sg = g2.sum(axis=0, dtype=np.float64)
        sgx = np.einsum("ij,ij->j", g2, xhat, dtype=np.float64)
        gx = xhat * (-sgx / count).astype(xd.dtype)
        gx += g2
        gx -= (sg / count).astype(xd.dtype)
        gx *= gd * inv
        return gx.reshape(xd.shape), sgx.astype(xd.dtype), sg.astype(xd.dtype)

    return Tensor.from_op(y.reshape(xd.shape), (x, gamma, beta), bw), mu, var


def parameters_numel(params: Iterable[Tensor]) -> int:
    return int(sum(p.size for p in params))
