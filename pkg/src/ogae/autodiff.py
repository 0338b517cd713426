"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation eagerly computes its forward value on numpy
arrays and records a backward closure; calling :meth:`Tensor.backward` on a
scalar walks the graph in reverse topological order and accumulates adjoints
into ``.grad`` buffers. The op set is exactly what a small convolutional
autoencoder plus a kernel-based boundary penalty needs; there is no GPU
path, no dtype zoo (float64 only) and no higher-order differentiation.

``stop_gradient`` is first class: identity in the forward pass, hard zero in
the backward pass. It is the routing primitive the guided training loss is
built on.

All ops are deterministic and pure; with finite checks enabled (the default)
any op whose output contains NaN/Inf raises :class:`~ogae.errors.NumericError`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

# Module-level switch for post-op finite checks. Training loops may disable
# it for the hot path and instead verify the scalar loss each step.
FINITE_CHECKS = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finite checks, returning the previous setting."""
    global FINITE_CHECKS
    previous = FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)
    return previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if not FINITE_CHECKS:
        return
    # One-pass reduction: NaN/Inf anywhere poisons the sum.
    if not np.isfinite(np.sum(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array participating in a reverse-mode graph.

    Attributes:
        data: the numpy array holding the forward value (row-major float64).
        requires_grad: whether adjoints should be accumulated for this node.
        grad: same-shape adjoint buffer, allocated during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection ----------------------------------------------------

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    # -- autodiff ---------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) for every reachable node.

        ``self`` must be scalar (size 1). Nodes are visited exactly once in
        reverse topological order; adjoints accumulate additively.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is None:
                continue
            node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            stack.append((node._parents[idx], 0))
        else:
            order.append(node)
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def square(t: Tensor) -> Tensor:
    data = t.data * t.data

    def backward(g):
        _accumulate(t, 2.0 * t.data * g)

    return _make(data, "square", (t,), backward)


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)

    def backward(g):
        _accumulate(t, data * g)

    return _make(data, "exp", (t,), backward)


def relu(t: Tensor) -> Tensor:
    """max(0, x) elementwise; also the hinge used by the boundary penalty."""
    data = np.maximum(t.data, 0.0)

    def backward(g):
        _accumulate(t, np.where(t.data > 0.0, g, 0.0))

    return _make(data, "relu", (t,), backward)


def leaky_relu(t: Tensor, slope: float = 0.01) -> Tensor:
    data = np.where(t.data > 0.0, t.data, slope * t.data)

    def backward(g):
        _accumulate(t, np.where(t.data > 0.0, g, slope * g))

    return _make(data, "leaky_relu", (t,), backward)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * phi

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accumulate(t, (phi + x * pdf) * g)

    return _make(data, "gelu", (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    x = t.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(t, data * (1.0 - data) * g)

    return _make(data, "sigmoid", (t,), backward)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(t: Tensor, axis=None) -> Tensor:
    data = np.asarray(t.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).copy())
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(g, axis), t.data.shape).copy())

    return _make(data, "sum", (t,), backward)


def tmean(t: Tensor, axis=None) -> Tensor:
    count = t.data.size if axis is None else t.data.shape[axis]
    data = np.asarray(t.data.mean(axis=axis))

    def backward(g):
        scaled = g / count
        if axis is None:
            _accumulate(t, np.broadcast_to(scaled, t.data.shape).copy())
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(scaled, axis), t.data.shape).copy())

    return _make(data, "mean", (t,), backward)


def reshape(t: Tensor, shape) -> Tensor:
    data = t.data.reshape(shape)

    def backward(g):
        _accumulate(t, g.reshape(t.data.shape))

    return _make(data, "reshape", (t,), backward)


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice t[start:stop] along axis 0."""
    data = t.data[start:stop].copy()

    def backward(g):
        full = np.zeros_like(t.data)
        full[start:stop] = g
        _accumulate(t, full)

    return _make(data, "slice_rows", (t,), backward)


def custom_node(data, parents: tuple[Tensor, ...], backward, op: str = "custom") -> Tensor:
    """Insert an externally computed value into the graph.

    ``backward(g)`` receives the adjoint of the node and is responsible for
    accumulating into the parents (via :func:`accumulate_grad`). Used to
    treat an exactly solved optimization problem as one differentiable op.
    """
    return _make(np.asarray(data, dtype=np.float64), op, parents, backward)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t``'s adjoint buffer (for custom_node backwards)."""
    _accumulate(t, g)


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward; blocks all gradient flow backward.

    The returned tensor shares the forward value of ``t`` but has no
    parents, so adjoints arriving at it are dropped and nothing upstream
    of ``t`` receives a contribution through this path.
    """
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = "stop_gradient"
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, "matmul", (a, b), backward)


def pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    """D[i, j] = ||a_i - b_j||^2 for row sets a (n,d) and b (m,d).

    Computed from explicit differences (exact, no cancellation), which is
    fine at batch scale; the frozen-model path for large sets lives in
    :mod:`ogae.kernels`.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sq_dists expects (n,d),(m,d), got {a.data.shape}, {b.data.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    data = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data))
        if b.requires_grad:
            _accumulate(b, 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data))

    return _make(data, "pairwise_sq_dists", (a, b), backward)


# ---------------------------------------------------------------------------
# convolutional ops (stride 1, symmetric zero padding)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """(N,C,Hp,Wp) -> ((N*OH*OW, C*kh*kw) patch matrix, OH, OW)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,OH,OW,kh,kw)
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to (N,C,Hp,Wp)."""
    oh, ow = hp - kh + 1, wp - kw + 1
    patches = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hp, wp))
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + oh, b : b + ow] += patches[:, :, a, b]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int) -> Tensor:
    """2-D convolution, stride 1: x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    n, c, h, width = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols, oh, ow = _im2col(xp, kh, kw)
    data = (cols @ w.data.reshape(f, -1).T + b.data).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if w.requires_grad:
            _accumulate(w, (g2.T @ cols).reshape(w.data.shape))
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            gcols = g2 @ w.data.reshape(f, -1)
            gxp = _col2im(gcols, n, c, h + 2 * p, width + 2 * p, kh, kw)
            _accumulate(x, gxp[:, :, p : p + h, p : p + width])

    return _make(data, "conv2d", (x, w, b), backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor, padding: int) -> Tensor:
    """Transposed 2-D convolution, stride 1: x (N,F,H,W), w (F,C,kh,kw), b (C,).

    The spatial adjoint of :func:`conv2d`; with the padding used by the
    reference architectures it preserves the spatial size.
    """
    n, f, h, width = x.data.shape
    fw, c, kh, kw = w.data.shape
    if fw != f:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {f}, weight {fw}")
    p = padding
    # Size-preserving layers only: odd kernels with symmetric "same" padding.
    if 2 * p != kh - 1 or 2 * p != kw - 1:
        raise ShapeError(f"conv2d_transpose requires 2*padding == kernel-1, got k=({kh},{kw}), p={p}")
    cols = x.data.transpose(0, 2, 3, 1).reshape(-1, f) @ w.data.reshape(f, -1)
    full = _col2im(cols, n, c, h + 2 * p, width + 2 * p, kh, kw)
    data = full[:, :, p : p + h, p : p + width] + b.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols, _, _ = _im2col(gp, kh, kw)
        if x.requires_grad:
            gx = (gcols @ w.data.reshape(f, -1).T).reshape(n, h, width, f).transpose(0, 3, 1, 2)
            _accumulate(x, gx)
        if w.requires_grad:
            x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, f)
            _accumulate(w, (x2.T @ gcols).reshape(w.data.shape))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _make(data, "conv2d_transpose", (x, w, b), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Spatial dims must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _make(data, "max_pool2", (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    n, c, h, w = x.data.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, "upsample2", (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (N,) or (N,H,W) per channel.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, exponential moving average);
    inference mode uses the running statistics frozen at their last
    training values.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        br = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        br = (1, -1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.data.shape}")
    count = int(np.prod([x.data.shape[a] for a in axes]))

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if count > 1:
            unbiased = var * count / (count - 1)
        else:
            unbiased = var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(br)) * inv_std.reshape(br)
    data = xhat * gamma.data.reshape(br) + beta.data.reshape(br)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gs = g * gamma.data.reshape(br)
            if training:
                m1 = gs.mean(axis=axes).reshape(br)
                m2 = (gs * xhat).mean(axis=axes).reshape(br)
                _accumulate(x, inv_std.reshape(br) * (gs - m1 - xhat * m2))
            else:
                _accumulate(x, inv_std.reshape(br) * gs)

    return _make(data, "batch_norm", (x, gamma, beta), backward)
