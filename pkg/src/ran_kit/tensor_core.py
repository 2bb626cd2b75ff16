"""Dense-tensor numeric kernel with reverse-mode automatic differentiation.

Covers exactly the primitives the encoder, decoder, attention, and loss
need: affine maps, same-padded convolution, 2x2 ceil-mode max pooling,
tanh/sigmoid/softmax, pairwise maxout, embedding rows, and cross-entropy.
Every forward op records a backward closure; `backward(loss)` walks the
recorded graph once in reverse topological order.

Two precisions: float32 for training, float64 for finite-difference
gradient checking (central differences are unreliable at float32).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class KernelSizeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_checks():
    """Raise NonFiniteError as soon as any primitive emits NaN or Inf."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = True
    try:
        yield
    finally:
        _debug_checks = prev


class Tensor:
    """N-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r})"


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data, inputs, backward_fn, op) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value out of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out._op = op
    if out.requires_grad:
        out._prev = tuple(inputs)
        out._backward = backward_fn
    else:
        out._prev = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-d/2-d operands, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        # rank-1 products go through @ so BLAS handles them; np.outer is
        # noticeably slower at these sizes
        if a.data.ndim == 2 and b.data.ndim == 1:
            _accumulate(a, g[:, None] @ b.data[None, :])
            _accumulate(b, a.data.T @ g)
        elif a.data.ndim == 1 and b.data.ndim == 2:
            _accumulate(a, b.data @ g)
            _accumulate(b, a.data[:, None] @ g[None, :])
        else:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), back, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = W @ x + b for vector x; fused single node."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.data.ndim != 1 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects x[n], W[m,n], b[m]; got {x.shape}, {W.shape}, {b.shape}"
        )
    m, n = W.shape
    if x.shape != (n,) or b.shape != (m,):
        raise ShapeError(
            f"affine shapes do not conform: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    data = W.data @ x.data + b.data

    def back(g):
        _accumulate(W, g[:, None] @ x.data[None, :])
        _accumulate(x, W.data.T @ g)
        _accumulate(b, g)

    return _node(data, (x, W, b), back, "affine")


def conv2d(x: Tensor, kernels: Tensor, b: Tensor) -> Tensor:
    """Same-padded 2-d cross-correlation: x[Ci,H,W] * kernels[Co,Ci,k,k] + b."""
    x, kernels, b = _as_tensor(x), _as_tensor(kernels), _as_tensor(b)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects x[C,H,W] and kernels[Co,Ci,k,k]; got {x.shape}, {kernels.shape}"
        )
    co, ci, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise KernelSizeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[0] != ci:
        raise ShapeError(f"input has {x.shape[0]} channels, kernels expect {ci}")
    if b.shape != (co,):
        raise ShapeError(f"bias shape {b.shape} != ({co},)")
    _, h, w = x.shape
    pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (Ci, H, W, kh, kw)
    col = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, ci * kh * kw)
    wmat = kernels.data.reshape(co, ci * kh * kw)
    out = col @ wmat.T + b.data
    data = np.ascontiguousarray(out.T).reshape(co, h, w)

    def back(g):
        gmat = g.reshape(co, h * w)
        _accumulate(kernels, (gmat @ col).reshape(kernels.shape))
        _accumulate(b, g.sum(axis=(1, 2)))
        if x.requires_grad:
            gcol = gmat.T @ wmat  # (H*W, Ci*kh*kw)
            gcol = gcol.reshape(h, w, ci, kh, kw).transpose(2, 0, 1, 3, 4)
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy : dy + h, dx : dx + w] += gcol[:, :, :, dy, dx]
            _accumulate(x, gxp[:, pad : pad + h, pad : pad + w])

    return _node(data, (x, kernels, b), back, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2, ceil mode; ties route to the first window index."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2 expects x[C,H,W], got {x.shape}")
    c, h, w = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    xp = np.full((c, h2 * 2, w2 * 2), -np.inf, dtype=x.dtype)
    xp[:, :h, :w] = x.data
    windows = xp.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    am = windows.argmax(axis=3)
    data = np.take_along_axis(windows, am[..., None], axis=3)[..., 0]

    def back(g):
        gw = np.zeros((c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(gw, am[..., None], g[..., None], axis=3)
        gxp = gw.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2 * 2, w2 * 2)
        _accumulate(x, gxp[:, :h, :w])

    return _node(data, (x,), back, "maxpool2")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def back(g):
        _accumulate(x, g * (1.0 - data * data))

    return _node(data, (x,), back, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        _accumulate(x, g * data * (1.0 - data))

    return _node(data, (x,), back, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a 1-d vector; output sums to 1."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got {x.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    data = e / e.sum()

    def back(g):
        _accumulate(x, data * (g - np.dot(g, data)))

    return _node(data, (x,), back, "softmax")


def maxout2(x: Tensor) -> Tensor:
    """y_j = max(x_{2j}, x_{2j+1}); ties route gradient to the first element."""
    x = _as_tensor(x)
    if x.data.ndim != 1 or x.size % 2 != 0:
        raise ShapeError(f"maxout2 needs an even-length vector, got {x.shape}")
    pairs = x.data.reshape(-1, 2)
    am = pairs.argmax(axis=1)
    data = np.take_along_axis(pairs, am[:, None], axis=1)[:, 0]

    def back(g):
        gp = np.zeros_like(pairs)
        np.put_along_axis(gp, am[:, None], g[:, None], axis=1)
        _accumulate(x, gp.reshape(-1))

    return _node(data, (x,), back, "maxout2")


def embed(index: int, E: Tensor) -> Tensor:
    """Row extraction from embedding matrix E[K,m]."""
    E = _as_tensor(E)
    if E.data.ndim != 2:
        raise ShapeError(f"embed expects a matrix, got {E.shape}")
    k = E.shape[0]
    if not 0 <= index < k:
        raise IndexError(f"embedding index {index} outside [0, {k})")
    data = E.data[index].copy()

    def back(g):
        gE = np.zeros_like(E.data)
        gE[index] = g
        _accumulate(E, gE)

    return _node(data, (E,), back, "embed")


_LOG_CLAMP = 1e-12


def cross_entropy(p: Tensor, target: int) -> Tensor:
    """-log p[target] with a 1e-12 clamp inside the log.

    When p comes straight from a softmax node, backward is fused: the
    combined gradient p - onehot(target) lands directly on the softmax
    input, skipping the explicit Jacobian for numerical robustness.
    """
    p = _as_tensor(p)
    if p.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a probability vector, got {p.shape}")
    k = p.size
    if not 0 <= target < k:
        raise IndexError(f"target {target} outside [0, {k})")
    if _debug_checks and abs(float(p.data.sum()) - 1.0) > 1e-6:
        raise NonFiniteError("cross_entropy input does not sum to 1")
    value = -math.log(max(float(p.data[target]), _LOG_CLAMP))
    data = np.asarray(value, dtype=p.dtype)

    if p._op == "softmax" and p._prev:
        z = p._prev[0]

        def back(g):
            gz = p.data.copy()
            gz[target] -= 1.0
            _accumulate(z, g * gz)

        return _node(data, (z,), back, "cross_entropy")

    def back(g):
        gp = np.zeros_like(p.data)
        gp[target] = -g / max(float(p.data[target]), _LOG_CLAMP)
        _accumulate(p, gp)

    return _node(data, (p,), back, "cross_entropy")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), back, "reshape")


def transpose2d(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {x.shape}")
    data = np.ascontiguousarray(x.data.T)

    def back(g):
        _accumulate(x, g.T)

    return _node(data, (x,), back, "transpose2d")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar node."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _node(data, (x,), back, "sum")


def _toposort(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, iter(root._prev))]
    visited.add(id(root))
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in visited and child.requires_grad:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map from every reachable leaf tensor with requires_grad
    (i.e. every parameter) to its gradient array. Also leaves the
    gradient on each node's .grad.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {
        node: node.grad
        for node in order
        if node.requires_grad and not node._prev and node.grad is not None
    }


def grad_check(
    build_loss: Callable[[], Tensor],
    params: Iterable[Tensor] | dict,
    eps: float = 1e-4,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    build_loss must deterministically rebuild the loss from the current
    parameter values. Tensors larger than max_coords are subsampled on a
    seeded choice of coordinates. Use float64 parameters.

    The numeric side uses the fourth-order central stencil
    (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h, whose truncation error is
    O(h^4); the plain two-point stencil at h=1e-4 bottoms out near 1e-7
    relative, too coarse for the tolerances asserted on small models.
    """
    if isinstance(params, dict):
        params = list(params.values())
    else:
        params = list(params)
    grads = backward(build_loss())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        if p.size <= max_coords:
            coords = range(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            with no_grad():
                probes = []
                for shift in (-2.0, -1.0, 1.0, 2.0):
                    flat[idx] = orig + shift * eps
                    probes.append(float(build_loss().data))
            flat[idx] = orig
            f_m2, f_m1, f_p1, f_p2 = probes
            # paired differences cancel exactly when the loss ignores this
            # coordinate; the naive four-term sum leaves an ulp-sized residue
            numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * eps)
            ana = float(analytic.reshape(-1)[idx])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
