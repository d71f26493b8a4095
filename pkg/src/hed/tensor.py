"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each differentiable operation returns a new :class:`Tensor` holding references
to its inputs and a closure that maps the output gradient to input gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and then drops the closures, so a graph is used for exactly one backward pass.
"""

from __future__ import annotations

from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


# non-smooth decisions (ReLU masks, max-pool picks) of ops run under record_switches()
_switch_log: Optional[list] = None


@contextmanager
def record_switches():
    """Collect the ReLU masks and max-pool selections made inside the block."""
    global _switch_log
    prev, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        # float64 arrays are shared, not copied
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    # backward ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from this scalar.

        Gradients accumulate into existing ``grad`` slots, so several losses can be
        backpropagated in turn before an optimizer step. Intermediate nodes are
        released afterwards.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor with requires_grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.array(a.data.sum()), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _switch_log is not None:
        _switch_log.append(mask)

    def backward(g):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), backward)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for any finite input."""
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._result(s, (x,), backward)


# convolution ----------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk kernel, zero padded."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIkk kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel spatial extent must be odd, got kernel {kernel.shape}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {kernel.shape} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wk = kernel.data

    def window(arr, dy, dx):
        return arr[:, :, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]

    # im2col: (n, c, ho, wo, kh, kw) strided view, contracted with the kernel in one go
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, wk, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            # (o, ...) x (n, o, ho, wo) -> (c, kh, kw, n, ho, wo)
            gcols = np.tensordot(wk, g, axes=([0], [1]))
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    window(gxp, dy, dx)[...] += gcols[:, dy, dx].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return Tensor._result(out, parents, backward)


def pool2d(x: Tensor, window: int = 2, stride: int = 2, mode: str = "max") -> Tensor:
    """Max or average pooling over NCHW input, no padding, floor output size."""
    if mode not in ("max", "average"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"pool2d input {x.shape} smaller than window {window}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    def view(arr, dy, dx):
        return arr[:, :, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]

    offsets = [(dy, dx) for dy in range(window) for dx in range(window)]
    if mode == "average":
        out = sum(view(x.data, dy, dx) for dy, dx in offsets) / (window * window)

        def backward(g):
            gx = np.zeros_like(x.data)
            share = g / (window * window)
            for dy, dx in offsets:
                view(gx, dy, dx)[...] += share
            return (gx,)

        return Tensor._result(out, (x,), backward)

    cands = np.stack([view(x.data, dy, dx) for dy, dx in offsets])
    # argmax takes the first maximum in scan order, so ties route to the top-left
    arg = cands.argmax(axis=0)
    if _switch_log is not None:
        _switch_log.append(arg)
    out = np.take_along_axis(cands, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for k, (dy, dx) in enumerate(offsets):
            view(gx, dy, dx)[...] += g * (arg == k)
        return (gx,)

    return Tensor._result(out, (x,), backward)


# fixed bilinear upsampling --------------------------------------------------


def bilinear_kernel(factor: int) -> np.ndarray:
    """1-D triangular kernel used by the fixed transposed convolution."""
    size = 2 * factor - factor % 2
    center = (2 * factor - 1 - factor % 2) / 2
    i = np.arange(size, dtype=DTYPE)
    return 1.0 - np.abs(i / factor - center / factor)


@lru_cache(maxsize=256)
def upsample_matrix(n_in: int, factor: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) operator of a stride-``factor`` transposed convolution.

    The input is edge-replicated (one sample before, two after), scattered through
    :func:`bilinear_kernel`, and cropped to ``n_out`` anchored at the top-left:
    floor pooling drops trailing rows, so any extra output samples belong at the
    far end.
    """
    kern = bilinear_kernel(factor)
    size = kern.size
    # one replicated sample on the left, two on the right for the trailing partial step
    full = (n_in + 3 - 1) * factor + size
    scatter = np.zeros((full, n_in), dtype=DTYPE)
    for p in range(n_in + 3):
        src = min(max(p - 1, 0), n_in - 1)
        scatter[p * factor : p * factor + size, src] += kern
    # offset placing original sample i's center at output i*factor + (factor-1)/2
    offset = factor + (size - 1) // 2 - (factor - 1) // 2
    start = offset
    if start + n_out > full:
        raise ShapeError(f"cannot upsample extent {n_in} by {factor} to {n_out}")
    mat = scatter[start : start + n_out]
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x: Tensor, factor: int, target_h: int, target_w: int) -> Tensor:
    """Upsample NCHW maps by ``factor`` with a fixed bilinear transposed convolution."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if target_h < h or target_w < w:
        raise ShapeError(f"upsample target {(target_h, target_w)} smaller than input {x.shape}")
    if abs(target_h - h * factor) >= factor or abs(target_w - w * factor) >= factor:
        raise ShapeError(
            f"upsample target {(target_h, target_w)} not within one step of {factor}x input {x.shape}"
        )
    if factor == 1:
        return x
    uh = upsample_matrix(h, factor, target_h)
    uw = upsample_matrix(w, factor, target_w)
    out = np.einsum("ph,nchw,qw->ncpq", uh, x.data, uw, optimize=True)

    def backward(g):
        return (np.einsum("ph,ncpq,qw->nchw", uh, g, uw, optimize=True),)

    return Tensor._result(out, (x,), backward)


# fused losses ---------------------------------------------------------------


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) computed as -softplus(-x)."""
    return -(np.logaddexp(0.0, -x))


def weighted_logistic_loss(a: Tensor, pos_weight: np.ndarray, neg_weight: np.ndarray) -> Tensor:
    """Sum of ``-pos_weight*log(sig(a)) - neg_weight*log(1-sig(a))`` over all entries."""
    pw = np.broadcast_to(pos_weight, a.shape)
    nw = np.broadcast_to(neg_weight, a.shape)
    value = -(pw * log_sigmoid(a.data) + nw * log_sigmoid(-a.data)).sum()
    s = stable_sigmoid(a.data)

    def backward(g):
        # d/da: -pw*(1-s) + nw*s
        return (g * (nw * s - pw * (1.0 - s)),)

    return Tensor._result(np.array(value), (a,), backward)


def weighted_sum(weights: Tensor, maps: Sequence[Tensor]) -> Tensor:
    """``sum_m weights[m] * maps[m]`` for a 1-D weight vector and same-shape maps."""
    maps = tuple(maps)
    if weights.shape != (len(maps),):
        raise ShapeError(f"weights {weights.shape} do not match {len(maps)} maps")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ShapeError(f"weighted_sum maps differ in shape: {shape} vs {m.shape}")
    out = np.zeros(shape, dtype=DTYPE)
    for w, m in zip(weights.data, maps):
        out += w * m.data

    def backward(g):
        gw = np.array([np.sum(g * m.data) for m in maps]) if weights.requires_grad else None
        return (gw,) + tuple(w * g for w in weights.data)

    return Tensor._result(out, (weights,) + maps, backward)
