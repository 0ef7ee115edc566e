"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable op builds its output with :func:`_make`, recording the
parent tensors and a closure mapping the output gradient to one gradient per
parent.  :func:`backward` walks the recorded graph in reverse topological
order and accumulates into the ``grad`` buffers of leaf tensors.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True
_CONV_BACKEND: str | None = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_leaf", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._leaf = True
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._leaf = False
    return out


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing leaf buffers; callers zero them
    between optimizer steps.  The graph is released unless ``retain_graph``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss value {loss.data.reshape(-1)[0]!r}")
    if not loss.requires_grad:
        return
    if loss._freed:
        raise RuntimeError("graph already released; pass retain_graph=True to backward twice")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._leaf:
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for leaf {node.name or node!r}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._freed:
            raise RuntimeError("graph already released; pass retain_graph=True to backward twice")
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
            node._freed = True


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (g * 2.0 * ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def softplus(a) -> Tensor:
    """Smooth rectifier log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    sig = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * sig,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def mse_loss(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _make(
        np.asarray(np.mean(diff * diff)),
        (a, b),
        lambda g: (g * (2.0 / n) * diff, g * (-2.0 / n) * diff),
    )


# ---------------------------------------------------------------------------
# Structural primitives (NCHW)
# ---------------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def crop(a, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of the last two axes."""
    a = as_tensor(a)
    H, W = a.shape[-2:]
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ValueError(f"crop window ({top},{left},{height},{width}) outside {H}x{W}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., top : top + height, left : left + width] = g
        return (full,)

    return _make(a.data[..., top : top + height, left : left + width].copy(), (a,), bw)


def space_to_depth(a, block: int = 2) -> Tensor:
    """(N, C, H, W) -> (N, C*b*b, H/b, W/b); channel c*b*b + r*b + q holds offset (r, q)."""
    a = as_tensor(a)
    N, C, H, W = a.shape
    if H % block or W % block:
        raise ValueError(f"spatial dims {H}x{W} not divisible by {block}")
    b = block

    def fwd(x):
        return x.reshape(N, C, H // b, b, W // b, b).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * b * b, H // b, W // b)

    def bw(g):
        return (g.reshape(N, C, b, b, H // b, W // b).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H, W),)

    return _make(fwd(a.data), (a,), bw)


def depth_to_space(a, block: int = 2) -> Tensor:
    """Pixel shuffle: inverse of :func:`space_to_depth`."""
    a = as_tensor(a)
    N, Cb, h, w = a.shape
    b = block
    if Cb % (b * b):
        raise ValueError(f"channel count {Cb} not divisible by {b * b}")
    C = Cb // (b * b)

    def fwd(x):
        return x.reshape(N, C, b, b, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, h * b, w * b)

    def bw(g):
        return (g.reshape(N, C, h, b, w, b).transpose(0, 1, 3, 5, 2, 4).reshape(N, Cb, h, w),)

    return _make(fwd(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _torch():
    import torch

    threads = os.environ.get("PSEUDOISP_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    return torch


def set_conv_backend(name: str) -> None:
    """``"numpy"`` (im2col reference) or ``"torch"`` (native kernels, same contract)."""
    global _CONV_BACKEND
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch":
        _torch()
    _CONV_BACKEND = name


def get_conv_backend() -> str:
    if _CONV_BACKEND is None:
        wanted = os.environ.get("PSEUDOISP_CONV_BACKEND", "auto")
        if wanted == "auto":
            try:
                set_conv_backend("torch")
            except ImportError:
                set_conv_backend("numpy")
        else:
            set_conv_backend(wanted)
    return _CONV_BACKEND


def _conv2d_torch(x: Tensor, weight: Tensor, bias: Tensor | None, groups: int, pad: int) -> Tensor:
    torch = _torch()
    tx = torch.from_numpy(x.data)
    tw = torch.from_numpy(np.ascontiguousarray(weight.data))
    tb = None if bias is None else torch.from_numpy(bias.data)
    out = torch.nn.functional.conv2d(tx, tw, tb, padding=pad, groups=groups).numpy()
    O = weight.shape[0]

    def bw(g):
        mask = [x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad]
        gi, gw, gb = torch.ops.aten.convolution_backward(
            torch.from_numpy(g), tx, tw, [O], [1, 1], [pad, pad], [1, 1], False, [0, 0], groups, mask
        )
        grads = [gi.numpy() if mask[0] else None, gw.numpy() if mask[1] else None]
        if bias is not None:
            grads.append(gb.numpy() if mask[2] else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv2d(x, weight, bias=None, groups: int = 1, padding: int | None = None) -> Tensor:
    """Zero-padded, stride-1 cross-correlation over NCHW input.

    Computed physically in NHWC so consecutive layers chain without copies;
    the NCHW output is a transposed view.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D (C_out,C_in/groups,k,k), got shape {weight.shape}")
    N, C, H, W = x.shape
    O, Cg, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d supports square kernels of size 1 or 3, got {k}x{k2}")
    if groups < 1 or C % groups or O % groups:
        raise ValueError(f"groups={groups} must divide C_in={C} and C_out={O}")
    if Cg != C // groups:
        raise ValueError(f"weight expects {Cg * groups} input channels (groups={groups}), input has {C}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ValueError(f"padding must be {pad} for a {k}x{k} kernel to preserve spatial size")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ValueError(f"bias shape {bias.shape} does not match C_out={O}")

    if get_conv_backend() == "torch":
        return _conv2d_torch(x, weight, bias, groups, pad)

    G, Og, kk = groups, O // groups, k * k
    P = N * H * W
    xn = x.data.transpose(0, 2, 3, 1)
    # columns are ordered (tap, channel) so each tap copies contiguous channel runs
    if k == 1:
        cols = xn.reshape(P, C)
    else:
        xp = np.pad(xn, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        colbuf = np.empty((N, H, W, kk, C), dtype=np.result_type(x.data, weight.data))
        for t in range(kk):
            i, j = divmod(t, k)
            colbuf[:, :, :, t, :] = xp[:, i : i + H, j : j + W, :]
        cols = colbuf.reshape(P, kk * C)
    wd = weight.data
    if G == 1:
        wm = wd.transpose(0, 2, 3, 1).reshape(O, kk * C)
        out = cols @ wm.T
    else:
        cg = cols.reshape(P, kk, G, Cg).transpose(2, 0, 1, 3).reshape(G, P, kk * Cg)
        wg = wd.reshape(G, Og, Cg, k, k).transpose(0, 1, 3, 4, 2).reshape(G, Og, kk * Cg)
        out = np.matmul(cg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(P, O)
    if bias is not None:
        out += bias.data
    out_nchw = out.reshape(N, H, W, O).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(P, O)
        if G == 1:
            gw = (gm.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
            gcols = gm @ wm
        else:
            gg = gm.reshape(P, G, Og).transpose(1, 0, 2)
            gw = np.matmul(gg.transpose(0, 2, 1), cg).reshape(G, Og, k, k, Cg).transpose(0, 1, 4, 2, 3)
            gw = gw.reshape(wd.shape)
            gcols = np.matmul(gg, wg).reshape(G, P, kk, Cg).transpose(1, 2, 0, 3).reshape(P, kk * C)
        if k == 1:
            gx = gcols.reshape(N, H, W, C)
        else:
            gc = gcols.reshape(N, H, W, kk, C)
            gxp = np.zeros((N, H + 2 * pad, W + 2 * pad, C), dtype=gcols.dtype)
            for t in range(kk):
                i, j = divmod(t, k)
                gxp[:, i : i + H, j : j + W, :] += gc[:, :, :, t, :]
            gx = gxp[:, pad : pad + H, pad : pad + W, :]
        grads = [gx.transpose(0, 3, 1, 2), np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_nchw, parents, bw)
