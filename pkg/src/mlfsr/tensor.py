"""Small n-dimensional tensor engine with reverse-mode differentiation.

Only the operations the light-field network needs are provided. Every op
takes and returns :class:`Tensor`; the backward rule of an op is a closure
mapping the upstream gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class _Allocator:
    """Byte counter for live tensor payloads (owned buffers only)."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._lock = threading.Lock()

    def acquire(self, n: int) -> None:
        with self._lock:
            self.live += n
            if self.live > self.peak:
                self.peak = self.live

    def release(self, n: int) -> None:
        with self._lock:
            self.live -= n

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.live


ALLOCATOR = _Allocator()

_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_nbytes")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._nbytes = arr.nbytes if arr.flags.owndata else 0
        if self._nbytes:
            ALLOCATOR.acquire(self._nbytes)

    def __del__(self):
        if self._nbytes:
            ALLOCATOR.release(self._nbytes)

    # --- construction helpers -------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # --- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    # --- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        run_backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


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


def run_backward(root: Tensor, grad: np.ndarray) -> None:
    """Propagate ``grad`` from ``root``; leaf gradients accumulate."""
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topo_order(root)):
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


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,), "exp")


def abs_(x: Tensor) -> Tensor:
    # np.sign gives the subgradient 0 at exactly 0
    s = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for either sign
    return 0.5 + 0.5 * np.tanh(0.5 * v)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return Tensor._make(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),), "silu")


def softplus(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    xd = x.data
    return Tensor._make(y, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


# --- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for tensor of rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return Tensor._make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape).astype(x.dtype),)

    return Tensor._make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


# --- layout ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise ValueError(f"cannot reshape tensor of shape {x.shape} into shape {shape}")
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"axis order {axes} is not a permutation of {x.ndim} axes (shape {x.shape})")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(x.data, axis))
    return Tensor._make(out, (x,), lambda g: (np.ascontiguousarray(np.flip(g, axis)),), "flip")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out, (x,), backward, "getitem")


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last axis into contiguous chunks."""
    if sum(sizes) != x.shape[-1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[-1]}")
    outs, start = [], 0
    for n in sizes:
        outs.append(_slice_last(x, start, start + n))
        start += n
    return outs


def _slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., lo:hi] = g
        return (full,)

    return Tensor._make(np.ascontiguousarray(x.data[..., lo:hi]), (x,), backward, "slice")


# --- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[K, N]`` or batched ``b[..., K, N]``."""
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    if a.shape[-1] != b.shape[-2 if b.ndim >= 2 else 0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --- normalization ---------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# --- convolutions -----------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N, Cin, H, W]`` with ``w[Cout, Cin, k, k]``."""
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    p = padding
    xd, wdat = x.data, w.data
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    if k == 1:
        cols = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(-1, cin)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # win: [N, Cin, Ho, Wo, k, k] -> rows over (N, Ho, Wo), cols over (Cin, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, cin * k * k)
    wmat = wdat.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = gm @ wmat
            if k == 1:
                gxp = gcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
            else:
                gc = gcols.reshape(n, ho, wo, cin, k, k)
                gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + ho, j:j + wo] += gc[..., i, j].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + wd]) if p else np.ascontiguousarray(gxp)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def conv1d_depthwise(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Causal per-channel convolution along L of ``x[G, L, C]`` with ``w[k, C]``.

    Tap ``k-1`` multiplies the current token; tap ``j`` reaches back ``k-1-j``
    tokens. Sequences are left-padded with zeros.
    """
    g_, length, c = x.shape
    k = w.shape[0]
    if k < 1 or w.shape[1] != c:
        raise ValueError(f"depthwise kernel shape {w.shape} incompatible with {c} channels")
    xd, wdat = x.data, w.data
    xp = np.concatenate([np.zeros((g_, k - 1, c), dtype=xd.dtype), xd], axis=1) if k > 1 else xd
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[:, j:j + length] * wdat[j]
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.stack([(g * xp[:, j:j + length]).sum(axis=(0, 1)) for j in range(k)])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + length] += g * wdat[j]
            gx = np.ascontiguousarray(gxp[:, k - 1:])
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._make(out, parents, backward, "conv1d_depthwise")


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    n, cs, h, w = x.shape
    if cs % (s * s):
        raise ValueError(f"pixel_shuffle: {cs} channels not divisible by scale^2={s * s}")
    c = cs // (s * s)
    y = permute(reshape(x, (n, c, s, s, h, w)), (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, c, h * s, w * s))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    n, c, hs, ws = x.shape
    if hs % s or ws % s:
        raise ValueError(f"pixel_unshuffle: spatial extents {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    y = permute(reshape(x, (n, c, h, s, w, s)), (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, c * s * s, h, w))


# --- parameters ---------------------------------------------------------------------

class ParamStore:
    """Named parameters, iterated in lexicographic path order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for k, v in (params or {}).items():
            self[k] = v

    def __setitem__(self, path: str, value) -> None:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[path] = t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def keys(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.keys()]

    def values(self) -> list[Tensor]:
        return [self._params[k] for k in self.keys()]

    def __iter__(self):
        return iter(self.keys())

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.astype(dtype)) for k, v in self.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.copy()) for k, v in self.items()})


class ParamView:
    """Prefix-scoped read access into a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.store

    def scope(self, name: str) -> "ParamView":
        return ParamView(self.store, f"{self.prefix}.{name}")


def backward(loss: Tensor, params: ParamStore | None = None) -> None:
    """Backpropagate a scalar loss; parameters it does not reach get zero grads."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    if params is not None:
        params.fill_missing_grads()


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
