"""Selective state-space scans.

Three evaluation routes for the diagonal recurrence

    h_t = exp(dt_t * A) h_{t-1} + Bbar_t x_t,    y_t = <C_t, h_t> + D x_t

are provided and cross-checked in the test suite: a step-by-step loop, a
work-efficient (Blelloch) associative scan, and, for time-invariant
parameters, the causal-convolution kernel form. The fused numba kernel in
``_kernels`` is the training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, flip, linear, softplus, exp, mul, add

TAYLOR_THRESHOLD = _kernels.TAYLOR_THRESHOLD
METHODS = ("fused", "sequential", "parallel")


class ContractViolation(ValueError):
    """Raised when an operation is used outside its stated preconditions."""


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, with a series below the Taylor threshold."""
    z = np.asarray(z)
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z * (0.5 + z / 6.0), np.expm1(safe) / safe)


def _dphi(z: np.ndarray, ez: np.ndarray, phi: np.ndarray) -> np.ndarray:
    small = np.abs(z) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 0.5 + z * (1.0 / 3.0 + z / 8.0), (ez - phi) / safe)


def discretize_zoh(A, B, delta):
    """Zero-order-hold discretization of a diagonal system.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta*A)`` and
    ``b_bar = (exp(delta*A) - 1) / A * B``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError(f"ZOH step must be positive, got {delta}")
    A = np.asarray(A, dtype=np.float64)
    if np.any(A == 0):
        raise ValueError("ZOH needs nonzero diagonal A entries")
    z = delta * A
    return np.exp(z), delta * _phi(z) * np.asarray(B, dtype=np.float64)


# --- linear recurrences h_t = a_t h_{t-1} + b_t over axis 0 ----------------------

def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype)
    for t in range(h.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Blelloch up-sweep/down-sweep over pairs ``(a, b)``.

    Pairs compose as ``(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)``. The
    sequence is padded to a power of two with the identity ``(1, 0)``.
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    length, rest = shape[0], shape[1:]
    dtype = np.result_type(a, b)
    size = 1 << max(0, (length - 1).bit_length())
    pa = np.ones((size,) + rest, dtype=dtype)
    pb = np.zeros((size,) + rest, dtype=dtype)
    pa[:length] = a
    pb[:length] = b
    ea, eb = pa.copy(), pb.copy()

    step = 1
    while step < size:
        va = ea.reshape((size // (2 * step), 2 * step) + rest)
        vb = eb.reshape((size // (2 * step), 2 * step) + rest)
        vb[:, 2 * step - 1] += va[:, 2 * step - 1] * vb[:, step - 1]
        va[:, 2 * step - 1] *= va[:, step - 1]
        step *= 2

    ea[size - 1] = 1
    eb[size - 1] = 0
    step = size // 2
    while step >= 1:
        va = ea.reshape((size // (2 * step), 2 * step) + rest)
        vb = eb.reshape((size // (2 * step), 2 * step) + rest)
        la, lb = va[:, step - 1].copy(), vb[:, step - 1].copy()
        ra, rb = va[:, 2 * step - 1].copy(), vb[:, 2 * step - 1].copy()
        va[:, step - 1], vb[:, step - 1] = ra, rb
        va[:, 2 * step - 1] = la * ra
        vb[:, 2 * step - 1] = la * rb + lb
        step //= 2

    # eb holds the exclusive prefix state h_{t-1}
    return (pa * eb + pb)[:length]


_RECURRENCES = {"sequential": recurrence_sequential, "parallel": recurrence_parallel}


def _along_time(fn, a, b, axis):
    a, b = np.broadcast_arrays(a, b)
    h = fn(np.moveaxis(a, axis, 0), np.moveaxis(b, axis, 0))
    return np.moveaxis(h, 0, axis)


# --- materialized selective scans (numpy) -----------------------------------------

def _discretized(x, delta, A, B):
    # x, delta: [..., L, E]; A: [E, n]; B: [..., L, n]
    z = delta[..., None] * A
    ez = np.exp(z)
    ph = _phi(z)
    bbar = delta[..., None] * ph * B[..., None, :]
    return z, ez, ph, bbar, bbar * x[..., None]


def _scan(method, x, delta, A, B, C, D=None):
    x = np.asarray(x)
    delta, A, B, C = map(np.asarray, (delta, A, B, C))
    _, ez, _, _, bx = _discretized(x, delta, A, B)
    h = _along_time(_RECURRENCES[method], ez, bx, x.ndim - 2)
    y = np.einsum("...en,...n->...e", h, C)
    if D is not None:
        y = y + np.asarray(D) * x
    return y


def scan_sequential(x, delta, A, B, C, D=None):
    """Selective scan by direct recurrence.

    ``x`` and ``delta`` are ``[..., L, E]``, ``A`` is ``[E, n]`` (negative),
    ``B`` and ``C`` are ``[..., L, n]``; ``D`` is an optional ``[E]`` skip.
    """
    return _scan("sequential", x, delta, A, B, C, D)


def scan_parallel(x, delta, A, B, C, D=None):
    """Selective scan via the associative parallel prefix; same contract as
    :func:`scan_sequential`."""
    return _scan("parallel", x, delta, A, B, C, D)


def scan_discrete(a_bar, b_bar, c, x, d=None, method="sequential"):
    """Recurrence on already-discretized per-step parameters.

    ``a_bar``, ``b_bar``, ``c``: ``[L, n]`` (or ``[n]`` time-invariant),
    ``x``: ``[L]``. Returns ``y[L]``.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    a = np.broadcast_to(np.asarray(a_bar, dtype=np.float64), (L, np.shape(a_bar)[-1]))
    bx = np.broadcast_to(np.asarray(b_bar, dtype=np.float64), a.shape) * x[:, None]
    h = _RECURRENCES[method](a, bx)
    y = (h * np.broadcast_to(np.asarray(c, dtype=np.float64), a.shape)).sum(axis=-1)
    return y if d is None else y + d * x


def ssm_conv_kernel(a_bar, b_bar, c, L: int) -> np.ndarray:
    """Global kernel ``K[j] = C A^j B`` of a time-invariant diagonal SSM.

    Parameters are ``[n]`` or ``[E, n]``; the result is ``[L]`` or ``[L, E]``.
    Per-step (``[L, ...]``-shaped, time-varying) parameters are rejected.
    """
    arrs = [np.asarray(v, dtype=np.float64) for v in (a_bar, b_bar, c)]
    for v in arrs:
        if v.ndim == 3 or (v.ndim == 2 and v.shape[0] == L and L > 1 and not np.all(v == v[:1])):
            raise ContractViolation(
                "convolutional form requires time-invariant parameters; "
                "selective (per-step) parameters must use a scan")
    a, b, cc = arrs
    powers = a[None, ...] ** np.arange(L).reshape((L,) + (1,) * a.ndim)
    return (cc * powers * b).sum(axis=-1)


def causal_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``y_t = sum_{j<=t} K_j x_{t-j}`` along axis 0 (FFT, per trailing channel)."""
    L = x.shape[0]
    nfft = 1 << (2 * L - 1).bit_length()
    X = np.fft.rfft(x, n=nfft, axis=0)
    K = np.fft.rfft(kernel, n=nfft, axis=0)
    return np.fft.irfft(X * K, n=nfft, axis=0)[:L]


# --- differentiable selective scan -----------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   reverse: bool = False, method: str = "fused") -> Tensor:
    """Differentiable selective scan over ``u[G, L, E]``.

    ``reverse=True`` scans from the last token to the first.
    """
    if method not in METHODS:
        raise ValueError(f"unknown scan method {method!r}; choose from {METHODS}")
    args = (u, delta, A, B, C, D)
    ud, dd, Ad, Bd, Cd, Dd = (t.data for t in args)
    dtype = ud.dtype

    if method == "fused":
        y = _kernels.scan_fwd(ud, dd, Ad, Bd, Cd, Dd, reverse)

        def backward(g):
            grads = _kernels.scan_bwd(ud, dd, Ad, Bd, Cd, Dd, reverse, np.ascontiguousarray(g))
            return tuple(gr.astype(dtype, copy=False) for gr in grads)

        return Tensor._make(y, args, backward, "selective_scan")

    rec = _RECURRENCES[method]
    if reverse:
        ud, dd, Bd, Cd = (np.ascontiguousarray(v[:, ::-1]) for v in (ud, dd, Bd, Cd))
    z, ez, ph, bbar, bx = _discretized(ud, dd, Ad, Bd)
    h = _along_time(rec, ez, bx, 1)
    y = np.einsum("gten,gtn->gte", h, Cd) + Dd * ud
    if reverse:
        y = y[:, ::-1]
    y = np.ascontiguousarray(y, dtype=dtype)

    def backward(g):
        gy = g[:, ::-1] if reverse else g
        gC = np.einsum("gte,gten->gtn", gy, h)
        gh_direct = gy[..., None] * Cd[:, :, None, :]
        a_next = np.zeros_like(ez)
        a_next[:, :-1] = ez[:, 1:]
        gh = _along_time(rec, a_next[:, ::-1], gh_direct[:, ::-1], 1)[:, ::-1]
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        g_ez = gh * h_prev
        g_bbar = gh * ud[..., None]
        gu = (gh * bbar).sum(-1) + gy * Dd
        gB = (g_bbar * dd[..., None] * ph).sum(axis=2)
        gdelta = (g_ez * Ad * ez + g_bbar * Bd[:, :, None, :] * ez).sum(-1)
        gA = (g_ez * dd[..., None] * ez
              + g_bbar * Bd[:, :, None, :] * dd[..., None] ** 2 * _dphi(z, ez, ph)).sum(axis=(0, 1))
        gD = (gy * ud).sum(axis=(0, 1))
        if reverse:
            gu, gdelta, gB, gC = (v[:, ::-1] for v in (gu, gdelta, gB, gC))
        return tuple(np.ascontiguousarray(v, dtype=dtype) for v in (gu, gdelta, gA, gB, gC, gD))

    return Tensor._make(y, args, backward, "selective_scan")


@dataclass
class SelectiveSSMParams:
    """One scan direction's parameters.

    ``a_log[E, n]`` (A = -exp(a_log)), ``w_delta[E, E]`` + ``b_delta[E]``,
    ``w_b[E, n]``, ``w_c[E, n]``, ``d[E]``. Weights are stored [in, out].
    """

    a_log: Tensor
    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    w_c: Tensor
    d: Tensor

    @classmethod
    def from_scope(cls, p) -> "SelectiveSSMParams":
        return cls(p["a_log"], p["w_delta"], p["b_delta"], p["w_b"], p["w_c"], p["d"])

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def A(self) -> Tensor:
        return mul(exp(self.a_log), -1.0)

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent ``(delta, B, C)`` for tokens ``x[G, L, E]``."""
        delta = softplus(linear(x, self.w_delta, self.b_delta))
        return delta, linear(x, self.w_b), linear(x, self.w_c)


def init_ssm_params(rng: np.random.Generator, channels: int, state_dim: int,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict[str, np.ndarray]:
    """S4D-real style init: A = -(1..n) per channel, D = 1, softplus(b_delta)
    uniform in ``[dt_min, dt_max]``."""
    bound = 1.0 / np.sqrt(channels)
    dt = rng.uniform(dt_min, dt_max, size=channels)
    return {
        "a_log": np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))),
        "b_delta": dt + np.log(-np.expm1(-dt)),  # inverse softplus
        "d": np.ones(channels),
        "w_b": rng.uniform(-bound, bound, size=(channels, state_dim)),
        "w_c": rng.uniform(-bound, bound, size=(channels, state_dim)),
        "w_delta": rng.uniform(-bound, bound, size=(channels, channels)) * 0.1,
    }


def ssm_forward(x: Tensor, params: SelectiveSSMParams, reverse: bool = False,
                method: str = "fused") -> Tensor:
    delta, B, C = params.project(x)
    return selective_scan(x, delta, params.A(), B, C, params.d, reverse=reverse, method=method)


def bi_scan(x: Tensor, fwd: SelectiveSSMParams, bwd: SelectiveSSMParams,
            method: str = "fused") -> Tensor:
    """Forward scan plus an independently parameterized backward scan."""
    y_f = ssm_forward(x, fwd, method=method)
    y_b = ssm_forward(x, bwd, reverse=True, method=method)
    return add(y_f, y_b)


def bi_scan_by_flips(x: Tensor, fwd: SelectiveSSMParams, bwd: SelectiveSSMParams,
                     method: str = "sequential") -> Tensor:
    """Literal ``scan(x) + reverse(scan(reverse(x)))``; reference for :func:`bi_scan`."""
    return add(ssm_forward(x, fwd, method=method),
               flip(ssm_forward(flip(x, 1), bwd, method=method), 1))
