"""Shared test utilities: finite-difference gradient checks and straight-line
reference implementations written independently of the package code."""

from __future__ import annotations

import math

import numpy as np

from mlfsr.tensor import Tensor

FD_STEP = 1e-5


def rel_err(a, b) -> float:
    """Normwise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (x is perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def grad_check(build, arrays: list[np.ndarray], seed: int = 0, h: float = FD_STEP) -> float:
    """Worst relative error between autodiff and central differences for
    ``sum(build(*tensors) * R)`` with a fixed random projection ``R``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def loss():
        return float(np.sum(build(*[Tensor(a) for a in arrays]).data * proj))

    worst = 0.0
    for a, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, rel_err(analytic, numeric_grad(loss, a, h)))
    return worst


def param_grad_check(loss_fn, params, paths=None, h: float = FD_STEP) -> tuple[float, str]:
    """Finite-difference check of a scalar ``loss_fn()`` over named parameters.

    ``loss_fn`` must build a fresh graph from ``params`` on each call.
    """
    params.zero_grad()
    loss_fn().backward()
    params.fill_missing_grads()
    analytic = {k: params[k].grad.copy() for k in params}
    worst, where = 0.0, ""
    for path in paths or params.keys():
        t = params[path]

        def f():
            return float(loss_fn().data)

        num = numeric_grad(f, t.data, h)
        err = rel_err(analytic[path], num)
        if np.linalg.norm(num) < 1e-12 and np.linalg.norm(analytic[path]) < 1e-12:
            err = 0.0
        if err > worst:
            worst, where = err, path
    return worst, where


# --- reference implementations ------------------------------------------------------------

def exp_series(z: float, terms: int = 20) -> float:
    total, term = 0.0, 1.0
    for k in range(terms):
        total += term
        term *= z / (k + 1)
    return total


def zoh_series(a: float, b: float, delta: float, terms: int = 20) -> tuple[float, float]:
    """(exp(dA), (exp(dA) - 1)/A * B) from truncated power series."""
    z = a * delta
    a_bar = exp_series(z, terms)
    # (e^z - 1)/z = sum_{k>=0} z^k / (k+1)!
    phi, term = 0.0, 1.0
    for k in range(terms):
        phi += term
        term *= z / (k + 2)
    return a_bar, delta * phi * b


def scan_loops(x, delta, A, B, C, D=None):
    """Selective scan with explicit Python loops: x[L,E], delta[L,E], A[E,n], B,C[L,n]."""
    L, E = x.shape
    n = A.shape[1]
    y = np.zeros((L, E))
    for e in range(E):
        h = [0.0] * n
        for t in range(L):
            acc = 0.0
            for k in range(n):
                z = delta[t, e] * A[e, k]
                a_bar = math.exp(z)
                b_bar = (math.expm1(z) / A[e, k]) * B[t, k]
                h[k] = a_bar * h[k] + b_bar * x[t, e]
                acc += C[t, k] * h[k]
            y[t, e] = acc + (0.0 if D is None else D[e] * x[t, e])
    return y


def conv2d_loops(x, w, b, padding):
    n, cin, hh, ww = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = hh + 2 * padding - k + 1, ww + 2 * padding - k + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    out[i, o, r, c] = np.sum(xp[i, :, r:r + k, c:c + k] * w[o]) + (0 if b is None else b[o])
    return out


def psnr_ref(a, b, peak=1.0) -> float:
    se = 0.0
    flat_a, flat_b = np.ravel(a), np.ravel(b)
    for p, q in zip(flat_a, flat_b):
        se += (float(p) - float(q)) ** 2
    mse = se / len(flat_a)
    return math.inf if mse == 0 else 10 * math.log10(peak * peak / mse)


def ssim_ref(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0) -> float:
    """Direct per-window SSIM with an explicit 2D Gaussian weight."""
    r = (window - 1) / 2
    g = np.array([[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma ** 2)) for j in range(window)]
                  for i in range(window)])
    g /= g.sum()
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa = a[i:i + window, j:j + window]
            pb = b[i:i + window, j:j + window]
            ma, mb = np.sum(g * pa), np.sum(g * pb)
            va = np.sum(g * (pa - ma) ** 2)
            vb = np.sum(g * (pb - mb) ** 2)
            cov = np.sum(g * (pa - ma) * (pb - mb))
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def tokenize_loops(x, layout):
    """Token grid built by explicit index loops (raster order per layout)."""
    b, u, v, h, w, c = x.shape
    out = []
    if layout == "spatial":
        for bi in range(b):
            for ui in range(u):
                for vi in range(v):
                    out.append([x[bi, ui, vi, hi, wi] for hi in range(h) for wi in range(w)])
    elif layout == "angular":
        for bi in range(b):
            for hi in range(h):
                for wi in range(w):
                    out.append([x[bi, ui, vi, hi, wi] for ui in range(u) for vi in range(v)])
    elif layout == "epi_h":
        for bi in range(b):
            for vi in range(v):
                for wi in range(w):
                    out.append([x[bi, ui, vi, hi, wi] for ui in range(u) for hi in range(h)])
    elif layout == "epi_w":
        for bi in range(b):
            for ui in range(u):
                for hi in range(h):
                    out.append([x[bi, ui, vi, hi, wi] for vi in range(v) for wi in range(w)])
    return np.array(out)


def randomize(params, seed=0, scale=0.3):
    """Replace zero-init values so every branch carries signal."""
    rng = np.random.default_rng(seed)
    for path, t in params.items():
        if path.endswith("a_log"):
            continue
        if path.endswith("b_delta"):
            t.data[...] = rng.uniform(-2.0, 0.0, t.shape)
        elif path.endswith("gamma"):
            t.data[...] = 1.0 + scale * rng.standard_normal(t.shape)
        else:
            t.data[...] = scale * rng.standard_normal(t.shape)
    return params
