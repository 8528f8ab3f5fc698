"""Fast internal checks behind ``mlfsr selftest``; each prints one PASS/FAIL line."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


def _zoh_hand_case():
    from .ssm import discretize_zoh

    a_bar, b_bar = discretize_zoh(np.array(-1.0), np.array(1.0), np.array(math.log(2.0)))
    err = max(abs(float(a_bar) - 0.5), abs(float(b_bar) - 0.5))
    return err < 1e-12, f"max err {err:.2e}"


def _scan_agreement():
    from .ssm import scan_parallel, scan_sequential

    rng = np.random.default_rng(0)
    L, E, n = 257, 3, 4
    x = rng.standard_normal((L, E))
    delta = rng.uniform(0.01, 0.5, (L, E))
    A = -rng.uniform(0.5, 2.0, (E, n))
    B = rng.standard_normal((L, n))
    C = rng.standard_normal((L, n))
    err = float(np.max(np.abs(scan_sequential(x, delta, A, B, C) - scan_parallel(x, delta, A, B, C))))
    return err < 1e-10, f"max err {err:.2e}"


def _layout_round_trip():
    from .lightfield import Layout, tokenize, untokenize

    x = np.random.default_rng(1).standard_normal((2, 3, 4, 5, 6, 2))
    ok = all(np.array_equal(untokenize(tokenize(x, lay)), x) for lay in Layout)
    return ok, "4 layouts"


def _zero_init_identity():
    from .model import ModelConfig, init_params, mlfsr_forward, zero_non_encoder
    from .synth import upsample
    from .tensor import no_grad

    cfg = ModelConfig(channels=4, n_mgi=1, state_dim=2, angular=2, dtype="float64")
    params = init_params(cfg)
    zero_non_encoder(params)
    x = np.random.default_rng(2).uniform(size=(2, 2, 6, 6, 1))
    with no_grad():
        sr = mlfsr_forward(params, cfg, x)[0].data[0]
    return bool(np.array_equal(sr, upsample(x, 2))), "output == bicubic"


def _scan_gradient():
    from .ssm import SelectiveSSMParams, init_ssm_params, ssm_forward
    from .tensor import Tensor

    rng = np.random.default_rng(3)
    raw = init_ssm_params(rng, 3, 2)
    params = SelectiveSSMParams(**{k: Tensor(v, requires_grad=True) for k, v in raw.items()})
    x0 = rng.standard_normal((1, 5, 3))

    def loss(xv):
        return float(np.sum(ssm_forward(Tensor(xv), params).data ** 2))

    x = Tensor(x0.copy(), requires_grad=True)
    y = ssm_forward(x, params)
    (y * y).sum().backward()
    h, worst = 1e-5, 0.0
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (loss(xp) - loss(xm)) / (2 * h)
        worst = max(worst, abs(fd - x.grad[idx]) / max(1e-8, abs(fd) + abs(x.grad[idx])))
    return worst < 1e-4, f"rel err {worst:.2e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "zoh hand case": _zoh_hand_case,
    "sequential == parallel scan": _scan_agreement,
    "layout round trips": _layout_round_trip,
    "zero-init identity": _zero_init_identity,
    "scan input gradient": _scan_gradient,
}


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as e:  # noqa: BLE001
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
