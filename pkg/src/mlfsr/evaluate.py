"""Fidelity metrics, full-resolution and patch-merged inference, and benchmarks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, mlfsr_forward
from .tensor import ALLOCATOR, ParamStore, no_grad

log = logging.getLogger(__name__)

PSNR_TABLE_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM over the last two axes, averaged over valid
    windows and any leading (view) axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} is smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _views(lf: np.ndarray) -> np.ndarray:
    lf = np.asarray(lf)
    if lf.ndim == 5:
        lf = lf[..., 0]
    return lf.reshape(-1, lf.shape[-2], lf.shape[-1])


def lf_psnr(sr: np.ndarray, hr: np.ndarray) -> float:
    """Per-view PSNR averaged over the U*V views."""
    vals = [psnr(s, h) for s, h in zip(_views(sr), _views(hr))]
    return float(np.mean(np.minimum(vals, PSNR_TABLE_CAP)))


def lf_ssim(sr: np.ndarray, hr: np.ndarray) -> float:
    return float(np.mean([ssim(s, h) for s, h in zip(_views(sr), _views(hr))]))


# --- inference -----------------------------------------------------------------------------

def infer_full(params: ParamStore, cfg: ModelConfig, lf_lr: np.ndarray) -> np.ndarray:
    """One forward over the whole light field; returns ``[U, V, sH, sW, 1]``."""
    x = np.asarray(lf_lr)
    if x.ndim == 4:
        x = x[..., None]
    with no_grad():
        sr, _ = mlfsr_forward(params, cfg, x[None])
    return sr.data[0]


def tile_starts(n: int, patch: int, overlap: int) -> list[int]:
    """Tile origins along one axis; the last tile is flush with the border."""
    if overlap >= patch:
        raise ValueError(f"overlap ({overlap}) must be smaller than patch ({patch})")
    if patch >= n:
        return [0]
    stride = patch - overlap
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def tile_owner(n: int, patch: int, starts: Sequence[int]) -> np.ndarray:
    """Index of the tile whose centre is nearest to each pixel (ties -> lower index)."""
    centers = np.asarray(starts) + (min(patch, n) - 1) / 2
    dist = np.abs(np.arange(n)[:, None] - centers[None, :])
    return np.argmin(dist, axis=1)


def coverage_mask(h: int, w: int, patch: int, overlap: int) -> np.ndarray:
    """Number of tiles each pixel is taken from after the merge (all ones when valid)."""
    counts = np.zeros((h, w), dtype=np.int64)
    for rows, _ in _axis_plan(h, patch, overlap):
        for cols, _ in _axis_plan(w, patch, overlap):
            counts[np.ix_(rows, cols)] += 1
    return counts


def _axis_plan(n: int, patch: int, overlap: int):
    starts = tile_starts(n, patch, overlap)
    owner = tile_owner(n, patch, starts)
    return [(np.nonzero(owner == i)[0], s) for i, s in enumerate(starts)]


def infer_patched(params: ParamStore, cfg: ModelConfig, lf_lr: np.ndarray,
                  patch: int = 32, overlap: int = 8) -> np.ndarray:
    """Super-resolve overlapping LR tiles (all views) and merge by nearest-centre crop."""
    x = np.asarray(lf_lr)
    if x.ndim == 4:
        x = x[..., None]
    u, v, h, w, _ = x.shape
    if patch >= h and patch >= w:
        log.info("patch %d covers the %dx%d input; using full inference", patch, h, w)
        return infer_full(params, cfg, x)
    s = cfg.scale
    out = np.zeros((u, v, h * s, w * s, 1), dtype=cfg.dtype)
    ph, pw = min(patch, h), min(patch, w)
    for rows, y0 in _axis_plan(h, patch, overlap):
        for cols, x0 in _axis_plan(w, patch, overlap):
            sr = infer_full(params, cfg, x[:, :, y0:y0 + ph, x0:x0 + pw])
            hr_rows = (rows[:, None] * s + np.arange(s)).ravel()
            hr_cols = (cols[:, None] * s + np.arange(s)).ravel()
            out[:, :, hr_rows[:, None], hr_cols[None, :]] = \
                sr[:, :, (hr_rows - y0 * s)[:, None], (hr_cols - x0 * s)[None, :]]
    return out


# --- evaluation report ------------------------------------------------------------------------

@dataclass
class SceneResult:
    name: str
    psnr: float
    ssim: float
    seconds: float


@dataclass
class EvalReport:
    mode: str
    scenes: list[SceneResult] = field(default_factory=list)
    peak_bytes: int = 0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.scenes]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scenes]))

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([s.seconds for s in self.scenes]))

    def write_csv(self, path) -> None:
        """Fidelity table; deterministic for fixed inputs (timings go to :meth:`write_timing_csv`)."""
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["scene", "mode", "psnr", "ssim"])
            for s in self.scenes:
                wr.writerow([s.name, self.mode, f"{s.psnr:.6f}", f"{s.ssim:.6f}"])
            wr.writerow(["mean", self.mode, f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["scene", "mode", "seconds", "peak_bytes"])
            for s in self.scenes:
                wr.writerow([s.name, self.mode, f"{s.seconds:.4f}", ""])
            wr.writerow(["mean", self.mode, f"{self.mean_seconds:.4f}", self.peak_bytes])

    def table(self) -> str:
        lines = [f"{'scene':<14}{'PSNR':>10}{'SSIM':>9}{'sec':>9}"]
        for s in self.scenes:
            lines.append(f"{s.name:<14}{min(s.psnr, PSNR_TABLE_CAP):>10.3f}{s.ssim:>9.4f}{s.seconds:>9.2f}")
        lines.append(f"{'mean':<14}{self.mean_psnr:>10.3f}{self.mean_ssim:>9.4f}{self.mean_seconds:>9.2f}")
        return "\n".join(lines)


def evaluate(params: ParamStore | None, cfg: ModelConfig, scenes, mode: str = "full",
             patch: int = 32, overlap: int = 8) -> EvalReport:
    """``scenes``: iterable of ``(name, lr, hr)``. ``mode`` is full, patch or bicubic."""
    from .synth import upsample

    report = EvalReport(mode)
    ALLOCATOR.reset_peak()
    base = ALLOCATOR.live
    for name, lr, hr in scenes:
        t0 = time.perf_counter()
        if mode == "full":
            sr = infer_full(params, cfg, lr)
        elif mode == "patch":
            sr = infer_patched(params, cfg, lr, patch, overlap)
        elif mode == "bicubic":
            sr = upsample(lr, cfg.scale)
        else:
            raise ValueError(f"unknown inference mode {mode!r}")
        dt = time.perf_counter() - t0
        report.scenes.append(SceneResult(name, lf_psnr(sr, hr), lf_ssim(sr, hr), dt))
    report.peak_bytes = ALLOCATOR.peak - base
    return report


# --- runtime scaling ------------------------------------------------------------------------------

@dataclass
class ScalingRow:
    size: int
    median_ms: float
    iqr_ms: float
    peak_bytes: int


@dataclass
class ScalingReport:
    label: str
    rows: list[ScalingRow]

    @property
    def slope(self) -> float:
        """Least-squares slope of log(median time) against log(pixel count)."""
        x = np.log([r.size ** 2 for r in self.rows])
        y = np.log([r.median_ms for r in self.rows])
        return float(np.polyfit(x, y, 1)[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["size", "median_ms", "iqr_ms", "peak_bytes"])
            for r in self.rows:
                wr.writerow([r.size, f"{r.median_ms:.3f}", f"{r.iqr_ms:.3f}", r.peak_bytes])
            wr.writerow(["slope", f"{self.slope:.4f}", "", ""])


def bench_scaling(fn: Callable[[int], object], sizes: Sequence[int] = (32, 64, 128), reps: int = 3,
                  warmup: int = 1, label: str = "model") -> ScalingReport:
    """Median wall-clock of ``fn(size)`` per size, warmup excluded."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rows = []
    for size in sizes:
        for _ in range(warmup):
            fn(size)
        times = []
        ALLOCATOR.reset_peak()
        base = ALLOCATOR.live
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(size)
            times.append((time.perf_counter() - t0) * 1e3)
        q1, med, q3 = np.percentile(times, [25, 50, 75])
        rows.append(ScalingRow(size, float(med), float(q3 - q1), int(ALLOCATOR.peak - base)))
        log.info("%s size %d: median %.1f ms", label, size, med)
    return ScalingReport(label, rows)


def model_bench_fn(params: ParamStore, cfg: ModelConfig, seed: int = 0) -> Callable[[int], object]:
    rng = np.random.default_rng(seed)
    cache: dict[int, np.ndarray] = {}

    def run(size: int):
        if size not in cache:
            cache[size] = rng.uniform(size=(1, cfg.angular, cfg.angular, size, size, 1)).astype(cfg.dtype)
        with no_grad():
            return mlfsr_forward(params, cfg, cache[size])[0]

    return run


def attention_bench_fn(dim: int = 8, block: int = 1024, seed: int = 0) -> Callable[[int], object]:
    """Full softmax self-attention over the size*size tokens of one view."""
    from .tensor import Tensor

    rng = np.random.default_rng(seed)

    def run(size: int):
        n = size * size
        x = rng.standard_normal((n, dim)).astype(np.float32)
        out = np.empty_like(x)
        for lo in range(0, n, block):
            scores = x[lo:lo + block] @ x.T / np.sqrt(dim)
            ALLOCATOR.acquire(scores.nbytes)
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            out[lo:lo + block] = scores @ x
            ALLOCATOR.release(scores.nbytes)
        return Tensor(out)

    return run


# --- ablations ---------------------------------------------------------------------------------------

ABLATION_TOGGLES = ("epi_mamba", "sa_mamba", "sam", "t2m_loss")


@dataclass
class AblationRow:
    variant: str
    n_params: int
    psnr: float
    ssim: float
    delta_psnr: float
    delta_ssim: float


def ablation_variant(model_cfg: ModelConfig, train_cfg, toggle: str | None):
    from dataclasses import replace

    if toggle is None:
        return model_cfg, train_cfg
    if toggle == "epi_mamba":
        return replace(model_cfg, use_epi=False), train_cfg
    if toggle == "sa_mamba":
        return replace(model_cfg, use_sa=False), train_cfg
    if toggle == "sam":
        return replace(model_cfg, use_sam=False), train_cfg
    if toggle == "t2m_loss":
        return model_cfg, replace(train_cfg, lam=0.0)
    raise ValueError(f"unknown ablation toggle {toggle!r}; choose from {ABLATION_TOGGLES}")


def ablation_run(model_cfg: ModelConfig, train_cfg, data_dir, toggles: Sequence[str],
                 teacher: ParamStore | None = None, out_dir=None) -> list[AblationRow]:
    """Train the full model and each variant with one module removed; report
    validation deltas against the full model."""
    from .synth import load_split
    from .train import train_run

    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {t!r}; choose from {ABLATION_TOGGLES}")
    val = load_split(data_dir, "val")
    rows: list[AblationRow] = []
    base = None
    for toggle in [None, *toggles]:
        mcfg, tcfg = ablation_variant(model_cfg, train_cfg, toggle)
        sub = None if out_dir is None else Path(out_dir) / (toggle or "full")
        result = train_run(mcfg, tcfg, data_dir, out_dir=sub, teacher=teacher)
        rep = evaluate(result.params, mcfg, val, "full")
        if base is None:
            base = rep
        rows.append(AblationRow(f"w/o {toggle}" if toggle else "full", result.params.count(),
                                rep.mean_psnr, rep.mean_ssim,
                                rep.mean_psnr - base.mean_psnr, rep.mean_ssim - base.mean_ssim))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["variant", "n_params", "psnr", "ssim", "delta_psnr", "delta_ssim"])
        for r in rows:
            wr.writerow([r.variant, r.n_params, f"{r.psnr:.6f}", f"{r.ssim:.6f}",
                         f"{r.delta_psnr:+.6f}", f"{r.delta_ssim:+.6f}"])
