"""Procedural light fields with known epipolar geometry, and bicubic degradation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .lightfield import LightField4D, write_lfb

TEXTURES = ("noise", "sinusoid", "checker")
MASKS = ("disc", "rect")


@dataclass
class TextureSpec:
    kind: str = "noise"
    cutoff: float = 0.5        # noise: low-pass cutoff as a fraction of Nyquist
    period: float = 8.0        # sinusoid period / checker square size, in pixels
    angle: float = 0.0         # radians
    phase: float = 0.0
    lo: float = 0.1
    hi: float = 0.9


@dataclass
class MaskSpec:
    kind: str = "disc"
    cy: float = 0.5            # centre, as a fraction of the HR extent
    cx: float = 0.5
    ry: float = 0.2            # half-size, as a fraction of the HR extent
    rx: float = 0.2


@dataclass
class LayerSpec:
    texture: TextureSpec
    disparity: float = 0.0     # pixels per view step
    mask: MaskSpec | None = None


@dataclass
class SceneSpec:
    seed: int
    h_res: int = 64
    w_res: int = 64
    u_res: int = 5
    v_res: int = 5
    layers: list[LayerSpec] = field(default_factory=lambda: [LayerSpec(TextureSpec())])
    margin: int | None = None  # texture border in pixels; derived from disparities if None

    def required_margin(self) -> float:
        offset = max((self.u_res - 1) / 2, (self.v_res - 1) / 2)
        return max(abs(l.disparity) for l in self.layers) * offset

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        layers = [LayerSpec(TextureSpec(**l["texture"]), l["disparity"],
                            MaskSpec(**l["mask"]) if l.get("mask") else None) for l in d["layers"]]
        return cls(d["seed"], d["h_res"], d["w_res"], d["u_res"], d["v_res"], layers, d.get("margin"))


# --- textures -----------------------------------------------------------------------------

def _texture(spec: TextureSpec, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    hb, wb = shape
    yy, xx = np.mgrid[0:hb, 0:wb].astype(np.float64)
    if spec.kind == "noise":
        noise = rng.standard_normal(shape)
        fy = np.fft.fftfreq(hb)[:, None]
        fx = np.fft.rfftfreq(wb)[None, :]
        radius = np.sqrt(fy ** 2 + fx ** 2) / 0.5
        lowpass = np.exp(-0.5 * (radius / max(spec.cutoff, 1e-3)) ** 2)
        field_ = np.fft.irfft2(np.fft.rfft2(noise) * lowpass, s=shape)
        lo, hi = field_.min(), field_.max()
        unit = (field_ - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    elif spec.kind == "sinusoid":
        proj = yy * math.cos(spec.angle) + xx * math.sin(spec.angle)
        unit = 0.5 + 0.5 * np.sin(2 * math.pi * proj / spec.period + spec.phase)
    elif spec.kind == "checker":
        c, s = math.cos(spec.angle), math.sin(spec.angle)
        ry, rx = c * yy - s * xx, s * yy + c * xx
        unit = ((np.floor(ry / spec.period) + np.floor(rx / spec.period)) % 2).astype(np.float64)
    else:
        raise ValueError(f"unknown texture kind {spec.kind!r}; choose from {TEXTURES}")
    return spec.lo + (spec.hi - spec.lo) * unit


def _mask(spec: MaskSpec, shape: tuple[int, int], h_res: int, w_res: int, margin: int) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy = (yy - margin - spec.cy * h_res) / max(spec.ry * h_res, 1e-9)
    dx = (xx - margin - spec.cx * w_res) / max(spec.rx * w_res, 1e-9)
    if spec.kind == "disc":
        return (dy ** 2 + dx ** 2 <= 1.0).astype(np.float64)
    if spec.kind == "rect":
        return ((np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)).astype(np.float64)
    raise ValueError(f"unknown mask kind {spec.kind!r}; choose from {MASKS}")


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy, fx = y - y0, x - x0
    y1 = np.minimum(y0 + 1, img.shape[0] - 1)
    x1 = np.minimum(x0 + 1, img.shape[1] - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def generate_lf(spec: SceneSpec) -> LightField4D:
    """Render the HR light field: view (u, v) samples each layer at
    ``(h + d*(u - uc), w + d*(v - vc))``; layers composite back to front."""
    need = spec.required_margin()
    if not all(np.isfinite(l.disparity) for l in spec.layers):
        raise ValueError("layer disparities must be finite")
    if spec.margin is None:
        margin = int(math.ceil(need)) + 2
    else:
        margin = spec.margin
        if need >= margin:
            raise ValueError(f"wrap-margin violation: |d|*max_offset = {need:g} >= margin {margin}")
    rng = np.random.default_rng(spec.seed)
    base = (spec.h_res + 2 * margin, spec.w_res + 2 * margin)
    uc, vc = (spec.u_res - 1) / 2, (spec.v_res - 1) / 2
    hh = np.arange(spec.h_res, dtype=np.float64)[:, None] + margin
    ww = np.arange(spec.w_res, dtype=np.float64)[None, :] + margin
    out = np.zeros((spec.u_res, spec.v_res, spec.h_res, spec.w_res))
    for layer in spec.layers:
        tex = _texture(layer.texture, base, rng)
        mask = None if layer.mask is None else _mask(layer.mask, base, spec.h_res, spec.w_res, margin)
        d = layer.disparity
        for u in range(spec.u_res):
            y = np.broadcast_to(hh + d * (u - uc), (spec.h_res, spec.w_res))
            for v in range(spec.v_res):
                x = np.broadcast_to(ww + d * (v - vc), (spec.h_res, spec.w_res))
                val = _bilinear(tex, y, x)
                if mask is None:
                    out[u, v] = val
                else:
                    m = _bilinear(mask, y, x)
                    out[u, v] = m * val + (1 - m) * out[u, v]
    return LightField4D(out[..., None])


def random_scene(seed: int, h_res=64, w_res=64, u_res=5, v_res=5,
                 disparity_range=(-2.0, 2.0)) -> SceneSpec:
    """A band-limited noise background plus, usually, one masked foreground object."""
    rng = np.random.default_rng([seed, 0x5CE7E])

    def texture(kind=None):
        kind = kind or TEXTURES[rng.integers(len(TEXTURES))]
        lo = rng.uniform(0.0, 0.35)
        return TextureSpec(kind=kind, cutoff=float(rng.uniform(0.25, 0.9)),
                           period=float(rng.uniform(3.0, 12.0)),
                           angle=float(rng.uniform(0, math.pi)), phase=float(rng.uniform(0, 2 * math.pi)),
                           lo=float(lo), hi=float(rng.uniform(lo + 0.4, 1.0)))

    layers = [LayerSpec(texture("noise"), float(rng.uniform(*disparity_range)))]
    if rng.uniform() < 0.75:
        mask = MaskSpec(kind=MASKS[rng.integers(len(MASKS))],
                        cy=float(rng.uniform(0.3, 0.7)), cx=float(rng.uniform(0.3, 0.7)),
                        ry=float(rng.uniform(0.12, 0.28)), rx=float(rng.uniform(0.12, 0.28)))
        layers.append(LayerSpec(texture(), float(rng.uniform(*disparity_range)), mask))
    return SceneSpec(seed=seed, h_res=h_res, w_res=w_res, u_res=u_res, v_res=v_res, layers=layers)


# --- bicubic resampling --------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax <= 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense [n_out, n_in] bicubic resampling operator.

    Antialiased when shrinking (kernel stretched by the inverse scale), with
    half-sample symmetric boundary handling and rows normalized to sum 1.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        left = int(math.floor(center - width / 2))
        taps = np.arange(left, left + int(math.ceil(width)) + 2)
        w = stretch * cubic(stretch * (center - taps))
        idx = taps.copy()
        period = 2 * n_in
        idx = np.mod(idx, period)
        idx = np.where(idx >= n_in, period - 1 - idx, idx)
        np.add.at(m[i], idx, w)
        m[i] /= m[i].sum()
    m.setflags(write=False)
    return m


def bicubic_resize(x: np.ndarray, out_h: int, out_w: int, axes=(-2, -1)) -> np.ndarray:
    """Resample the two given axes of ``x`` to ``(out_h, out_w)``."""
    x = np.moveaxis(np.asarray(x), axes, (-2, -1))
    mh = resize_matrix(x.shape[-2], out_h).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    mw = resize_matrix(x.shape[-1], out_w).astype(mh.dtype)
    y = np.matmul(np.matmul(mh, x), mw.T)
    return np.moveaxis(y, (-2, -1), axes)


def degrade(lf_hr, s: int) -> LightField4D:
    """Per-view bicubic downsampling of an HR light field by ``s``."""
    data = lf_hr.data if isinstance(lf_hr, LightField4D) else np.asarray(lf_hr)
    if data.ndim == 4:
        data = data[..., None]
    h, w = data.shape[2:4]
    if s < 1 or h % s or w % s:
        raise ValueError(f"spatial extents {h}x{w} are not divisible by scale {s}")
    if s == 1:
        return LightField4D(data.copy())
    return LightField4D(bicubic_resize(data, h // s, w // s, axes=(2, 3)))


def upsample(lf_lr, s: int) -> np.ndarray:
    data = lf_lr.data if isinstance(lf_lr, LightField4D) else np.asarray(lf_lr)
    h, w = data.shape[2:4]
    return bicubic_resize(data, h * s, w * s, axes=(2, 3))


# --- disparity measurement -----------------------------------------------------------------

def measure_disparity(lf, search=(-3.0, 3.0), coarse_step=0.05, fine_step=0.002, trim=0.75) -> float:
    """Estimate the dominant per-view shift along the EPI-H direction.

    Each view in the central column is compared with the central view shifted
    by ``d * (u - u0)`` rows; the mean of the smallest ``trim`` fraction of
    absolute residuals is minimized, which discounts occluded pixels.
    """
    data = lf.data if isinstance(lf, LightField4D) else np.asarray(lf)
    data = data[..., 0] if data.ndim == 5 else data
    U, V, H, W = data.shape
    u0, vc = U // 2, V // 2
    ref = data[u0, vc]
    pad = int(math.ceil(max(abs(search[0]), abs(search[1])) * max(u0, U - 1 - u0))) + 2
    if 2 * pad >= H:
        raise ValueError("light field too small for the disparity search range")
    hh = np.arange(pad, H - pad, dtype=np.float64)[:, None]
    ww = np.broadcast_to(np.arange(W, dtype=np.float64)[None, :], (hh.shape[0], W))

    def cost(d):
        # lf[u, vc, h] == lf[u0, vc, h + d*(u - u0)]
        res = [np.abs(_bilinear(ref, np.broadcast_to(hh + d * (u - u0), ww.shape), ww)
                      - data[u, vc, pad:H - pad]) for u in range(U) if u != u0]
        r = np.sort(np.concatenate([r.ravel() for r in res]))
        return float(r[: int(len(r) * trim)].mean())

    grid = np.arange(search[0], search[1] + coarse_step / 2, coarse_step)
    best = min(grid, key=cost)
    fine = np.arange(best - coarse_step, best + coarse_step + fine_step / 2, fine_step)
    return float(min(fine, key=cost))


# --- datasets ----------------------------------------------------------------------------------

def split_counts(n: int, ratio=(0.75, 0.25, 0.0)) -> tuple[int, int, int]:
    if len(ratio) == 2:
        ratio = (ratio[0], ratio[1], 0.0)
    n_train = int(math.floor(n * ratio[0]))
    n_test = min(n - n_train, int(math.floor(n * ratio[2] + 0.5)))
    return n_train, n - n_train - n_test, n_test


def make_dataset(out_dir, n_scenes: int, scale: int = 2, split_ratio=(0.75, 0.25, 0.0), seed: int = 0,
                 h_res: int = 64, w_res: int = 64, u_res: int = 5, v_res: int = 5) -> dict:
    """Write LR/HR LFB pairs per split plus ``manifest.json``; returns the manifest."""
    if scale not in (2, 4):
        raise ValueError(f"scale must be 2 or 4, got {scale}")
    out = Path(out_dir)
    counts = split_counts(n_scenes, split_ratio)
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    scenes = []
    for i, split in enumerate(names):
        spec = random_scene(seed * 100003 + i, h_res, w_res, u_res, v_res)
        hr = generate_lf(spec)
        lr = degrade(hr, scale)
        (out / split).mkdir(parents=True, exist_ok=True)
        stem = f"scene_{i:03d}"
        write_lfb(out / split / f"{stem}_hr.lfb", np.clip(hr.data, 0, 1))
        write_lfb(out / split / f"{stem}_lr.lfb", np.clip(lr.data, 0, 1))
        scenes.append({
            "name": stem,
            "split": split,
            "seed": spec.seed,
            "disparity": spec.layers[0].disparity,
            "layer_disparities": [l.disparity for l in spec.layers],
            "spec": spec.to_dict(),
        })
    manifest = {
        "format": "mlfsr-dataset/1",
        "seed": seed,
        "scale": scale,
        "split_ratio": list(split_ratio),
        "counts": dict(zip(("train", "val", "test"), counts)),
        "scenes": scenes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_split(data_dir, split: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``[(name, lr, hr), ...]`` for one split, in manifest order."""
    from .lightfield import read_lfb

    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for sc in manifest["scenes"]:
        if sc["split"] != split:
            continue
        lr = read_lfb(root / split / f"{sc['name']}_lr.lfb").data
        hr = read_lfb(root / split / f"{sc['name']}_hr.lfb").data
        out.append((sc["name"], lr, hr))
    return out
