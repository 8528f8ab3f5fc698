"""Light-field containers, subspace tokenization, views, augmentation and I/O."""

from __future__ import annotations

import enum
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, permute, reshape, flip

LFB_MAGIC = b"LFB1"
_LFB_HEADER = struct.Struct("<4s5H")


class LFBError(ValueError):
    pass


@dataclass
class LightField4D:
    """A [U, V, H, W, C] grid of samples in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim == 4:
            self.data = self.data[..., None]
        if self.data.ndim != 5 or min(self.data.shape) < 1:
            raise ValueError(f"light field must be [U,V,H,W,C] with positive extents, got {self.data.shape}")

    @property
    def u_res(self) -> int:
        return self.data.shape[0]

    @property
    def v_res(self) -> int:
        return self.data.shape[1]

    @property
    def h_res(self) -> int:
        return self.data.shape[2]

    @property
    def w_res(self) -> int:
        return self.data.shape[3]

    @property
    def channels(self) -> int:
        return self.data.shape[4]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, LightField4D) and self.shape == other.shape and np.array_equal(self.data, other.data)


# --- tokenization ----------------------------------------------------------------------

class Layout(str, enum.Enum):
    SPATIAL = "spatial"
    ANGULAR = "angular"
    EPI_H = "epi_h"
    EPI_W = "epi_w"


# axis order of [B,U,V,H,W,C] as (group axes..., sequence axes..., C)
_PERM = {
    Layout.SPATIAL: (0, 1, 2, 3, 4, 5),
    Layout.ANGULAR: (0, 3, 4, 1, 2, 5),
    Layout.EPI_H: (0, 2, 4, 1, 3, 5),
    Layout.EPI_W: (0, 1, 3, 2, 4, 5),
}


@dataclass
class TokenSequenceBatch:
    layout: Layout
    data: "Tensor | np.ndarray"
    origin_dims: tuple[int, int, int, int, int]  # (B, U, V, H, W)

    @property
    def groups(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data) -> "TokenSequenceBatch":
        return TokenSequenceBatch(self.layout, data, self.origin_dims)


def _permute(x, axes):
    return permute(x, axes) if isinstance(x, Tensor) else np.ascontiguousarray(np.transpose(x, axes))


def _reshape(x, shape):
    return reshape(x, shape) if isinstance(x, Tensor) else x.reshape(shape)


def tokenize(x, layout: Layout | str) -> TokenSequenceBatch:
    """Flatten a feature grid ``[B, U, V, H, W, C]`` into ``[G, L, C]`` sequences.

    Tokens within a sequence follow raster order of the two in-sequence axes
    (first outer): spatial (h, w), angular (u, v), EPI-H (u, h), EPI-W (v, w).
    """
    layout = Layout(layout)
    if x.ndim != 6:
        raise ValueError(f"tokenize expects [B,U,V,H,W,C], got shape {x.shape}")
    b, u, v, h, w, c = x.shape
    perm = _PERM[layout]
    dims = x.shape
    g = dims[perm[0]] * dims[perm[1]] * dims[perm[2]]
    seq = dims[perm[3]] * dims[perm[4]]
    data = _reshape(_permute(x, perm), (g, seq, c))
    return TokenSequenceBatch(layout, data, (b, u, v, h, w))


def untokenize(t: TokenSequenceBatch):
    b, u, v, h, w = t.origin_dims
    dims = (b, u, v, h, w, t.channels)
    perm = _PERM[t.layout]
    if t.groups * t.length != b * u * v * h * w:
        raise ValueError(
            f"token batch {t.groups}x{t.length} inconsistent with origin dims {t.origin_dims}")
    x = _reshape(t.data, tuple(dims[a] for a in perm))
    return _permute(x, tuple(np.argsort(perm)))


def reverse_sequence(t: TokenSequenceBatch) -> TokenSequenceBatch:
    if isinstance(t.data, Tensor):
        return t.with_data(flip(t.data, 1))
    return t.with_data(np.ascontiguousarray(t.data[:, ::-1]))


# --- SAI / MacPI ------------------------------------------------------------------------

def sai_to_macpi(lf: np.ndarray) -> np.ndarray:
    """[U,V,H,W,C] -> [H*U, W*V, C] with pixel (h*U+u, w*V+v) = lf[u,v,h,w]."""
    u, v, h, w, c = lf.shape
    return np.ascontiguousarray(lf.transpose(2, 0, 3, 1, 4)).reshape(h * u, w * v, c)


def macpi_to_sai(img: np.ndarray, u: int, v: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[..., None]
    hu, wv, c = img.shape
    if hu % u or wv % v:
        raise ValueError(f"MacPI of size {hu}x{wv} is not divisible by angular extents {u}x{v}")
    h, w = hu // u, wv // v
    return np.ascontiguousarray(img.reshape(h, u, w, v, c).transpose(1, 3, 0, 2, 4))


# --- augmentation ------------------------------------------------------------------------

AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270", "transpose", "antitranspose")


def augment_array(x: np.ndarray, op: str) -> np.ndarray:
    """Geometry-preserving transform of a [U, V, H, W, ...] array.

    Spatial and angular axes are always transformed together so that
    epipolar lines keep their slope.
    """
    if op == "identity":
        return x
    if op == "hflip":
        return np.ascontiguousarray(x[:, ::-1, :, ::-1])
    if op == "vflip":
        return np.ascontiguousarray(x[::-1, :, ::-1])
    if op in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
        y = np.rot90(x, k, axes=(2, 3))
        return np.ascontiguousarray(np.rot90(y, k, axes=(0, 1)))
    if op == "transpose":
        rest = tuple(range(4, x.ndim))
        return np.ascontiguousarray(x.transpose((1, 0, 3, 2) + rest))
    if op == "antitranspose":
        return augment_array(augment_array(x, "transpose"), "rot180")
    raise ValueError(f"unknown augmentation {op!r}; choose from {AUGMENTATIONS}")


def augment(lf_lr: np.ndarray, lf_hr: np.ndarray, op: str) -> tuple[np.ndarray, np.ndarray]:
    return augment_array(lf_lr, op), augment_array(lf_hr, op)


# --- LFB container ------------------------------------------------------------------------

def write_lfb(path, lf: LightField4D | np.ndarray) -> None:
    data = lf.data if isinstance(lf, LightField4D) else np.asarray(lf)
    if data.ndim == 4:
        data = data[..., None]
    if data.ndim != 5:
        raise LFBError(f"LFB payload must be 5-D [U,V,H,W,C], got {data.shape}")
    if any(n > 0xFFFF or n < 1 for n in data.shape):
        raise LFBError(f"extent overflow: {data.shape} does not fit u16 fields")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_LFB_HEADER.pack(LFB_MAGIC, *data.shape))
        f.write(payload)


def read_lfb(path) -> LightField4D:
    raw = Path(path).read_bytes()
    if len(raw) < _LFB_HEADER.size or raw[:4] != LFB_MAGIC:
        raise LFBError(f"{path}: bad magic (not an LFB1 file)")
    _, *dims = _LFB_HEADER.unpack_from(raw)
    if min(dims) < 1:
        raise LFBError(f"{path}: zero extent in header {tuple(dims)}")
    expected = int(np.prod(dims)) * 4
    body = raw[_LFB_HEADER.size:]
    if len(body) != expected:
        raise LFBError(
            f"{path}: truncated payload, header {tuple(dims)} needs {expected} bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    return LightField4D(data)


# --- PGM view grids ----------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise ValueError(f"{path}: malformed PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1  # single whitespace byte after maxval
    dtype = ">u1" if maxval < 256 else ">u2"
    count = w * h
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return arr.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(q.astype(dtype).tobytes())


def view_filename(u: int, v: int) -> str:
    return f"view_{u}_{v}.pgm"


def export_pgm_grid(directory, lf: LightField4D | np.ndarray, maxval: int = 255) -> None:
    data = lf.data if isinstance(lf, LightField4D) else np.asarray(lf)
    if data.ndim == 4:
        data = data[..., None]
    os.makedirs(directory, exist_ok=True)
    for u in range(data.shape[0]):
        for v in range(data.shape[1]):
            write_pgm(Path(directory) / view_filename(u, v), data[u, v, :, :, 0], maxval)


def import_pgm_grid(directory, u_res: int, v_res: int) -> LightField4D:
    views, size = [], None
    for u in range(u_res):
        row = []
        for v in range(v_res):
            path = Path(directory) / view_filename(u, v)
            if not path.exists():
                raise FileNotFoundError(f"missing view file {path}")
            img = read_pgm(path)
            if size is None:
                size = img.shape
            elif img.shape != size:
                raise ValueError(f"dimension mismatch: {path} is {img.shape[0]}x{img.shape[1]}, "
                                 f"expected {size[0]}x{size[1]}")
            row.append(img)
        views.append(row)
    return LightField4D(np.asarray(views, dtype=np.float32)[..., None])
