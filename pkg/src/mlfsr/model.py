"""MLFSR network: encoder, MGI (EPI-/SA-Mamba built from BiSS blocks), SAM,
reconstructor, and a small softmax-attention teacher for feature distillation."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import ssm
from .lightfield import Layout, tokenize, untokenize
from .synth import bicubic_resize
from .tensor import (ParamStore, Tensor, add, conv1d_depthwise, conv2d, layer_norm, linear,
                     matmul, mul, permute, pixel_shuffle, relu, reshape, sigmoid, silu,
                     softmax, split_last)

TEACHERS = ("none", "tiny_attention")


@dataclass
class ModelConfig:
    channels: int = 32
    n_mgi: int = 3
    state_dim: int = 8
    scale: int = 2
    angular: int = 5
    biss_expand: int = 2
    ca_reduction: int = 4
    dwconv_k: int = 4
    share_epi_weights: bool = True
    teacher: str = "none"
    use_epi: bool = True
    use_sa: bool = True
    use_sam: bool = True
    scan_method: str = "fused"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.n_mgi < 1:
            raise ValueError("n_mgi must be >= 1")
        if self.channels % self.ca_reduction:
            raise ValueError(f"channels ({self.channels}) must be divisible by ca_reduction ({self.ca_reduction})")
        if self.teacher not in TEACHERS:
            raise ValueError(f"teacher must be one of {TEACHERS}")
        if self.scan_method not in ssm.METHODS:
            raise ValueError(f"scan_method must be one of {ssm.METHODS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def expanded(self) -> int:
        return self.biss_expand * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- parameter initialization ---------------------------------------------------------

Init = Callable[[np.random.Generator], np.ndarray]


def _uniform(shape, fan_in) -> Init:
    bound = 1.0 / np.sqrt(fan_in)
    return lambda rng: rng.uniform(-bound, bound, size=shape)


def _const(shape, value=0.0) -> Init:
    return lambda rng: np.full(shape, value, dtype=np.float64)


def _biss_specs(prefix: str, cfg: ModelConfig) -> dict[str, Init]:
    c, e, n, k = cfg.channels, cfg.expanded, cfg.state_dim, cfg.dwconv_k
    r = c // cfg.ca_reduction
    specs = {
        f"{prefix}.ln1.gamma": _const(c, 1.0),
        f"{prefix}.ln1.beta": _const(c),
        f"{prefix}.in_proj.w": _uniform((c, 2 * e), c),
        f"{prefix}.conv1d.w": _uniform((k, e), k),
        f"{prefix}.conv1d.b": _const(e),
        f"{prefix}.out_proj.w": _uniform((e, c), e),
        f"{prefix}.ln2.gamma": _const(c, 1.0),
        f"{prefix}.ln2.beta": _const(c),
        f"{prefix}.ca.w1": _uniform((c, r), c),
        f"{prefix}.ca.w2": _uniform((r, c), r),
    }
    for direction in ("ssm_fwd", "ssm_bwd"):
        for name in ("a_log", "b_delta", "d", "w_b", "w_c", "w_delta"):
            specs[f"{prefix}.{direction}.{name}"] = _ssm_init(e, n, name)
    return specs


def _ssm_init(e: int, n: int, name: str) -> Init:
    return lambda rng: ssm.init_ssm_params(rng, e, n)[name]


def _subspace_specs(prefix: str, cfg: ModelConfig, n_paths: int) -> dict[str, Init]:
    c = cfg.channels
    specs: dict[str, Init] = {}
    for j in range(n_paths):
        specs.update(_biss_specs(f"{prefix}.biss.{j}", cfg))
        # zero so each stage starts as an identity residual
        specs[f"{prefix}.conv.{j}.w"] = _const((c, c))
        specs[f"{prefix}.conv.{j}.b"] = _const(c)
    return specs


def _encoder_specs(prefix: str, cfg: ModelConfig) -> dict[str, Init]:
    c = cfg.channels
    return {
        f"{prefix}.conv0.w": _uniform((c, 1, 3, 3), 9),
        f"{prefix}.conv0.b": _const(c),
        f"{prefix}.res.conv1.w": _uniform((c, c, 3, 3), 9 * c),
        f"{prefix}.res.conv1.b": _const(c),
        f"{prefix}.res.conv2.w": _uniform((c, c, 3, 3), 9 * c),
        f"{prefix}.res.conv2.b": _const(c),
    }


def _recon_specs(prefix: str, cfg: ModelConfig) -> dict[str, Init]:
    s2 = cfg.scale ** 2
    return {f"{prefix}.conv.w": _const((s2, cfg.channels, 3, 3)), f"{prefix}.conv.b": _const(s2)}


def param_specs(cfg: ModelConfig) -> dict[str, Init]:
    c = cfg.channels
    specs = _encoder_specs("encoder", cfg)
    for i in range(cfg.n_mgi):
        if cfg.use_epi:
            specs.update(_subspace_specs(f"mgi.{i}.epi", cfg, 1 if cfg.share_epi_weights else 2))
        if cfg.use_sa:
            specs.update(_subspace_specs(f"mgi.{i}.sa", cfg, 2))
        if cfg.use_sam:
            for view in ("spatial", "angular"):
                specs[f"sam.{i}.{view}.w"] = _const((c, c, 1, 1))
                specs[f"sam.{i}.{view}.b"] = _const(c)
    specs.update(_recon_specs("recon", cfg))
    return specs


def teacher_param_specs(cfg: ModelConfig) -> dict[str, Init]:
    c = cfg.channels
    specs = _encoder_specs("teacher.encoder", cfg)
    for i in range(cfg.n_mgi):
        for axis in ("h", "w"):
            p = f"teacher.block.{i}.{axis}"
            specs[f"{p}.ln.gamma"] = _const(c, 1.0)
            specs[f"{p}.ln.beta"] = _const(c)
            for name in ("q", "k", "v"):
                specs[f"{p}.{name}"] = _uniform((c, c), c)
            specs[f"{p}.o"] = _const((c, c))
    specs.update(_recon_specs("teacher.recon", cfg))
    return specs


def _build(specs: dict[str, Init], seed: int, dtype) -> ParamStore:
    store = ParamStore()
    for path in sorted(specs):
        rng = np.random.default_rng([seed, zlib.crc32(path.encode())])
        store[path] = Tensor(np.asarray(specs[path](rng), dtype=dtype))
    return store


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    """Seeded initialization; each parameter draws from its own path-keyed stream."""
    return _build(param_specs(cfg), cfg.seed if seed is None else seed, cfg.dtype)


def init_teacher_params(cfg: ModelConfig, seed: int | None = None) -> ParamStore:
    return _build(teacher_param_specs(cfg), (cfg.seed if seed is None else seed) + 7919, cfg.dtype)


def zero_non_encoder(params: ParamStore, encoder_prefix: str = "encoder") -> None:
    for path, t in params.items():
        if not path.startswith(encoder_prefix):
            t.data[...] = 0


# --- building blocks -----------------------------------------------------------------------

def _grid_to_views(f: Tensor) -> Tensor:
    b, u, v, h, w, c = f.shape
    return permute(reshape(f, (b * u * v, h, w, c)), (0, 3, 1, 2))


def _views_to_grid(x: Tensor, dims) -> Tensor:
    b, u, v, h, w = dims
    return reshape(permute(x, (0, 2, 3, 1)), (b, u, v, h, w, x.shape[1]))


def encoder_init(p, x: Tensor) -> Tensor:
    """Per-view 3x3 conv (1 -> C) and one residual block of two 3x3 convs."""
    b, u, v, h, w, _ = x.shape
    z = _grid_to_views(x)
    f = conv2d(z, p["conv0.w"], p["conv0.b"], padding=1)
    r = conv2d(silu(conv2d(f, p["res.conv1.w"], p["res.conv1.b"], padding=1)),
               p["res.conv2.w"], p["res.conv2.b"], padding=1)
    return _views_to_grid(add(f, r), (b, u, v, h, w))


def channel_attention(t: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze over the token axis, excite per channel: ``t * sigmoid(W2 relu(W1 mean_L t))``."""
    pooled = t.mean(axis=1)
    weights = sigmoid(matmul(relu(matmul(pooled, w1)), w2))
    g, c = weights.shape
    return mul(t, reshape(weights, (g, 1, c)))


def bi_scan_branch(p, x: Tensor, cfg: ModelConfig) -> Tensor:
    e = cfg.expanded
    value, gate = split_last(matmul(x, p["in_proj.w"]), [e, e])
    value = silu(conv1d_depthwise(value, p["conv1d.w"], p["conv1d.b"]))
    y = ssm.bi_scan(value,
                    ssm.SelectiveSSMParams.from_scope(p.scope("ssm_fwd")),
                    ssm.SelectiveSSMParams.from_scope(p.scope("ssm_bwd")),
                    method=cfg.scan_method)
    return matmul(mul(y, silu(gate)), p["out_proj.w"])


def biss_block(p, t: Tensor, cfg: ModelConfig) -> Tensor:
    """``u = t + BiScan(LN(t))``; ``out = u + CA(LN(u))``."""
    u = add(t, bi_scan_branch(p, layer_norm(t, p["ln1.gamma"], p["ln1.beta"]), cfg))
    return add(u, channel_attention(layer_norm(u, p["ln2.gamma"], p["ln2.beta"]), p["ca.w1"], p["ca.w2"]))


def subspace_mamba(p, f: Tensor, layouts: tuple[Layout, Layout], shared: bool, cfg: ModelConfig) -> Tensor:
    """Two residual BiSS + pointwise-conv stages over successive tokenizations."""
    for j, layout in enumerate(layouts):
        k = 0 if shared else j
        t = tokenize(f, layout)
        y = biss_block(p.scope(f"biss.{k}"), t.data, cfg)
        y = add(linear(y, p[f"conv.{k}.w"], p[f"conv.{k}.b"]), t.data)
        f = untokenize(t.with_data(y))
    return f


def epi_mamba(p, f: Tensor, cfg: ModelConfig) -> Tensor:
    return subspace_mamba(p, f, (Layout.EPI_H, Layout.EPI_W), cfg.share_epi_weights, cfg)


def sa_mamba(p, f: Tensor, cfg: ModelConfig) -> Tensor:
    return subspace_mamba(p, f, (Layout.SPATIAL, Layout.ANGULAR), False, cfg)


def mgi_module(p, f: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.use_epi:
        f = epi_mamba(p.scope("epi"), f, cfg)
    if cfg.use_sa:
        f = sa_mamba(p.scope("sa"), f, cfg)
    return f


def _pointwise(f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # a 1x1 conv over [N, C, ...] is the same channel map at every sample
    c_out, c_in = w.shape[:2]
    return linear(f, permute(reshape(w, (c_out, c_in)), (1, 0)), b)


def sam_module(p, f: Tensor) -> Tensor:
    """Spatial then angular sigmoid modulation, each with a residual."""
    attn_s = sigmoid(_pointwise(f, p["spatial.w"], p["spatial.b"]))
    f = add(mul(f, attn_s), f)
    attn_a = sigmoid(_pointwise(f, p["angular.w"], p["angular.b"]))
    return add(mul(f, attn_a), f)


def sam_module_by_views(p, f: Tensor) -> Tensor:
    """SAM evaluated literally on the reshaped spatial [BUV, C, H, W] and
    angular [BHW, C, U, V] views; reference for :func:`sam_module`."""
    b, u, v, h, w, c = f.shape
    spatial = _grid_to_views(f)
    attn = sigmoid(conv2d(spatial, p["spatial.w"], p["spatial.b"]))
    f = _views_to_grid(add(mul(spatial, attn), spatial), (b, u, v, h, w))
    ang = permute(reshape(permute(f, (0, 3, 4, 1, 2, 5)), (b * h * w, u, v, c)), (0, 3, 1, 2))
    attn = sigmoid(conv2d(ang, p["angular.w"], p["angular.b"]))
    out = add(mul(ang, attn), ang)
    out = reshape(permute(out, (0, 2, 3, 1)), (b, h, w, u, v, c))
    return permute(out, (0, 3, 4, 1, 2, 5))


def reconstructor(p, f_deep: Tensor, x_lr: np.ndarray, scale: int) -> Tensor:
    """Per-view 3x3 conv to s^2 channels, pixel shuffle, plus the bicubic upsample."""
    b, u, v, h, w, _ = f_deep.shape
    y = pixel_shuffle(conv2d(_grid_to_views(f_deep), p["conv.w"], p["conv.b"], padding=1), scale)
    y = _views_to_grid(y, (b, u, v, h * scale, w * scale))
    base = bicubic_resize(x_lr, h * scale, w * scale, axes=(-3, -2)).astype(f_deep.dtype)
    return add(y, base)


def _as_input(x_lr, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x_lr, dtype=cfg.dtype)
    if x.ndim == 5:
        x = x[None]
    if x.ndim != 6 or x.shape[-1] != 1:
        raise ValueError(f"expected LR input [B,U,V,H,W,1], got {x.shape}")
    return x


def mlfsr_forward(params: ParamStore, cfg: ModelConfig, x_lr) -> tuple[Tensor, Tensor]:
    """Returns ``(I_SR, f_deep)`` for an LR batch ``[B, U, V, H, W, 1]``."""
    x = _as_input(x_lr, cfg)
    f = encoder_init(params.scope("encoder"), Tensor(x))
    for i in range(cfg.n_mgi):
        f = mgi_module(params.scope(f"mgi.{i}"), f, cfg)
        if cfg.use_sam:
            f = sam_module(params.scope(f"sam.{i}"), f)
    return reconstructor(params.scope("recon"), f, x, cfg.scale), f


# --- teacher --------------------------------------------------------------------------------

def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, return_weights: bool = False):
    """Single-head softmax self-attention over ``x[G, L, C]`` (no positional terms)."""
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    scores = mul(matmul(q, permute(k, (0, 2, 1))), 1.0 / np.sqrt(x.shape[-1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def teacher_forward(params: ParamStore, cfg: ModelConfig, x_lr) -> tuple[Tensor, Tensor]:
    """Encoder, then per block attention over EPI-H and EPI-W sequences with residuals."""
    x = _as_input(x_lr, cfg)
    f = encoder_init(params.scope("teacher.encoder"), Tensor(x))
    for i in range(cfg.n_mgi):
        for axis, layout in (("h", Layout.EPI_H), ("w", Layout.EPI_W)):
            p = params.scope(f"teacher.block.{i}.{axis}")
            t = tokenize(f, layout)
            a = attention(layer_norm(t.data, p["ln.gamma"], p["ln.beta"]), p["q"], p["k"], p["v"])
            f = untokenize(t.with_data(add(t.data, matmul(a, p["o"]))))
    return reconstructor(params.scope("teacher.recon"), f, x, cfg.scale), f


def tiny_attention_teacher(params: ParamStore, cfg: ModelConfig, x_lr) -> Tensor:
    return teacher_forward(params, cfg, x_lr)[1]
