"""Losses, Adam, learning-rate schedule, checkpoints and the two-phase training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .lightfield import AUGMENTATIONS, augment
from .model import ModelConfig, init_params, init_teacher_params, mlfsr_forward, teacher_forward
from .tensor import ParamStore, Tensor, abs_, backward, no_grad, sub

log = logging.getLogger(__name__)

REFERENCE_EPOCHS = 120  # full-length schedule the halving interval is quoted against
CKPT_MAGIC = b"MLFC"
CKPT_VERSION = 1
METRIC_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_psnr", "train_rec", "train_dist")


@dataclass
class TrainConfig:
    lr: float = 4e-4
    lr_halve_every: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 4
    phase1_epochs: int = 30
    phase2_epochs: int = 10
    lam: float = 0.1
    seed: int = 0
    patch_size: int = 32
    augment: bool = True
    crops_per_scene: int = 1
    grad_clip: float | None = None
    val_every: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.phase1_epochs and self.phase2_epochs and self.phase1_epochs != 3 * self.phase2_epochs:
            raise ValueError(f"phase1:phase2 epochs must be 3:1, got {self.phase1_epochs}:{self.phase2_epochs}")
        if self.batch < 1 or self.patch_size < 1 or self.crops_per_scene < 1 or self.val_every < 1:
            raise ValueError("batch, patch_size, crops_per_scene and val_every must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    @property
    def halve_every(self) -> float:
        """Halving interval rescaled to the configured run length."""
        total = self.total_epochs
        if total == 0 or total >= REFERENCE_EPOCHS:
            return float(self.lr_halve_every)
        return self.lr_halve_every * total / REFERENCE_EPOCHS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- losses ------------------------------------------------------------------------------

def loss_rec(sr: Tensor, hr) -> Tensor:
    """Mean absolute error against the HR target."""
    hr = hr if isinstance(hr, Tensor) else Tensor(np.asarray(hr, dtype=sr.dtype))
    if sr.shape != hr.shape:
        raise ValueError(f"loss_rec shape mismatch: prediction {sr.shape} vs target {hr.shape}")
    return abs_(sub(sr, hr)).mean()


def loss_t2m(student: Tensor, teacher: Tensor) -> Tensor:
    """Mean absolute feature difference; the teacher side never receives gradient."""
    if student.shape != teacher.shape:
        raise ValueError(f"feature shape mismatch: student {student.shape} vs teacher {teacher.shape}; "
                         "check that both networks use the same channel count C")
    return abs_(sub(student, teacher.detach())).mean()


# --- optimizer ------------------------------------------------------------------------------

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 ** math.floor(epoch / cfg.halve_every)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore) -> "AdamState":
        return cls(0, {k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def check_grads(params: ParamStore) -> None:
    for path, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {path} has no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {path}")


def clip_grads(params: ParamStore, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in params.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, in place on ``params`` and ``state``."""
    check_grads(params)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for path, t in params.items():
        g = t.grad.astype(t.data.dtype, copy=False)
        m, v = state.m[path], state.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype, copy=False)


# --- checkpoints --------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamStore
    train_config: TrainConfig | None = None
    adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _table(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    entries, chunks = [], []
    for path in sorted(arrays):
        raw = np.ascontiguousarray(arrays[path], dtype="<f4").tobytes()
        entries.append({"path": path, "shape": list(arrays[path].shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks, offset


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    offset = 0
    tables, payload = {}, []
    sections = {"params": {k: t.data for k, t in ckpt.params.items()}}
    if ckpt.adam is not None:
        sections["adam.m"] = ckpt.adam.m
        sections["adam.v"] = ckpt.adam.v
    for name, arrays in sections.items():
        tables[name], chunks, offset = _table(arrays, offset)
        payload.extend(chunks)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "adam_step": None if ckpt.adam is None else ckpt.adam.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "extra": ckpt.extra,
        "tables": tables,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + b"".join(payload)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise ValueError(f"{source}: truncated header")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    payload = memoryview(buf)[12 + hlen:]
    cfg = ModelConfig.from_dict(header["model_config"])

    def read(table):
        out = {}
        for e in table:
            end = e["offset"] + e["nbytes"]
            if end > len(payload):
                raise ValueError(f"{source}: truncated payload for {e['path']}")
            arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
            out[e["path"]] = arr.astype(cfg.dtype)
        return out

    tables = header["tables"]
    params = ParamStore({k: Tensor(v) for k, v in read(tables["params"]).items()})
    adam = None
    if "adam.m" in tables:
        adam = AdamState(header["adam_step"], read(tables["adam.m"]), read(tables["adam.v"]))
    tcfg = header["train_config"]
    return Checkpoint(cfg, params, None if tcfg is None else TrainConfig.from_dict(tcfg), adam,
                      header["epoch"], header["rng_state"], header["history"], header["extra"])


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return parse_checkpoint(p.read_bytes(), str(p))


# --- data pipeline --------------------------------------------------------------------------------

def _crop(lr: np.ndarray, hr: np.ndarray, patch: int, scale: int, rng: np.random.Generator):
    h, w = lr.shape[2:4]
    ph, pw = min(patch, h), min(patch, w)
    y = int(rng.integers(0, h - ph + 1))
    x = int(rng.integers(0, w - pw + 1))
    return (lr[:, :, y:y + ph, x:x + pw],
            hr[:, :, y * scale:(y + ph) * scale, x * scale:(x + pw) * scale])


def iterate_batches(samples: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig, scale: int,
                    rng: np.random.Generator):
    """Yield ``(lr, hr)`` batches for one epoch; every random draw comes from ``rng``."""
    order = rng.permutation(np.repeat(np.arange(len(samples)), cfg.crops_per_scene))
    for lo in range(0, len(order), cfg.batch):
        lrs, hrs = [], []
        for i in order[lo:lo + cfg.batch]:
            lr, hr = _crop(*samples[i], cfg.patch_size, scale, rng)
            if cfg.augment:
                square = lr.shape[0] == lr.shape[1] and lr.shape[2] == lr.shape[3]
                ops = AUGMENTATIONS if square else ("identity", "hflip", "vflip", "rot180")
                lr, hr = augment(lr, hr, ops[int(rng.integers(len(ops)))])
            lrs.append(lr)
            hrs.append(hr)
        yield np.stack(lrs), np.stack(hrs)


# --- training loop --------------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamStore
    checkpoint: Checkpoint
    history: list[dict]
    dist_start: float | None = None
    dist_end: float | None = None


def _forward_fn(target: str) -> Callable:
    return teacher_forward if target == "teacher" else mlfsr_forward


def _val_psnr(params, mcfg, val, target) -> float:
    from .evaluate import lf_psnr

    fwd = _forward_fn(target)
    vals = []
    with no_grad():
        for _, lr, hr in val:
            sr = fwd(params, mcfg, lr[None])[0].data[0]
            vals.append(lf_psnr(sr, hr))
    return float(np.mean(vals))


def distill_probe(params: ParamStore, teacher: ParamStore, mcfg: ModelConfig, inputs) -> float:
    """Mean feature L1 between student and teacher over ``inputs`` (LR light fields)."""
    vals = []
    with no_grad():
        for lr in inputs:
            fs = mlfsr_forward(params, mcfg, lr[None])[1]
            ft = teacher_forward(teacher, mcfg, lr[None])[1]
            vals.append(loss_t2m(fs, ft).item())
    return float(np.mean(vals))


def train_step(params: ParamStore, mcfg: ModelConfig, lr_batch, hr_batch, *, target: str = "student",
               teacher: ParamStore | None = None, lam: float = 0.0) -> tuple[float, float, float]:
    """Forward, loss and backward for one batch; returns ``(total, rec, dist)``."""
    params.zero_grad()
    sr, feats = _forward_fn(target)(params, mcfg, lr_batch)
    rec = loss_rec(sr, hr_batch)
    total, dist_val = rec, float("nan")
    if teacher is not None:
        with no_grad():
            ft = teacher_forward(teacher, mcfg, lr_batch)[1]
        dist = loss_t2m(feats, ft)
        dist_val = dist.item()
        total = rec + dist * lam
    backward(total, params)
    return total.item(), rec.item(), dist_val


def _resolve_data(data):
    from .synth import load_split

    if isinstance(data, (str, Path)):
        train = load_split(data, "train")
        val = load_split(data, "val")
    else:
        train, val = data
    if not train:
        raise ValueError("training split is empty")
    return [(lr, hr) for _, lr, hr in train], val


def write_metrics_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for row in history:
            wr.writerow({k: ("" if row.get(k) is None else row[k]) for k in METRIC_FIELDS})


def train_run(mcfg: ModelConfig, tcfg: TrainConfig, data, out_dir=None, *, teacher: ParamStore | None = None,
              target: str = "student", resume: Checkpoint | str | Path | None = None,
              stop_after: int | None = None, checkpoint_every: int = 1) -> TrainResult:
    """Phase 1 minimizes the reconstruction loss; phase 2 adds ``lam`` times the
    feature distillation loss against a frozen teacher.

    ``data`` is a dataset directory or ``(train, val)`` lists of ``(name, lr, hr)``.
    ``target="teacher"`` trains the attention teacher instead (phase 1 only).
    ``stop_after`` ends the run after that many total epochs (for resume tests).
    """
    if target not in ("student", "teacher"):
        raise ValueError(f"target must be student or teacher, got {target!r}")
    if target == "teacher" and tcfg.phase2_epochs:
        raise ValueError("the teacher is trained with the reconstruction loss only; set phase2_epochs=0")
    distill = target == "student" and tcfg.phase2_epochs > 0 and mcfg.teacher == "tiny_attention"
    if distill and teacher is None:
        raise ValueError("phase 2 distillation needs a trained teacher; pass a teacher checkpoint "
                         "(train one with target='teacher') or set teacher='none'")
    train, val = _resolve_data(data)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if replace(ckpt.model_config, teacher=mcfg.teacher) != mcfg:
            raise ValueError("checkpoint model config differs from the requested config")
        params, adam = ckpt.params, ckpt.adam
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start, history, extra = ckpt.epoch, list(ckpt.history), dict(ckpt.extra)
    else:
        params = init_teacher_params(mcfg) if target == "teacher" else init_params(mcfg)
        adam = AdamState.for_params(params)
        rng = np.random.default_rng(tcfg.seed)
        start, history, extra = 0, [], {}

    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    probe_inputs = [lr for _, lr, _ in val] or [train[0][0]]
    end = tcfg.total_epochs if stop_after is None else min(stop_after, tcfg.total_epochs)

    def snapshot(epoch):
        return Checkpoint(mcfg, params, tcfg, adam, epoch, rng.bit_generator.state, history, extra)

    for epoch in range(start, end):
        phase = 1 if epoch < tcfg.phase1_epochs else 2
        phase_epoch = epoch if phase == 1 else epoch - tcfg.phase1_epochs
        use_teacher = teacher if (phase == 2 and distill) else None
        if use_teacher is not None and phase_epoch == 0:
            extra["dist_start"] = distill_probe(params, teacher, mcfg, probe_inputs)
        lr = lr_schedule(phase_epoch, tcfg)
        totals, recs, dists = [], [], []
        for lr_b, hr_b in iterate_batches(train, tcfg, mcfg.scale, rng):
            total, rec, dist = train_step(params, mcfg, lr_b, hr_b, target=target,
                                          teacher=use_teacher, lam=tcfg.lam)
            if tcfg.grad_clip is not None:
                clip_grads(params, tcfg.grad_clip)
            adam_step(params, adam, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            totals.append(total)
            recs.append(rec)
            dists.append(dist)
        last = epoch == tcfg.total_epochs - 1
        val_psnr = None
        if val and ((epoch + 1) % tcfg.val_every == 0 or last):
            val_psnr = _val_psnr(params, mcfg, val, target)
        row = {"epoch": epoch, "phase": phase, "lr": lr, "train_loss": float(np.mean(totals)),
               "val_psnr": val_psnr, "train_rec": float(np.mean(recs)),
               "train_dist": float(np.mean(dists)) if use_teacher is not None else None}
        history.append(row)
        log.info("epoch %d phase %d lr %.3g loss %.5f val %s", epoch, phase, lr, row["train_loss"], val_psnr)
        if last and distill:
            extra["dist_end"] = distill_probe(params, teacher, mcfg, probe_inputs)
        if out is not None and ((epoch + 1) % checkpoint_every == 0 or epoch == end - 1):
            save_checkpoint(out / "checkpoint.mlfc", snapshot(epoch + 1))
            write_metrics_csv(out / "metrics.csv", history)

    return TrainResult(params, snapshot(end), history, extra.get("dist_start"), extra.get("dist_end"))
