"""Command-line entry point: ``mlfsr {gen,train,infer,eval,bench,ablate,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("mlfsr")

# flag name -> (section, field) in the JSON config
MODEL_FLAGS = {"channels": "channels", "n_mgi": "n_mgi", "state_dim": "state_dim", "scale": "scale",
               "angular": "angular", "scan_method": "scan_method"}
TRAIN_FLAGS = {"epochs1": "phase1_epochs", "epochs2": "phase2_epochs", "batch": "batch", "lr": "lr",
               "lam": "lam", "patch_size": "patch_size", "crops": "crops_per_scene",
               "grad_clip": "grad_clip", "val_every": "val_every", "halve_every": "lr_halve_every"}


class ValidationError(ValueError):
    pass


def _seed(args, file_cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("MLFSR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"MLFSR_SEED must be an integer, got {env!r}") from None
    return 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{p}: top level must be an object")
    unknown = set(cfg) - {"model", "train", "scene", "seed"}
    if unknown:
        raise ValidationError(f"{p}: unknown config sections {sorted(unknown)}")
    return cfg


def _effective(args, file_cfg: dict):
    """Merge defaults < config file < flags into model and train configs."""
    from .model import ModelConfig
    from .train import TrainConfig

    seed = _seed(args, file_cfg)
    model = {**file_cfg.get("model", {})}
    train = {**file_cfg.get("train", {})}
    for flag, key in MODEL_FLAGS.items():
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if getattr(args, "no_augment", False):
        train["augment"] = False
    # single-phase runs drop the other phase before the epoch-ratio check
    if getattr(args, "phase", None) == "1" or getattr(args, "target", None) == "teacher":
        train["phase2_epochs"] = 0
    model.setdefault("seed", seed)
    train.setdefault("seed", seed)
    for name, section, cls in (("model", model, ModelConfig), ("train", train, TrainConfig)):
        known = set(cls.__dataclass_fields__)
        bad = set(section) - known
        if bad:
            raise ValidationError(f"unknown {name} config keys {sorted(bad)}")
    return ModelConfig(**model), TrainConfig(**train), seed


def _echo(out_dir, payload: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective-config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- subcommands ------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synth import make_dataset

    file_cfg = _load_config(args.config)
    seed = _seed(args, file_cfg)
    scene = file_cfg.get("scene", {})
    size = args.size if args.size is not None else scene.get("h_res", 64)
    angular = args.angular if args.angular is not None else scene.get("u_res", 5)
    if args.scale not in (2, 4):
        raise ValidationError(f"--scale must be 2 or 4, got {args.scale}")
    if args.scenes < 1:
        raise ValidationError("--scenes must be at least 1")
    if size % args.scale:
        raise ValidationError(f"--size {size} is not divisible by --scale {args.scale}")
    ratio = tuple(args.split)
    manifest = make_dataset(args.out, args.scenes, args.scale, ratio, seed, size, size, angular, angular)
    _echo(args.out, {"command": "gen", "scenes": args.scenes, "scale": args.scale, "seed": seed,
                     "size": size, "angular": angular, "split": list(ratio)})
    c = manifest["counts"]
    print(f"wrote {args.scenes} scenes to {args.out}: train {c['train']}, val {c['val']}, test {c['test']}")
    for sc in manifest["scenes"]:
        print(f"  {sc['name']}  {sc['split']:<5}  seed {sc['seed']}  disparity {sc['disparity']:+.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .train import load_checkpoint, train_run, write_metrics_csv

    file_cfg = _load_config(args.config)
    mcfg, tcfg, seed = _effective(args, file_cfg)
    if not Path(args.data, "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {args.data} (manifest.json missing); run `mlfsr gen` first")
    target = args.target
    teacher = None
    if args.phase == "2" and target == "student":
        tcfg = replace(tcfg, phase1_epochs=0) if args.resume is None else tcfg
    if target == "student" and args.phase in ("2", "both") and tcfg.phase2_epochs > 0:
        if args.teacher is None:
            if args.phase == "2" or mcfg.teacher == "tiny_attention":
                raise ValidationError("phase 2 needs a trained teacher: pass --teacher CKPT "
                                      "(create one with `mlfsr train --target teacher`)")
        else:
            teacher = load_checkpoint(args.teacher).params
            mcfg = replace(mcfg, teacher="tiny_attention")
    if args.resume is not None and args.phase == "2":
        ck = load_checkpoint(args.resume)
        if ck.epoch < tcfg.phase1_epochs:
            raise ValidationError(f"--resume checkpoint stopped at epoch {ck.epoch}, before phase 2 "
                                  f"(epoch {tcfg.phase1_epochs})")
    _echo(args.out, {"command": "train", "model": mcfg.to_dict(), "train": tcfg.to_dict(), "seed": seed,
                     "data": str(args.data), "phase": args.phase, "target": target,
                     "teacher": args.teacher, "resume": args.resume})
    result = train_run(mcfg, tcfg, args.data, args.out, teacher=teacher, target=target, resume=args.resume)
    write_metrics_csv(Path(args.out) / "metrics.csv", result.history)
    if result.history:
        plot_training(result.history, Path(args.out) / "training.png")
    for row in result.history:
        val = "" if row["val_psnr"] is None else f"  val {row['val_psnr']:.3f} dB"
        print(f"epoch {row['epoch']:>3}  phase {row['phase']}  lr {row['lr']:.3g}  loss {row['train_loss']:.5f}{val}")
    if result.dist_start is not None and result.dist_end is not None:
        print(f"distillation loss {result.dist_start:.5f} -> {result.dist_end:.5f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.mlfc'}")
    return EXIT_OK


def _model_from_ckpt(path):
    from .model import init_params
    from .train import load_checkpoint

    ck = load_checkpoint(path)
    if any(k.startswith("teacher.") for k in ck.params):
        raise ValidationError(f"{path} holds teacher weights, not a super-resolution model")
    expected = {k: t.shape for k, t in init_params(ck.model_config).items()}
    if {k: t.shape for k, t in ck.params.items()} != expected:
        raise ValidationError(f"{path}: parameters do not match its model config")
    return ck


def cmd_infer(args) -> int:
    import numpy as np

    from .evaluate import infer_full, infer_patched
    from .lightfield import export_pgm_grid, read_lfb, write_lfb

    ck = _model_from_ckpt(args.ckpt)
    cfg = ck.model_config
    lf = read_lfb(args.input)
    if lf.channels != 1:
        raise ValidationError(f"{args.input}: expected a single-channel light field, got {lf.channels}")
    if (lf.u_res, lf.v_res) != (cfg.angular, cfg.angular) and cfg.use_sam:
        log.warning("input angular grid %dx%d differs from the training grid %d", lf.u_res, lf.v_res, cfg.angular)
    if args.mode == "full":
        sr = infer_full(ck.params, cfg, lf.data)
    else:
        sr = infer_patched(ck.params, cfg, lf.data, args.patch, args.overlap)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_lfb(args.out, np.clip(sr, 0, 1))
    if args.pgm is not None:
        export_pgm_grid(args.pgm, np.clip(sr, 0, 1))
    _echo(Path(args.out).parent, {"command": "infer", "ckpt": args.ckpt, "input": args.input, "mode": args.mode,
                                  "patch": args.patch, "overlap": args.overlap})
    print(f"{args.input} {lf.h_res}x{lf.w_res} -> {args.out} {sr.shape[2]}x{sr.shape[3]} ({args.mode})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .synth import load_split

    if not Path(args.data, "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {args.data} (manifest.json missing)")
    scenes = load_split(args.data, args.split)
    if not scenes:
        raise ValidationError(f"split {args.split!r} of {args.data} is empty")
    if args.mode == "bicubic":
        from .model import ModelConfig

        scale = json.loads(Path(args.data, "manifest.json").read_text())["scale"]
        params, cfg = None, ModelConfig(scale=scale)
    else:
        if args.ckpt is None:
            raise ValidationError(f"--ckpt is required for --mode {args.mode}")
        ck = _model_from_ckpt(args.ckpt)
        params, cfg = ck.params, ck.model_config
    report = evaluate(params, cfg, scenes, args.mode, args.patch, args.overlap)
    out = Path(args.out)
    _echo(out, {"command": "eval", "ckpt": args.ckpt, "data": str(args.data), "split": args.split,
                "mode": args.mode, "patch": args.patch, "overlap": args.overlap})
    report.write_csv(out / "eval.csv")
    report.write_timing_csv(out / "eval_timing.csv")
    print(report.table())
    print(f"mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluate import attention_bench_fn, bench_scaling, model_bench_fn
    from .model import init_params
    from .plotting import plot_scaling

    sizes = list(args.sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValidationError("--sizes must be strictly ascending")
    if args.ckpt is not None:
        ck = _model_from_ckpt(args.ckpt)
        params, cfg = ck.params, ck.model_config
    else:
        file_cfg = _load_config(args.config)
        cfg, _, _ = _effective(args, file_cfg)
        params = init_params(cfg)
    out = Path(args.out)
    _echo(out, {"command": "bench", "ckpt": args.ckpt, "model": cfg.to_dict(), "sizes": sizes,
                "reps": args.reps, "warmup": args.warmup, "reference": args.reference})
    reports = [bench_scaling(model_bench_fn(params, cfg), sizes, args.reps, args.warmup, "model")]
    if args.reference:
        reports.append(bench_scaling(attention_bench_fn(), sizes, args.reps, args.warmup, "attention"))
    for rep in reports:
        name = "scaling.csv" if rep.label == "model" else f"scaling_{rep.label}.csv"
        rep.write_csv(out / name)
        print(f"[{rep.label}]")
        for r in rep.rows:
            print(f"  {r.size:>5}  median {r.median_ms:10.1f} ms  iqr {r.iqr_ms:8.1f}  peak {r.peak_bytes / 2**20:8.1f} MiB")
        print(f"  slope {rep.slope:.3f}")
    plot_scaling(reports, out / "scaling.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluate import ablation_run, write_ablation_csv
    from .plotting import plot_ablation
    from .train import load_checkpoint

    file_cfg = _load_config(args.config)
    mcfg, tcfg, seed = _effective(args, file_cfg)
    if not Path(args.data, "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {args.data} (manifest.json missing)")
    teacher = None
    if args.teacher is not None:
        teacher = load_checkpoint(args.teacher).params
        mcfg = replace(mcfg, teacher="tiny_attention")
    elif "t2m_loss" in args.toggles or mcfg.teacher == "tiny_attention":
        raise ValidationError("the t2m_loss ablation needs --teacher CKPT")
    out = Path(args.out)
    _echo(out, {"command": "ablate", "model": mcfg.to_dict(), "train": tcfg.to_dict(), "seed": seed,
                "toggles": list(args.toggles), "teacher": args.teacher})
    rows = ablation_run(mcfg, tcfg, args.data, args.toggles, teacher, out)
    write_ablation_csv(rows, out / "ablation.csv")
    plot_ablation(rows, out / "ablation.png")
    print(f"{'variant':<16}{'params':>9}{'PSNR':>10}{'SSIM':>9}{'dPSNR':>9}{'dSSIM':>9}")
    for r in rows:
        print(f"{r.variant:<16}{r.n_params:>9}{r.psnr:>10.3f}{r.ssim:>9.4f}{r.delta_psnr:>+9.3f}{r.delta_ssim:>+9.4f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(print)
    return EXIT_OK if ok else EXIT_RUNTIME


# --- parser --------------------------------------------------------------------------------------

def _add_model_flags(p) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--channels", type=int, help="feature channels C")
    g.add_argument("--n-mgi", dest="n_mgi", type=int, help="number of MGI modules")
    g.add_argument("--state-dim", dest="state_dim", type=int, help="SSM state size n")
    g.add_argument("--scale", type=int, choices=(2, 4), help="upscaling factor")
    g.add_argument("--angular", type=int, help="angular resolution U=V")
    g.add_argument("--scan-method", dest="scan_method", choices=("fused", "sequential", "parallel"),
                   help="selective-scan implementation")


def _add_train_flags(p) -> None:
    g = p.add_argument_group("training overrides")
    g.add_argument("--epochs1", type=int, help="phase-1 epochs (reconstruction loss)")
    g.add_argument("--epochs2", type=int, help="phase-2 epochs (adds distillation)")
    g.add_argument("--batch", type=int, help="batch size")
    g.add_argument("--lr", type=float, help="initial learning rate")
    g.add_argument("--halve-every", dest="halve_every", type=int,
                   help="learning-rate halving interval at the 120-epoch reference length")
    g.add_argument("--lam", type=float, help="distillation weight lambda")
    g.add_argument("--patch-size", dest="patch_size", type=int, help="LR training crop size")
    g.add_argument("--crops", type=int, help="random crops per scene per epoch")
    g.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient-norm clip (off if unset)")
    g.add_argument("--val-every", dest="val_every", type=int, help="validate every N epochs")
    g.add_argument("--no-augment", action="store_true", help="disable flip/rotation augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlfsr", description="Light-field super-resolution with selective scans.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/numba worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic light-field dataset")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.add_argument("--scale", type=int, default=2, help="downsampling factor (2 or 4)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, help="HR spatial size H=W (default 64)")
    p.add_argument("--angular", type=int, help="angular resolution U=V (default 5)")
    p.add_argument("--split", type=float, nargs=3, default=(0.75, 0.25, 0.0), metavar=("TRAIN", "VAL", "TEST"),
                   help="split ratio (train count is floored)")
    p.add_argument("--config", help="JSON config file (uses its 'scene' and 'seed' entries)")
    p.add_argument("--seed", type=int, help="dataset seed (falls back to MLFSR_SEED, then 0)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the model or the distillation teacher")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    p.add_argument("--config", help="JSON config with 'model', 'train' and 'seed' entries")
    p.add_argument("--phase", choices=("1", "2", "both"), default="both", help="training phases to run")
    p.add_argument("--teacher", help="teacher checkpoint for phase-2 distillation")
    p.add_argument("--target", choices=("student", "teacher"), default="student", help="network to train")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="seed (falls back to MLFSR_SEED, then 0)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one LFB light field")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--in", dest="input", required=True, help="LR light field (.lfb)")
    p.add_argument("--out", required=True, help="output .lfb path")
    p.add_argument("--mode", choices=("full", "patch"), default="full", help="inference scheme")
    p.add_argument("--patch", type=int, default=32, help="LR tile size for patch mode")
    p.add_argument("--overlap", type=int, default=8, help="tile overlap for patch mode")
    p.add_argument("--pgm", help="also export the views as a PGM grid into this directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over a dataset split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="model checkpoint (not needed for bicubic)")
    p.add_argument("--split", default="val", help="dataset split")
    p.add_argument("--mode", choices=("full", "patch", "bicubic"), default="full", help="inference scheme")
    p.add_argument("--patch", type=int, default=32, help="LR tile size for patch mode")
    p.add_argument("--overlap", type=int, default=8, help="tile overlap for patch mode")
    p.add_argument("--out", default=".", help="directory for eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="runtime and memory scaling with spatial size")
    p.add_argument("--ckpt", help="model checkpoint (default: freshly initialized weights)")
    p.add_argument("--config", help="JSON config used when no checkpoint is given")
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128], help="ascending LR sizes H=W")
    p.add_argument("--reps", type=int, default=3, help="timed repetitions per size")
    p.add_argument("--warmup", type=int, default=1, help="untimed warmup runs per size")
    p.add_argument("--reference", action="store_true", help="also time the quadratic attention reference")
    p.add_argument("--out", default=".", help="directory for scaling CSVs and plot")
    p.add_argument("--seed", type=int, help="seed for fresh weights")
    _add_model_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="retrain with modules removed and compare")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config with 'model', 'train' and 'seed' entries")
    p.add_argument("--toggles", nargs="*", default=[], choices=("epi_mamba", "sa_mamba", "sam", "t2m_loss"),
                   help="modules to remove, one variant each")
    p.add_argument("--teacher", help="teacher checkpoint for phase-2 distillation")
    p.add_argument("--out", default=".", help="directory for ablation.csv and plot")
    p.add_argument("--seed", type=int, help="seed (falls back to MLFSR_SEED, then 0)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _set_threads(n: int) -> None:
    if n < 1:
        raise ValidationError("--threads must be positive")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            _set_threads(args.threads)
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
