"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, agreement, perturb,
bench-affine. Every subcommand takes ``--config path`` plus repeatable
``--set key=value`` overrides (override wins) and writes its outputs under
``--out``. Exit codes: 0 success, 1 runtime error (one-line ``error:``
message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, digits, experiments, reporting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, build_gen_config, build_train_config,
                     resolve, train_config_to_dict)
from .data import IdxFormatError, generate_affnist_like, generate_multimnist
from .optim import TrainingDiverged
from .training import train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capslab",
        description="capsule-network training, diagnostics and the affine "
                    "robustness benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="synthesize datasets as IDX files")
    common(p)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the "
                                    "configured test split")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", help="compare unrolled vs rolled "
                                         "routing gradients")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--capsules", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("agreement", help="agreement curves with and "
                                         "without routing")
    common(p)

    p = sub.add_parser("perturb", help="decoder sweep over capsule "
                                       "dimensions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0,
                   help="test-set image to perturb")
    p.add_argument("--range", dest="sweep_range", type=float, default=0.25)
    p.add_argument("--step", type=float, default=0.05)

    p = sub.add_parser("bench-affine", help="clean vs affine accuracy for "
                                            "all four model cells")
    common(p)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    cfg = build_gen_config(resolve(args.config, args.overrides))
    out = args.out
    os.makedirs(out, exist_ok=True)

    if cfg.source == "idx":
        base_train = data.load_image_set(cfg.source_train_images,
                                         cfg.source_train_labels)
        base_test = data.load_image_set(cfg.source_test_images,
                                        cfg.source_test_labels)
    else:
        base_train = digits.generate_digit_set(cfg.train_count, cfg.seed,
                                               cfg.base_hw)
        base_test = digits.generate_digit_set(cfg.test_count, cfg.seed + 1,
                                              cfg.base_hw)

    def save(name, s, with_labels2=False):
        data.save_image_set(
            s, os.path.join(out, f"{name}-images.idx"),
            os.path.join(out, f"{name}-labels.idx"),
            os.path.join(out, f"{name}-labels2.idx") if with_labels2
            else None)
        reporting.save_image_montage(out, s.images, name,
                                     name=f"samples_{name}.png")
        print(f"wrote {name}: {len(s)} images "
              f"{s.images.shape[1]}x{s.images.shape[2]}")

    todo = set(cfg.outputs)
    unknown = todo - {"base", "placed", "affine", "multimnist"}
    if unknown:
        raise ConfigError(f"unknown gen-data outputs: {sorted(unknown)}")
    if "base" in todo:
        save("base-train", base_train)
        save("base-test", base_test)
    placed_train = placed_test = None
    if todo & {"placed", "affine"}:
        placed_train = data.place_on_canvas(base_train, cfg.canvas_size,
                                            cfg.seed + 2)
        placed_test = data.place_on_canvas(base_test, cfg.canvas_size,
                                           cfg.seed + 3)
    if "placed" in todo:
        save(f"placed{cfg.canvas_size}-train", placed_train)
        save(f"placed{cfg.canvas_size}-test", placed_test)
    if "affine" in todo:
        affine = generate_affnist_like(placed_test, cfg.seed + 4, cfg.affine)
        save(f"affine{cfg.canvas_size}-test", affine)
    if "multimnist" in todo:
        count = cfg.multimnist_count or len(base_train)
        multi = generate_multimnist(base_train, cfg.seed + 5, count)
        save("multimnist", multi, with_labels2=True)
    return 0


def _train_config(args, extra_raw=None):
    raw = resolve(args.config, args.overrides)
    if extra_raw:
        merged = dict(extra_raw)
        merged.update(raw)
        raw = merged
    return build_train_config(raw)


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, metrics = train(cfg, resume=resume,
                          log=lambda m: print(
                              f"epoch {m.epoch:g} {m.split}: "
                              f"acc={m.accuracy:.4f} "
                              f"margin={m.margin_loss:.4f} "
                              f"recon={m.recon_loss:.2f}"))
    reporting.write_metrics_csv(os.path.join(args.out, "metrics.csv"),
                                metrics)
    save_checkpoint(ckpt, _ensure(args.out, "checkpoints", "final.ckpt"))
    if metrics:
        reporting.save_training_curves(args.out, metrics)
    print(f"checkpoint: {os.path.join(args.out, 'checkpoints', 'final.ckpt')}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    raw = resolve(args.config, args.overrides)
    merged = dict(ckpt.config)
    merged.update(raw)
    cfg = build_train_config(merged)
    from .training import _load_split, evaluate
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    rows = []
    for split in ("train", "test"):
        if not getattr(cfg, f"{split}_images"):
            continue
        res = evaluate(ckpt.params, cfg.model, cfg.routing,
                       _load_split(cfg, split), cfg.batch_size, dtype)
        rows.append([split, res.accuracy, res.margin_loss, res.recon_loss,
                     res.target_agreement, res.nontarget_agreement])
        print(f"{split}: acc={res.accuracy:.4f} margin={res.margin_loss:.4f} "
              f"recon={res.recon_loss:.2f}")
    if not rows:
        raise ConfigError("no dataset paths configured for eval")
    reporting.write_csv(os.path.join(args.out, "report.csv"),
                        ["split", "accuracy", "margin_loss", "recon_loss",
                         "target_agreement", "nontarget_agreement"], rows)
    return 0


def _cmd_gradcheck(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    raw = resolve(args.config, args.overrides)
    merged = dict(ckpt.config)
    merged.update(raw)
    cfg = build_train_config(merged)
    dataset = data.load_image_set(cfg.test_images, cfg.test_labels)
    report = experiments.run_gradcheck(ckpt, dataset, args.capsules,
                                       args.seed, args.out)
    print(f"fraction cosine>0.99: {report['fraction_cosine_gt_0.99']:.3f} "
          f"(mean {report['mean_cosine']:.5f})")
    return 0


def _cmd_agreement(args) -> int:
    cfg = _train_config(args)
    experiments.run_agreement(cfg, args.out,
                              log=lambda m: print(
                                  f"epoch {m.epoch:g} {m.split}: "
                                  f"target={m.target_agreement:.4f} "
                                  f"nontarget={m.nontarget_agreement:.4f}"))
    print(f"wrote {os.path.join(args.out, 'agreement.csv')}")
    return 0


def _cmd_perturb(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    raw = resolve(args.config, args.overrides)
    merged = dict(ckpt.config)
    merged.update(raw)
    cfg = build_train_config(merged)
    dataset = data.load_image_set(cfg.test_images, cfg.test_labels)
    result = experiments.run_perturb(ckpt, dataset, args.index,
                                     args.sweep_range, args.step, args.out)
    print(f"grid: {result['rows']} dims x {result['cols']} steps -> "
          f"{os.path.join(args.out, 'grids', 'perturb.pgm')}")
    return 0


def _cmd_bench_affine(args) -> int:
    raw = resolve(args.config, args.overrides)
    cfg = build_train_config(raw)
    if "affine_test_images" not in raw or "affine_test_labels" not in raw:
        raise ConfigError("bench-affine needs affine_test_images and "
                          "affine_test_labels")
    affine_set = data.load_image_set(raw["affine_test_images"],
                                     raw["affine_test_labels"])
    n_seeds = int(raw.get("bench_seeds", 3))
    if "matched_accuracy" in raw:
        from dataclasses import replace
        cfg = replace(cfg, early_stop_target_accuracy=float(
            raw["matched_accuracy"]))
    result = experiments.run_bench_affine(cfg, affine_set, n_seeds, args.out)
    for name, by_split in result["summary"].items():
        print(f"{name}: clean={by_split['clean'][0]:.4f} "
              f"affine={by_split['affine'][0]:.4f}")
    return 0


def _ensure(out_dir, *parts):
    path = os.path.join(out_dir, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "agreement": _cmd_agreement,
    "perturb": _cmd_perturb,
    "bench-affine": _cmd_bench_affine,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, IdxFormatError, CheckpointError, TrainingDiverged,
            ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
