"""Command-line entry points.

    wiser train <config>
    wiser eval <checkpoint> <dataset_root> [--split S] [--ten-crop]
               [--mode full|residual_only|slice_only] [--batch-size B]
    wiser gradcheck [--scope ops|blocks|model|all] [--seed K]
    wiser synth [--classes N] [--size S] [--layered-frac F] [--seed K]
                [--out DIR] [--train-per-class N] [--test-per-class N]
    wiser report <metrics.log | run_dir>

Exit codes: 0 success, 1 failed run or failed checks, 2 bad input
(config errors, missing paths, geometry mismatches).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import checkpoint as ckpt
from . import checks, data, evaluate, report, synth
from .config import ConfigError, config_digest, load_config
from .model import MODES, WiserModel
from .optim import DivergenceError, train_loop
from .tensor import ShapeError


class UserError(Exception):
    """Input problem; maps to exit code 2."""


def _load_split(root: str, split: str):
    if not os.path.isdir(root):
        raise UserError(f"dataset root does not exist: {root}")
    try:
        return data.load_dataset(root, split)
    except data.FormatError as e:
        raise UserError(str(e)) from e


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise UserError(f"cannot read config {args.config}: {e}")
    cfg = load_config(args.config)
    samples, names = _load_split(cfg.dataset_root, "train")
    if len(names) != cfg.model.num_classes:
        raise UserError(f"dataset lists {len(names)} classes but the model "
                        f"expects {cfg.model.num_classes}")

    augment_fn = None
    eval_resize = min(cfg.model.input_size)
    if cfg.augment.enabled:
        pca_basis = None
        if cfg.augment.pca_sigma > 0:
            _, cov = data.color_covariance(samples)
            eigvals, eigvecs = data.jacobi_eigh3(cov)
            pca_basis = (eigvals, eigvecs)
        augment_fn = data.make_augmenter(cfg.augment, cfg.seed, pca_basis)
        eval_resize = cfg.augment.resize_min_side
    else:
        h, w = cfg.model.input_size
        for s in samples:
            if s.pixels.shape != (3, h, w):
                raise UserError(f"sample {s.id} is {s.pixels.shape[1]}x{s.pixels.shape[2]} "
                                f"but augmentation is off and the model wants {h}x{w}")

    model = WiserModel(cfg.model, seed=cfg.seed)
    mean, std = data.channel_stats(samples)
    model.buffers["input_norm.mean"] = mean
    model.buffers["input_norm.std"] = std

    os.makedirs(cfg.output_dir, exist_ok=True)
    digest = config_digest(text)
    metrics_path = os.path.join(cfg.output_dir, "metrics.log")
    log_f = open(metrics_path, "w", encoding="utf-8")

    def on_log(line):
        log_f.write(line + "\n")
        log_f.flush()

    def on_checkpoint(iteration, mdl, state):
        path = os.path.join(cfg.output_dir, f"iter_{iteration}.ckpt")
        ckpt.save_checkpoint(path, iteration, mdl, state, digest, eval_resize)

    try:
        result = train_loop(model, samples, cfg.optimizer, cfg.seed,
                            augment_fn=augment_fn, log_interval=cfg.log_interval,
                            on_log=on_log, checkpoint_interval=cfg.checkpoint_interval,
                            on_checkpoint=on_checkpoint)
    except DivergenceError as e:
        log_f.close()
        path = os.path.join(cfg.output_dir, "final.ckpt")
        ckpt.save_checkpoint(path, e.iteration, model, None, digest, eval_resize)
        print(f"{e}; last good parameters saved to {path}", file=sys.stderr)
        return 1
    finally:
        if not log_f.closed:
            log_f.close()

    final = os.path.join(cfg.output_dir, "final.ckpt")
    ckpt.save_checkpoint(final, result.state.iteration, model, result.state, digest, eval_resize)
    figures = report.render_training_report(metrics_path, cfg.output_dir)
    print(f"trained {result.state.iteration} iterations")
    print(f"checkpoint: {final}")
    print(f"metrics: {metrics_path}")
    for p in figures:
        print(f"figure: {p}")
    return 0


def cmd_eval(args) -> int:
    try:
        state = ckpt.load_checkpoint(args.checkpoint)
    except (ckpt.CheckpointError, OSError) as e:
        raise UserError(f"cannot load checkpoint {args.checkpoint}: {e}")
    if args.mode is not None and args.mode != state.spec.mode:
        raise UserError(f"checkpoint was trained in mode {state.spec.mode!r}; "
                        f"--mode {args.mode!r} would change the head geometry")
    try:
        model = state.build_model()
    except ShapeError as e:
        raise UserError(f"checkpoint state is inconsistent: {e}")
    samples, names = _load_split(args.dataset_root, args.split)
    if len(names) != model.spec.num_classes:
        raise UserError(f"dataset lists {len(names)} classes but the checkpoint "
                        f"expects {model.spec.num_classes}")
    res = evaluate.evaluate(model, samples, batch_size=args.batch_size,
                            ten=args.ten_crop, eval_resize=state.eval_resize)
    print(f"top1={res.top1:.4f} top5={res.top5:.4f} n={res.count}")
    return 0


def cmd_gradcheck(args) -> int:
    scopes = ("ops", "blocks", "model") if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        for case in checks.run_scope(scope, seed=args.seed):
            status = "PASS" if case.passed else "FAIL"
            print(f"{status} [{case.scope}] {case.name}: "
                  f"max_rel_err={case.result.max_rel_err:.3e} "
                  f"(tol {case.tolerance:g}, {case.result.checked} elements)")
            if not case.passed:
                failed += 1
                print(f"     worst: {case.result.worst}")
    if failed:
        print(f"{failed} gradient check(s) failed")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        num_classes=args.classes, image_size=args.size,
        train_per_class=args.train_per_class, test_per_class=args.test_per_class,
        layered_fraction=args.layered_frac, seed=args.seed)
    try:
        spec.validate()
    except ValueError as e:
        raise UserError(str(e))
    counts = synth.write_dataset(args.out, spec)
    print(f"wrote {counts['train']} train and {counts['test']} test samples "
          f"({args.classes} classes) under {args.out}")
    return 0


def cmd_report(args) -> int:
    path = args.path
    if os.path.isdir(path):
        path = os.path.join(path, "metrics.log")
    if not os.path.isfile(path):
        raise UserError(f"no metrics log at {path}")
    try:
        figures = report.render_training_report(path)
    except report.MetricsParseError as e:
        raise UserError(str(e))
    for p in figures:
        print(f"figure: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wiser",
                                description="two-branch image classifier workbench")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset_root")
    e.add_argument("--split", default="test")
    e.add_argument("--ten-crop", action="store_true")
    e.add_argument("--mode", choices=MODES, default=None,
                   help="assert the checkpoint's branch mode")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--scope", choices=("ops", "blocks", "model", "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--layered-frac", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="data/synth")
    s.add_argument("--train-per-class", type=int, default=200)
    s.add_argument("--test-per-class", type=int, default=50)
    s.set_defaults(fn=cmd_synth)

    r = sub.add_parser("report", help="render figures from a metrics log")
    r.add_argument("path", help="metrics.log or a run directory")
    r.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UserError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ShapeError, data.FormatError, ckpt.CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
