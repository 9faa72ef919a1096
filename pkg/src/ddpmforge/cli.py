"""Command-line entry point: ``ddpmforge {train,sample,eval,reproduce,config}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataset import denormalize
from .experiment import (
    ARMS,
    evaluate,
    generate_arm,
    reference_set,
    reproduce,
    train_checkpoint,
    write_loss_log,
    write_table,
)
from .ppm import write_image
from .sampler import SampleRequest, sample
from .trainer import TrainingDiverged

logger = logging.getLogger("ddpmforge")


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    try:
        ckpt, result = train_checkpoint(cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    log_path = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.txt")
    write_loss_log(result.losses, log_path)
    if not args.no_figure and result.losses:
        from .plotting import plot_loss_curve

        plot_loss_curve(result.losses, result.steps_per_epoch, log_path.with_suffix(".png"))
    print(f"wrote {out} ({result.step_count} steps) and {log_path}")
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    num_classes = ckpt.run_config.num_classes
    if not 0 <= args.class_index < num_classes:
        print(f"error: class {args.class_index} outside [0, {num_classes})", file=sys.stderr)
        return 2
    req = SampleRequest(args.class_index, args.w, args.count, args.seed, args.use_ema)
    images = sample(ckpt.params, ckpt.run_config.schedule(), req, ckpt.ema_shadow, cond_only=args.cond_only)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_image(denormalize(img), out_dir / f"sample_{args.class_index}_{args.seed}_{i}.ppm")
    print(f"wrote {len(images)} images to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.load(args.config) if args.config else ckpt.run_config
    ref, ref_labels = reference_set(cfg)
    if args.arm == "reference":
        gen, gen_labels = ref, ref_labels
    else:
        if ckpt.run_config.image_size != cfg.image_size:
            print(
                f"error: checkpoint generates {ckpt.run_config.image_size}px images, "
                f"reference set is {cfg.image_size}px",
                file=sys.stderr,
            )
            return 2
        gen, gen_labels = generate_arm(ckpt, cfg, args.arm, args.seed)
    report = evaluate(gen, ref, args.arm, args.seed, cfg.feature_dim)
    report_path = Path(args.report)
    report_path.write_text(report.line() + "\n")
    if not args.no_figure:
        from .plotting import plot_sample_grid

        plot_sample_grid(gen, gen_labels, report_path.with_suffix(".png"),
                         title=f"{args.arm}: fid {report.fid:.3f}")
    print(report.line())
    return 0


def cmd_reproduce(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes = reproduce(cfg, tuple(args.seeds), out_dir)
    write_table(outcomes, out_dir / "fid_table.csv")
    base = float(np.median([o.baseline.fid for o in outcomes]))
    enh = float(np.median([o.enhanced.fid for o in outcomes]))
    print(f"median fid baseline={base:.6f} enhanced={enh:.6f}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(RunConfig().to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddpmforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="defaults to <out>.loss.txt")
    p.add_argument("--no-figure", action="store_true", help="skip the loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write guided samples as PPM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--w", type=float, default=3.0, help="guidance scale")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--use-ema", action="store_true")
    p.add_argument("--cond-only", action="store_true", help="skip the unconditional pass (w is ignored)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score one arm against the reference set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to the config stored in the checkpoint")
    p.add_argument("--arm", choices=ARMS + ("reference",), required=True)
    p.add_argument("--seed", type=int, default=0, help="sampling and projector seed")
    p.add_argument("--report", required=True)
    p.add_argument("--no-figure", action="store_true", help="skip the sample-grid PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="train and compare both arms over several seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("config", help="print the default config document")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: bad checkpoint: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
