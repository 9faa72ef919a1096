"""
Baseline-versus-enhanced evaluation.

The baseline arm samples with the raw trained weights and no guidance; the
enhanced arm samples with the EMA weights and guidance scale
``RunConfig.guidance_scale``.  Both arms draw identical noise (same seeds)
and are scored against the regenerated training set with one shared
projector.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import class_means, denormalize, generate_dataset, rms_distance, to_arrays
from .metrics import FeatureProjector, fid
from .sampler import SampleRequest, sample
from .trainer import TrainResult, train

logger = logging.getLogger(__name__)

ARMS = ("baseline", "enhanced")


@dataclass(frozen=True)
class EvalReport:
    arm: str
    fid: float
    n_gen: int
    n_ref: int
    projector_seed: int

    def line(self) -> str:
        return (
            f"arm={self.arm} fid={self.fid:.6f} n_gen={self.n_gen} "
            f"n_ref={self.n_ref} projector_seed={self.projector_seed}"
        )

    @classmethod
    def parse(cls, line: str) -> "EvalReport":
        kv = dict(part.split("=", 1) for part in line.split())
        return cls(kv["arm"], float(kv["fid"]), int(kv["n_gen"]), int(kv["n_ref"]), int(kv["projector_seed"]))


def training_arrays(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Preprocessed training set, images in [-1, 1]."""
    images = generate_dataset(cfg.num_classes, cfg.per_class, cfg.source_size, cfg.dataset_seed)
    return to_arrays(images, cfg.image_size)


def reference_set(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training images in [0, 1] pixel space, with labels."""
    x, y = training_arrays(cfg)
    return denormalize(x), y


def train_checkpoint(cfg: RunConfig) -> tuple[Checkpoint, TrainResult]:
    result = train(cfg.train_config(), training_arrays(cfg), cfg.denoiser_config(), cfg.schedule())
    ckpt = Checkpoint(
        run_config=cfg,
        step_count=result.step_count,
        params=result.params,
        ema_shadow=result.ema.shadow,
        rng_note=f"init and data order from seed {cfg.seed}; dataset seed {cfg.dataset_seed}",
    )
    return ckpt, result


def class_sample_seed(seed: int, class_index: int) -> int:
    return seed * 1000 + class_index


def generate_arm(ckpt: Checkpoint, cfg: RunConfig, arm: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``eval_per_class`` samples for every class, in [0, 1] pixel space."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
    enhanced = arm == "enhanced"
    schedule = ckpt.run_config.schedule()
    images, labels = [], []
    for k in range(ckpt.run_config.num_classes):
        req = SampleRequest(
            class_index=k,
            guidance_scale=cfg.guidance_scale if enhanced else 0.0,
            count=cfg.eval_per_class,
            seed=class_sample_seed(seed, k),
            use_ema=enhanced,
        )
        x = sample(ckpt.params, schedule, req, ema_params=ckpt.ema_shadow, cond_only=not enhanced)
        images.append(denormalize(x))
        labels.append(np.full(cfg.eval_per_class, k))
    return np.concatenate(images), np.concatenate(labels)


def evaluate(generated: np.ndarray, reference: np.ndarray, arm: str, projector_seed: int,
             feature_dim: int) -> EvalReport:
    if generated.shape[1:] != reference.shape[1:]:
        raise ValueError(f"image sizes differ: {generated.shape[1:]} vs {reference.shape[1:]}")
    proj = FeatureProjector.create(int(np.prod(reference.shape[1:])), feature_dim, projector_seed)
    return EvalReport(arm, fid(generated, reference, proj), len(generated), len(reference), projector_seed)


def conditional_fidelity(samples: np.ndarray, sample_labels: np.ndarray, means: np.ndarray) -> float:
    """Fraction of samples whose nearest class-mean image is their own class."""
    hits = 0
    for img, k in zip(samples, sample_labels):
        dists = [rms_distance(img, m) for m in means]
        hits += int(np.argmin(dists) == k)
    return hits / len(samples)


@dataclass
class SeedOutcome:
    seed: int
    baseline: EvalReport
    enhanced: EvalReport
    fidelity_enhanced: float
    fidelity_baseline: float
    first_epoch_loss: float
    final_epoch_loss: float
    train_seconds: float
    eval_seconds: float


def run_seed(cfg: RunConfig, seed: int, out_dir: Path | None = None) -> SeedOutcome:
    """Train one model with training seed ``seed`` and evaluate both arms.

    Sampling and the projector use the same ``seed``.
    """
    cfg = cfg.replace(seed=seed)
    t0 = time.perf_counter()
    ckpt, result = train_checkpoint(cfg)
    t1 = time.perf_counter()
    ref, ref_labels = reference_set(cfg)
    means = class_means(ref, ref_labels, cfg.num_classes)
    reports, fidelity, samples = {}, {}, {}
    for arm in ARMS:
        gen, gen_labels = generate_arm(ckpt, cfg, arm, seed)
        reports[arm] = evaluate(gen, ref, arm, seed, cfg.feature_dim)
        fidelity[arm] = conditional_fidelity(gen, gen_labels, means)
        samples[arm] = (gen, gen_labels)
        logger.info("seed %d %s fidelity=%.3f", seed, reports[arm].line(), fidelity[arm])
    t2 = time.perf_counter()
    epochs = result.epoch_means()
    outcome = SeedOutcome(
        seed, reports["baseline"], reports["enhanced"], fidelity["enhanced"], fidelity["baseline"],
        epochs[0] if epochs else float("nan"), epochs[-1] if epochs else float("nan"), t1 - t0, t2 - t1,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / f"seed{seed}.ckpt")
        write_loss_log(result.losses, out_dir / f"seed{seed}.loss.txt")
        from . import plotting

        plotting.plot_loss_curve(result.losses, result.steps_per_epoch, out_dir / f"seed{seed}_loss.png")
        for arm, (gen, labels) in samples.items():
            plotting.plot_sample_grid(gen, labels, out_dir / f"seed{seed}_{arm}_samples.png",
                                      title=f"{arm} (seed {seed}, fid {reports[arm].fid:.3f})")
    return outcome


def write_loss_log(losses, path) -> None:
    with open(path, "w") as fh:
        for step, loss in enumerate(losses):
            fh.write(f"{step},{loss!r}\n")


def read_loss_log(path) -> list[float]:
    with open(path) as fh:
        return [float(line.split(",")[1]) for line in fh if line.strip()]


TABLE_FIELDS = [
    "seed", "baseline_fid", "enhanced_fid", "fidelity_baseline", "fidelity_enhanced",
    "first_epoch_loss", "final_epoch_loss", "train_seconds", "eval_seconds",
]


def outcome_row(o: SeedOutcome) -> dict:
    return {
        "seed": o.seed,
        "baseline_fid": o.baseline.fid,
        "enhanced_fid": o.enhanced.fid,
        "fidelity_baseline": o.fidelity_baseline,
        "fidelity_enhanced": o.fidelity_enhanced,
        "first_epoch_loss": o.first_epoch_loss,
        "final_epoch_loss": o.final_epoch_loss,
        "train_seconds": round(o.train_seconds, 1),
        "eval_seconds": round(o.eval_seconds, 1),
    }


def write_table(outcomes: list[SeedOutcome], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        for o in outcomes:
            writer.writerow(outcome_row(o))


def reproduce(cfg: RunConfig, seeds=(0, 1, 2), out_dir=None) -> list[SeedOutcome]:
    """Run every seed, then write ``fid_table.csv`` and ``fid_comparison.png``."""
    outcomes = [run_seed(cfg, s, out_dir) for s in seeds]
    if out_dir is not None:
        from . import plotting

        write_table(outcomes, Path(out_dir) / "fid_table.csv")
        plotting.plot_fid_comparison(outcomes, Path(out_dir) / "fid_comparison.png")
    return outcomes
