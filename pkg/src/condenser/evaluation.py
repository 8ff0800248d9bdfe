"""Downstream evaluation: train fresh classifiers on a candidate set and
report test accuracy.

Both the distilled set and the random-real baseline flow through the same
``evaluate_images`` entry point with the same settings object, and each
report carries a hash of everything that shaped the trainer, so runs can
prove they were compared under identical conditions.  Reports also record
the efficiency axes (optimizer steps, wall time, estimated flops).

``ablation_sweep`` drives the whole pipeline (pool, distillation,
evaluation) across one varied knob and tabulates accuracy per value.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import apply_plan, sample_plan
from .datasets import Dataset
from .distill import DistillSettings, SyntheticSet, distill, flops_estimate
from .errors import ConfigError
from .modelpool import ModelPool, build_pool
from .networks import accuracy, sgd_step, wrap_params


@dataclass
class TrainSettings:
    epochs: int = 60
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    augment: str = "none"

    def cosine_lr(self, epoch: int) -> float:
        """Half-cosine decay from ``lr`` at epoch 0 toward zero."""
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))


def trainer_fingerprint(net, settings: TrainSettings) -> str:
    """Digest of every knob that influences training, used to assert two
    evaluations were comparable."""
    blob = json.dumps({"arch": net.arch_id, **asdict(settings)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_classifier(net, images: np.ndarray, labels: np.ndarray,
                     settings: TrainSettings, seed: int) -> dict:
    """Fixed-budget SGD with momentum and cosine decay; returns the trained
    parameters."""
    params = net.init_params(seed)
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = images.shape[0]
    bs = min(settings.batch_size, n)
    for epoch in range(settings.epochs):
        lr = settings.cosine_lr(epoch)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x = images[idx]
            if settings.augment not in ("", "none"):
                plan = sample_plan(settings.augment, (x.shape[2], x.shape[3]), rng)
                with ad.no_grad():
                    x = apply_plan(plan, x).data
            with ad.Tape():
                pt = wrap_params(params)
                loss = net.loss(pt, x, labels[idx])
                grads = ad.backward(loss, list(pt.values()))
            for k, g in zip(pt, grads):
                velocity[k] = settings.momentum * velocity[k] + g.data
            sgd_step(params, velocity, lr)
    return params


@dataclass
class EvalReport:
    """Accuracy of repeated train-on-candidate runs plus the efficiency
    bookkeeping needed to compare candidates fairly."""

    accuracies: list
    config_hash: str
    steps: int = 0
    wall_seconds: float = 0.0
    flops: int = 0
    discarded: int = 0
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        self.mean = float(np.mean(self.accuracies)) if self.accuracies else float("nan")
        self.std = float(np.std(self.accuracies)) if self.accuracies else float("nan")

    def as_dict(self) -> dict:
        return {"accuracies": list(self.accuracies), "mean": self.mean,
                "std": self.std, "steps": self.steps,
                "wall_seconds": self.wall_seconds, "flops": self.flops,
                "discarded": self.discarded, "config_hash": self.config_hash}


def evaluate_images(net, images: np.ndarray, labels: np.ndarray,
                    test: Dataset, settings: TrainSettings, *, reps: int = 3,
                    seed: int = 0) -> EvalReport:
    """Train ``reps`` fresh networks on the given images and score each on
    the test split.  A repetition whose parameters go non-finite is dropped
    and counted in ``discarded``."""
    n = images.shape[0]
    bs = min(settings.batch_size, n)
    steps_per_rep = settings.epochs * ((n + bs - 1) // bs)
    accs, discarded = [], 0
    t0 = time.perf_counter()
    for r in range(reps):
        params = train_classifier(net, images, labels, settings, seed + r)
        if not all(np.isfinite(v).all() for v in params.values()):
            discarded += 1
            continue
        accs.append(accuracy(net, params, test.images, test.labels))
    wall = time.perf_counter() - t0
    return EvalReport(accs, trainer_fingerprint(net, settings),
                      steps=steps_per_rep,
                      wall_seconds=wall,
                      flops=flops_estimate(net, n, settings.epochs) * reps,
                      discarded=discarded)


def evaluate_synthetic(synth: SyntheticSet, test: Dataset, net,
                       settings: TrainSettings, *, reps: int = 3,
                       seed: int = 0) -> EvalReport:
    x, y = synth.decode()
    return evaluate_images(net, x, y, test, settings, reps=reps, seed=seed)


def random_subset_baseline(train: Dataset, ipc: int, test: Dataset, net,
                           settings: TrainSettings, *, reps: int = 3, seed: int = 0,
                           subset_seed: int = 0) -> EvalReport:
    """Train on ipc randomly chosen real images per class, through the exact
    trainer used for distilled data."""
    rng = np.random.default_rng(subset_seed)
    idx = train.sample_balanced(ipc, rng)
    return evaluate_images(net, train.images[idx], train.labels[idx], test,
                           settings, reps=reps, seed=seed)


# ---------------------------------------------------------------------------
# one-knob pipeline sweeps

SWEEP_AXES = ("pretrain_epochs", "alpha", "pool_size")
SWEEP_FIELDS = ("value", "accuracy_mean", "accuracy_std", "wall_seconds")


def ablation_sweep(axis: str, values, train: Dataset, test: Dataset, net, *,
                   workdir, distill_settings: DistillSettings,
                   eval_settings: TrainSettings, pool_size: int = 5,
                   pool_epochs: int = 1, pool_batch: int = 64,
                   eval_reps: int = 3, seeds=(0, 1, 2), cache: dict | None = None,
                   csv_path=None, progress=None) -> list[dict]:
    """Run pool building, distillation, and evaluation once per (value,
    seed) with the chosen knob overridden, and aggregate accuracies per
    value.

    ``cache`` (a plain dict, shareable across calls) memoizes pools and
    per-run accuracies by their effective settings, so sweeps over
    different axes reuse their common arms instead of recomputing them.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    workdir = Path(workdir)
    cache = {} if cache is None else cache
    rows = []
    for value in values:
        n_models, p_epochs, alpha = pool_size, pool_epochs, distill_settings.alpha
        if axis == "pretrain_epochs":
            p_epochs = int(value)
        elif axis == "alpha":
            alpha = float(value)
        else:
            n_models = int(value)
        per_value: list[float] = []
        t0 = time.perf_counter()
        for seed in seeds:
            pool_key = ("pool", n_models, p_epochs, seed)
            if pool_key not in cache:
                pool_dir = workdir / f"pool_n{n_models}_p{p_epochs}_s{seed}"
                build_pool(net, train, pool_dir, size=n_models, epochs=p_epochs,
                           batch_size=pool_batch, seed=seed)
                cache[pool_key] = ModelPool.from_dir(pool_dir)
            settings = replace(distill_settings, alpha=alpha, seed=seed)
            run_key = ("run", n_models, p_epochs, seed,
                       tuple(sorted(asdict(settings).items())))
            if run_key not in cache:
                result = distill(train, cache[pool_key], settings)
                report = evaluate_synthetic(result.synthetic, test, net,
                                            eval_settings, reps=eval_reps,
                                            seed=seed)
                cache[run_key] = tuple(report.accuracies)
                if progress:
                    progress(f"{axis}={value} seed={seed} "
                             f"acc={np.mean(cache[run_key]):.4f}")
            per_value.extend(cache[run_key])
        rows.append({"value": value,
                     "accuracy_mean": float(np.mean(per_value)),
                     "accuracy_std": float(np.std(per_value)),
                     "wall_seconds": time.perf_counter() - t0})
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
