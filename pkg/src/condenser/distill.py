"""The distillation loop: learn a small synthetic set whose gradients track
real-data gradients across a pool of perturbed early-stage models.

Each outer step draws starting weights from the pool (a random member, or
the pool average), perturbs them, and then alternates ``inner_steps`` times
between per-class pixel updates (matching against a real batch of the same
class) and one network update on an augmented real mini-batch, so the
matching happens along a short training trajectory rather than at a frozen
point.

Synthetic storage uses multi-formation: with ``factor`` f, every stored
image holds an f x f grid of half-size condensed images that decode (by
nearest upsampling) into f^2 training images, multiplying the effective set
size at fixed pixel budget.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import apply_plan, sample_plan
from .datasets import Dataset
from .errors import ConfigError, DataFormatError, NanLossError
from .matching import (
    check_objective,
    gradient_distance,
    mean_feature_distance,
    real_gradient,
    synthetic_gradient,
)
from .modelpool import SAMPLE_MODES, ModelPool
from .networks import network_from_arch_id, sgd_step, wrap_params
from .perturb import DEFAULT_EPS, perturb

DDSY_MAGIC = b"DDSY"
DDSY_VERSION = 1

# outer-step budgets: the x5 preset matches the reference trajectory length
# divided by 5, and so on; every other knob stays put, which keeps step and
# flop ratios between presets exact integers
REFERENCE_STEPS = 2000
PRESETS = {"x5": REFERENCE_STEPS // 5, "x10": REFERENCE_STEPS // 10,
           "x20": REFERENCE_STEPS // 20}

GRAD_EVAL_COST = 3  # forward plus a backward that costs about two forwards
SECOND_ORDER_COST = 2 * GRAD_EVAL_COST  # differentiating the gradient again


def flops_estimate(net, batch: int, grad_evals: int) -> int:
    """Estimated floating-point ops for ``grad_evals`` loss-gradient
    evaluations at the given batch size (2 flops per MAC)."""
    return grad_evals * GRAD_EVAL_COST * 2 * net.macs_per_image() * batch


# ---------------------------------------------------------------------------
# synthetic set

@dataclass
class SyntheticSet:
    """Stored condensed images in normalized space, class-major order."""

    images: np.ndarray
    labels: np.ndarray
    factor: int
    mean: np.ndarray
    std: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def ipc(self) -> int:
        return self.images.shape[0] // self.num_classes

    @property
    def images_per_class(self) -> int:
        return self.ipc * self.factor * self.factor

    def class_rows(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def decode_tensor(self, stored: ad.Tensor, rows: slice | None = None):
        """Differentiable decode of (a slice of) the stored tensor into
        training images.  Returns (images tensor, labels array)."""
        t = ad.slice0(stored, rows.start, rows.stop - rows.start) if rows else stored
        labels = self.labels[rows] if rows else self.labels
        f = self.factor
        if f == 1:
            return t, labels
        h, w = self.images.shape[2], self.images.shape[3]
        hq, wq = h // f, w // f
        tiles = []
        for qy in range(f):
            for qx in range(f):
                quad = ad.pad_crop(t, qy * hq, qx * wq, hq, wq)
                tiles.append(ad.upsample_nearest(quad, f))
        return ad.concat0(tiles), np.tile(labels, f * f)

    def decode(self):
        """Plain-array decode of the whole set."""
        with ad.no_grad():
            x, y = self.decode_tensor(ad.Tensor(self.images))
        return x.data, y

    def to_dataset(self) -> Dataset:
        x, y = self.decode()
        return Dataset(x, y, self.mean, self.std, self.num_classes)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.images.copy(), self.labels.copy(), self.factor,
                            self.mean.copy(), self.std.copy())

    # ------------------------------------------------------------------
    # on-disk layout

    def save(self, path) -> None:
        c, h, w = self.images.shape[1:]
        with open(path, "wb") as f:
            f.write(DDSY_MAGIC)
            f.write(struct.pack("<I", DDSY_VERSION))
            f.write(struct.pack("<BHHHHH", self.factor, self.ipc,
                                self.num_classes, c, h, w))
            f.write(np.ascontiguousarray(self.mean, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.std, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.labels, dtype="<u2").tobytes())

    @classmethod
    def load(cls, path) -> "SyntheticSet":
        raw = Path(path).read_bytes()
        if raw[:4] != DDSY_MAGIC:
            raise DataFormatError(f"{path}: bad magic, not a synthetic-set file")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != DDSY_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        factor, ipc, classes, c, h, w = struct.unpack_from("<BHHHHH", raw, 8)
        pos = 8 + struct.calcsize("<BHHHHH")
        n = ipc * classes
        need = pos + 4 * c * 2 + 4 * n * c * h * w + 2 * n
        if len(raw) != need:
            raise DataFormatError(f"{path}: size {len(raw)}, expected {need}")
        mean = np.frombuffer(raw, dtype="<f4", count=c, offset=pos).astype(np.float64)
        pos += 4 * c
        std = np.frombuffer(raw, dtype="<f4", count=c, offset=pos).astype(np.float64)
        pos += 4 * c
        images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w,
                               offset=pos).astype(np.float64).reshape(n, c, h, w)
        pos += 4 * n * c * h * w
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=pos).astype(np.int64)
        return cls(images, labels, int(factor), mean, std)


def init_synthetic(data: Dataset, ipc: int, factor: int, rng) -> SyntheticSet:
    """Seed the stored images from random real examples of each class;
    with multi-formation each grid cell holds a pooled-down real image."""
    c_ch, h, w = data.image_shape
    if h % factor or w % factor:
        raise ConfigError(f"factor {factor} must divide image size {h}x{w}")
    n = data.num_classes * ipc
    images = np.empty((n, c_ch, h, w))
    labels = np.repeat(np.arange(data.num_classes), ipc).astype(np.int64)
    hq, wq = h // factor, w // factor
    for c in range(data.num_classes):
        for j in range(ipc):
            row = c * ipc + j
            if factor == 1:
                (pick,) = data.sample_class(c, 1, rng)
                images[row] = data.images[pick]
            else:
                picks = data.sample_class(c, factor * factor, rng)
                for q, pick in enumerate(picks):
                    qy, qx = divmod(q, factor)
                    with ad.no_grad():
                        small = ad.avgpool2d(ad.Tensor(data.images[pick][None]),
                                             factor).data[0]
                    images[row, :, qy * hq:(qy + 1) * hq, qx * wq:(qx + 1) * wq] = small
    return SyntheticSet(images, labels, factor, data.mean.copy(), data.std.copy())


# ---------------------------------------------------------------------------
# the loop

@dataclass
class DistillSettings:
    ipc: int = 10
    factor: int = 1
    outer_steps: int = 100
    inner_steps: int = 5
    image_lr: float = 0.1
    net_lr: float = 0.01
    batch_real: int = 16
    batch_net: int = 32
    alpha: float = 1.0
    epsilon: float = DEFAULT_EPS
    objective: str = "l2"
    layers: str = "all"
    selection: str = "random"
    augment: str = "none"
    seed: int = 0

    def __post_init__(self):
        check_objective(self.objective)
        if self.selection not in SAMPLE_MODES:
            raise ConfigError(
                f"selection must be one of {SAMPLE_MODES}, got {self.selection!r}")
        for name in ("ipc", "factor", "outer_steps", "inner_steps",
                     "batch_real", "batch_net"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        # a zero pixel step is allowed (it degrades to a no-op on S, which
        # is a useful control); a zero network step would silently freeze
        # the trajectory, so it is not
        if self.image_lr < 0:
            raise ConfigError(f"image_lr must be >= 0, got {self.image_lr}")
        if self.net_lr <= 0:
            raise ConfigError(f"net_lr must be > 0, got {self.net_lr}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")

    def layer_filter(self) -> tuple[str, ...] | None:
        parts = tuple(s.strip() for s in self.layers.split(",") if s.strip())
        return None if not parts or parts == ("all",) else parts


@dataclass
class DistillResult:
    synthetic: SyntheticSet
    history: list = field(default_factory=list)
    synth_updates: int = 0
    net_updates: int = 0
    flops: int = 0


def _class_update(net, params, synth, stored, c, data, settings, layers, rng):
    """One matching step on the pixels of class c; returns (distance value,
    pixel gradient rows for c)."""
    rows = synth.class_rows(c)
    real_idx = data.sample_class(c, settings.batch_real, rng)
    xr, yr = data.images[real_idx], data.labels[real_idx]
    plan = sample_plan(settings.augment, (xr.shape[2], xr.shape[3]), rng)
    with ad.no_grad():
        xr_aug = apply_plan(plan, xr).data
    if settings.objective == "distmatch":
        # feature-mean matching needs only first derivatives
        with ad.Tape():
            stored_t = ad.Tensor(stored, requires_grad=True)
            xs, _ = synth.decode_tensor(stored_t, rows)
            xs = apply_plan(plan, xs)
            dist = mean_feature_distance(net, params, xs, xr_aug)
            (g_pix,) = ad.backward(dist, [stored_t])
        return float(dist.data), g_pix.data[rows]
    g_real, _ = real_gradient(net, params, xr_aug, yr)
    with ad.Tape(higher_order=True):
        stored_t = ad.Tensor(stored, requires_grad=True)
        xs, ys = synth.decode_tensor(stored_t, rows)
        xs = apply_plan(plan, xs)
        params_t = wrap_params(params)
        g_synth, _ = synthetic_gradient(net, params_t, xs, ys)
        dist = gradient_distance(g_synth, g_real, settings.objective, layers)
        (g_pix,) = ad.backward(dist, [stored_t], create_graph=False)
    return float(dist.data), g_pix.data[rows]


def _net_update(net, params, data, settings, rng):
    """One SGD step for the sampled network on a uniformly drawn,
    augmented real mini-batch (no class balancing)."""
    n = len(data)
    batch = min(settings.batch_net, n)
    idx = rng.choice(n, size=batch, replace=False)
    x, y = data.images[idx], data.labels[idx]
    if settings.augment not in ("", "none"):
        plan = sample_plan(settings.augment, (x.shape[2], x.shape[3]), rng)
        with ad.no_grad():
            x = apply_plan(plan, x).data
    with ad.Tape():
        pt = wrap_params(params)
        loss = net.loss(pt, x, y)
        grads = ad.backward(loss, list(pt.values()))
    sgd_step(params, dict(zip(pt, grads)), settings.net_lr)
    return float(loss.data), batch


def distill(data: Dataset, pool: ModelPool, settings: DistillSettings, *,
            synthetic: SyntheticSet | None = None, log_path=None,
            progress=None) -> DistillResult:
    """Run the full loop; returns the synthetic set plus a per-outer-step
    history (also streamed to ``log_path`` as JSON lines when given).

    ``synthetic`` is the starting set; it is copied, never mutated.  When
    omitted, a fresh set is initialized from ``settings.ipc`` and
    ``settings.factor`` using the run's own seed stream.
    """
    net = network_from_arch_id(pool.arch)
    if net.num_classes != data.num_classes:
        raise ConfigError(f"pool arch has {net.num_classes} classes, "
                          f"data has {data.num_classes}")
    rng = np.random.default_rng(settings.seed)
    if synthetic is None:
        synth = init_synthetic(data, settings.ipc, settings.factor, rng)
    else:
        if synthetic.num_classes != data.num_classes:
            raise ConfigError(f"starting set has {synthetic.num_classes} classes, "
                              f"data has {data.num_classes}")
        synth = synthetic.copy()
    layers = settings.layer_filter()
    result = DistillResult(synthetic=synth)
    macs = net.macs_per_image()
    n_class_batch = synth.images_per_class
    synth_cost = (GRAD_EVAL_COST if settings.objective == "distmatch"
                  else SECOND_ORDER_COST)
    flops_match = (GRAD_EVAL_COST * settings.batch_real
                   + synth_cost * n_class_batch) * 2 * macs
    flops_net = GRAD_EVAL_COST * min(settings.batch_net, len(data)) * 2 * macs
    log_f = open(log_path, "w") if log_path else None
    try:
        for t in range(settings.outer_steps):
            t0 = time.perf_counter()
            ckpt_id, params = pool.draw(rng, settings.selection)
            params = perturb(params, settings.alpha, rng, eps=settings.epsilon)
            match_vals, net_vals = [], []
            for m in range(settings.inner_steps):
                for c in range(data.num_classes):
                    dval, g_rows = _class_update(net, params, synth,
                                                 synth.images, c, data,
                                                 settings, layers, rng)
                    if not np.isfinite(dval):
                        raise NanLossError(
                            f"matching loss became non-finite at outer step {t}",
                            outer_step=t, inner_step=m, class_id=c,
                            image_lr=settings.image_lr, net_lr=settings.net_lr)
                    rows = synth.class_rows(c)
                    synth.images[rows] -= settings.image_lr * g_rows
                    if not np.isfinite(synth.images[rows]).all():
                        raise NanLossError(
                            f"synthetic pixels became non-finite at outer step {t}",
                            outer_step=t, inner_step=m, class_id=c,
                            image_lr=settings.image_lr, net_lr=settings.net_lr)
                    match_vals.append(dval)
                    result.synth_updates += 1
                    result.flops += flops_match
                nloss, _ = _net_update(net, params, data, settings, rng)
                if not np.isfinite(nloss):
                    raise NanLossError(
                        f"network loss became non-finite at outer step {t}",
                        outer_step=t, inner_step=m,
                        image_lr=settings.image_lr, net_lr=settings.net_lr)
                net_vals.append(nloss)
                result.net_updates += 1
                result.flops += flops_net
            row = {
                "step": t,
                "matching_loss_mean": float(np.mean(match_vals)),
                "net_loss": float(np.mean(net_vals)),
                "elapsed_ms": (time.perf_counter() - t0) * 1000.0,
                "checkpoint_id": ckpt_id,
                "alpha": settings.alpha,
                "synth_updates": result.synth_updates,
                "net_updates": result.net_updates,
                "flops": result.flops,
            }
            result.history.append(row)
            if log_f:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
            if progress:
                progress(row)
    finally:
        if log_f:
            log_f.close()
    return result
