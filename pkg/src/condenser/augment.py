"""Differentiable image augmentation with shared random draws.

A plan is sampled once per call and then applied to any number of batches.
Because the draw never looks at batch contents or batch size, applying one
plan to two batches is exactly the same as applying it to their
concatenation; matching losses rely on that to transform the real and the
synthetic branch identically.  Every op is a gather or a mask, so gradients
pass through to the pixels unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

OPS = ("flip", "shift", "cutout", "scale")

SHIFT_RATIO = 0.125
CUTOUT_RATIO = 0.5
SCALE_RATIO = 0.2


def parse_strategy(strategy: str) -> tuple[str, ...]:
    """Split an underscore-joined op list; 'none' means identity."""
    if strategy in ("", "none"):
        return ()
    ops = tuple(strategy.split("_"))
    for op in ops:
        if op not in OPS:
            raise ConfigError(f"unknown augmentation op {op!r}; choose from {OPS}")
    return ops


@dataclass(frozen=True)
class AugmentPlan:
    """Concrete draw: an ordered tuple of (op, parameters)."""

    steps: tuple


def sample_plan(strategy: str, image_hw: tuple[int, int], rng) -> AugmentPlan:
    h, w = image_hw
    steps = []
    for op in parse_strategy(strategy):
        if op == "flip":
            steps.append(("flip", bool(rng.random() < 0.5)))
        elif op == "shift":
            m_y, m_x = max(1, round(h * SHIFT_RATIO)), max(1, round(w * SHIFT_RATIO))
            steps.append(("shift", (int(rng.integers(-m_y, m_y + 1)),
                                    int(rng.integers(-m_x, m_x + 1)))))
        elif op == "cutout":
            size = max(1, round(h * CUTOUT_RATIO))
            top = int(rng.integers(-size // 2, h - size // 2))
            left = int(rng.integers(-size // 2, w - size // 2))
            steps.append(("cutout", (top, left, size)))
        elif op == "scale":
            f = float(rng.uniform(1.0 - SCALE_RATIO, 1.0 + SCALE_RATIO))
            steps.append(("scale", (max(1, round(h * f)), max(1, round(w * f)))))
    return AugmentPlan(tuple(steps))


def apply_plan(plan: AugmentPlan, x) -> ad.Tensor:
    t = ad.as_tensor(x)
    h, w = t.shape[2], t.shape[3]
    for op, arg in plan.steps:
        if op == "flip":
            if arg:
                t = ad.flip_w(t)
        elif op == "shift":
            dy, dx = arg
            if dy or dx:
                t = ad.shift2d(t, dy, dx)
        elif op == "cutout":
            top, left, size = arg
            mask = np.ones((1, 1, h, w))
            y0, y1 = max(0, top), min(h, top + size)
            x0, x1 = max(0, left), min(w, left + size)
            mask[:, :, y0:y1, x0:x1] = 0.0
            t = ad.mul(t, ad.constant(mask))
        elif op == "scale":
            nh, nw = arg
            if (nh, nw) != (h, w):
                t = ad.resize_nearest(t, nh, nw)
                t = ad.pad_crop(t, (nh - h) // 2, (nw - w) // 2, h, w)
    return t


def augment_pair(strategy: str, a, b, rng):
    """One shared draw applied to both batches."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    plan = sample_plan(strategy, (a.shape[2], a.shape[3]), rng)
    return apply_plan(plan, a), apply_plan(plan, b)
