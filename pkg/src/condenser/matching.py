"""Objectives that score a synthetic batch against a real one.

Two of them compare the network gradients the batches induce, layer by
layer:

- ``l2``: sum of squared elementwise differences.  Smooth everywhere, and
  identically zero when the two gradients coincide.
- ``cosine``: one minus cosine similarity per filter, summed.  Invariant to
  per-branch rescaling.  Filters whose norm product is at or below a small
  floor are left out (their angle is undefined); they contribute zero.

The third, ``distmatch``, skips gradients entirely and penalizes the
squared distance between the batch-mean penultimate features of the two
branches; it only ever needs first derivatives.

The synthetic-branch gradient is kept differentiable so the gradient
distances can be differentiated once more, back to the pixels.  A layer
filter restricts which parameter groups enter the distance; by default all
of them do.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .perturb import filter_view

OBJECTIVES = ("l2", "cosine", "distmatch")
GRADIENT_OBJECTIVES = ("l2", "cosine")
COS_NORM_FLOOR = 1e-12


def check_objective(objective: str) -> str:
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    return objective


def select_layers(names, layers=None) -> list:
    """Parameter-group names passing the inclusion filter.  ``layers`` is a
    tuple of name prefixes; empty or ``("all",)`` keeps everything.  At
    least one group must survive."""
    names = list(names)
    if not layers or tuple(layers) == ("all",):
        return names
    kept = [n for n in names if any(n == p or n.startswith(p) for p in layers)]
    if not kept:
        raise ConfigError(f"layer filter {layers!r} matches no parameter group")
    return kept


def real_gradient(net, params: dict, x, y):
    """Plain (non-differentiable) loss gradient; returns array-valued dict
    and the loss value."""
    with ad.Tape():
        pt = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        loss = net.loss(pt, x, y)
        grads = ad.backward(loss, list(pt.values()), create_graph=False)
    return {k: g.data for k, g in zip(pt, grads)}, float(loss.data)


def synthetic_gradient(net, params_t: dict, x_t, y):
    """Differentiable loss gradient; must run under an active higher-order
    tape so the result can be differentiated again."""
    loss = net.loss(params_t, x_t, y)
    grads = ad.backward(loss, list(params_t.values()), create_graph=True)
    return dict(zip(params_t, grads)), float(loss.data)


def _layer_l2(gs, gr_const):
    d = ad.sub(gs, gr_const)
    return ad.sum_(ad.mul(d, d))


def _layer_cos(gs, gr_const, gr_data):
    """Summed per-filter cosine distance of a differentiable gradient
    against a constant one."""
    shape = filter_view(gr_data).shape
    a = ad.reshape(gs, shape)
    b = ad.reshape(gr_const, shape)
    dots = ad.sum_(ad.mul(a, b), axis=1)
    sq_a = ad.sum_(ad.mul(a, a), axis=1)
    sq_b = ad.sum_(ad.mul(b, b), axis=1)
    # decide which filters have a defined angle from the values, then keep
    # the kept filters' arithmetic exact: the +bad bump only touches rows
    # that are masked out anyway, and prevents a 0/0
    norm_a = np.sqrt(sq_a.data)
    norm_b = np.sqrt(sq_b.data)
    bad = (norm_a * norm_b <= COS_NORM_FLOOR).astype(np.float64)
    keep = ad.constant(1.0 - bad)
    na = ad.sqrt(ad.add(sq_a, ad.constant(bad)))
    nb = ad.sqrt(ad.add(sq_b, ad.constant(bad)))
    cos = ad.div(dots, ad.mul(na, nb))
    return ad.sum_(ad.mul(ad.sub(ad.constant(np.ones(len(bad))), cos), keep))


def gradient_distance(grads_synth: dict, grads_real: dict, objective: str = "l2",
                      layers=None):
    """Distance between a differentiable gradient dict and a constant one,
    summed over the included layers."""
    if objective not in GRADIENT_OBJECTIVES:
        raise ConfigError(
            f"objective must be one of {GRADIENT_OBJECTIVES}, got {objective!r}")
    if set(grads_synth) != set(grads_real):
        raise ShapeError("gradient sets name different parameter groups")
    total = None
    for name in select_layers(grads_synth, layers):
        gs = grads_synth[name]
        gr_data = np.asarray(grads_real[name])
        gr_const = ad.constant(gr_data)
        if objective == "l2":
            term = _layer_l2(gs, gr_const)
        else:
            term = _layer_cos(gs, gr_const, gr_data)
        total = term if total is None else ad.add(total, term)
    return total


def mean_feature_distance(net, params: dict, synth_x, real_x):
    """Squared distance between the batch-mean penultimate features of the
    two branches.  The real branch is evaluated off-tape and enters as a
    constant, so gradients flow only into ``synth_x``."""
    with ad.no_grad():
        f_real = net.features(params, np.asarray(real_x, dtype=np.float64)
                              if not isinstance(real_x, ad.Tensor) else real_x.data)
    # same sum-then-scale arithmetic on both branches so identical batches
    # cancel exactly
    target = ad.constant(f_real.data.sum(axis=0) * (1.0 / f_real.shape[0]))
    f_synth = net.features(params, synth_x)
    n = f_synth.shape[0]
    mean_synth = ad.mul(ad.sum_(f_synth, axis=0), ad.constant(1.0 / n))
    d = ad.sub(mean_synth, target)
    return ad.sum_(ad.mul(d, d))


def matching_loss(net, params: dict, synth_x, synth_y, real_x, real_y,
                  objective: str = "l2", layers=None):
    """One full evaluation at fixed parameters: distance between what the
    two batches induce (gradients, or feature means for ``distmatch``).
    ``synth_x`` may be a tracked tensor; the returned value is
    differentiable with respect to it when called under a tape (a
    higher-order one for the gradient objectives)."""
    check_objective(objective)
    if objective == "distmatch":
        return mean_feature_distance(net, params, synth_x, real_x), {}
    g_real, real_loss = real_gradient(net, params, np.asarray(real_x, dtype=np.float64)
                                      if not isinstance(real_x, ad.Tensor) else real_x.data,
                                      real_y)
    params_t = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    g_synth, synth_loss = synthetic_gradient(net, params_t, synth_x, synth_y)
    dist = gradient_distance(g_synth, g_real, objective, layers)
    return dist, {"real_loss": real_loss, "synth_loss": synth_loss}
