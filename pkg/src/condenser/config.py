"""Flat key-value run configuration.

Config files are plain text: one ``key = value`` per line, ``#`` comments,
blank lines ignored.  Every key must exist in the defaults table below, and
values are coerced to the type of the default.  Command-line ``--set``
overrides use the same ``key=value`` syntax.  The fully resolved mapping is
echoed into each run directory so results stay self-describing.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    # data: procedural glyphs by default; idx/cifar10 read files from data.dir
    "data.source": "glyphs",
    "data.dir": ".",
    "data.train_per_class": 100,
    "data.test_per_class": 50,
    "data.noise": 0.25,
    "data.seed": 0,
    "data.train_images": "train-images.idx",
    "data.train_labels": "train-labels.idx",
    "data.test_images": "t10k-images.idx",
    "data.test_labels": "t10k-labels.idx",
    "data.cifar_train_batches": "data_batch_1.bin,data_batch_2.bin,data_batch_3.bin,data_batch_4.bin,data_batch_5.bin",
    "data.cifar_test_batches": "test_batch.bin",
    # network trained against and distilled for
    "net.width": 32,
    "net.depth": 3,
    "net.norm": "instance",
    # model pool
    "pool.n": 5,
    "pool.epochs": 1,
    "pool.lr_min": 0.005,
    "pool.lr_max": 0.02,
    "pool.batch_size": 64,
    "pool.strategies": "flip_shift,flip,none",
    "pool.seed": 0,
    # parameter perturbation applied to each drawn checkpoint
    "perturb.alpha": 1.0,
    "perturb.epsilon": 1e-10,
    # matching objective
    "match.objective": "l2",
    "match.layers": "all",
    # distillation
    "distill.ipc": 10,
    "distill.factor": 1,
    "distill.outer_steps": 100,
    "distill.inner_steps": 5,
    "distill.image_lr": 0.1,
    "distill.net_lr": 0.01,
    "distill.batch_real": 16,
    "distill.batch_net": 32,
    "distill.selection": "random",
    "distill.augment": "flip_shift",
    "distill.seed": 0,
    # evaluation
    "eval.epochs": 60,
    "eval.lr": 0.02,
    "eval.momentum": 0.9,
    "eval.batch_size": 64,
    "eval.augment": "none",
    "eval.reps": 3,
    "eval.seed": 0,
    # reporting
    "report.dpi": 120,
}


def coerce(key: str, text: str) -> object:
    """Parse ``text`` to the type of the default for ``key``."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(
            f"bad value {text!r} for {key} (expected {type(default).__name__})")
    return text


def load_config(path=None, overrides: tuple[str, ...] = ()) -> dict:
    """Defaults, then file entries, then ``key=value`` override pairs."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            cfg[key.strip()] = coerce(key.strip(), value)
    for pair in overrides:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        cfg[key.strip()] = coerce(key.strip(), value)
    return cfg


def dump_config(cfg: dict) -> str:
    """Canonical text form (sorted keys), parseable by ``load_config``."""
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def comma_list(value: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in value.split(",") if s.strip())
