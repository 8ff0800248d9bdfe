"""Command-line entry point.

Subcommands cover the full workflow: ``pretrain`` builds the model pool,
``distill`` learns the synthetic set, ``eval`` scores it against a random
real subset, and ``report`` renders tables and figures from a run
directory.

Exit codes: 0 success, 2 configuration or input-file problems, 3 the
matching loss went non-finite.
"""

from __future__ import annotations

import os

# honor the thread cap before numpy locks in its thread pools
if "DD_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DD_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import comma_list, dump_config, load_config  # noqa: E402
from .datasets import Dataset, load_cifar_batches, load_idx_pair, make_glyph_splits  # noqa: E402
from .distill import PRESETS, DistillSettings, SyntheticSet, distill  # noqa: E402
from .errors import ConfigError, DataFormatError, NanLossError  # noqa: E402
from .evaluation import (  # noqa: E402
    TrainSettings,
    evaluate_synthetic,
    random_subset_baseline,
)
from .matching import OBJECTIVES  # noqa: E402
from .modelpool import ModelPool, build_pool  # noqa: E402
from .networks import ConvNet  # noqa: E402
from .report import render_runs  # noqa: E402


def build_splits(cfg) -> tuple[Dataset, Dataset]:
    source = cfg["data.source"]
    root = Path(cfg["data.dir"])
    if source == "glyphs":
        return make_glyph_splits(cfg["data.train_per_class"],
                                 cfg["data.test_per_class"],
                                 seed=cfg["data.seed"], noise=cfg["data.noise"])
    if source == "idx":
        xtr, ytr = load_idx_pair(root / cfg["data.train_images"],
                                 root / cfg["data.train_labels"])
        xte, yte = load_idx_pair(root / cfg["data.test_images"],
                                 root / cfg["data.test_labels"])
    elif source == "cifar10":
        xtr, ytr = load_cifar_batches(
            [root / p for p in comma_list(cfg["data.cifar_train_batches"])])
        xte, yte = load_cifar_batches(
            [root / p for p in comma_list(cfg["data.cifar_test_batches"])])
    else:
        raise ConfigError(f"unknown data.source {source!r}")
    train = Dataset.from_raw(xtr, ytr)
    test = Dataset.from_raw(xte, yte, num_classes=train.num_classes,
                            stats=(train.mean, train.std))
    return train, test


def net_for(cfg, data: Dataset) -> ConvNet:
    c, h, w = data.image_shape
    return ConvNet(c, (h, w), data.num_classes, width=cfg["net.width"],
                   depth=cfg["net.depth"], norm=cfg["net.norm"])


def prepare_out(args, cfg) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.cfg").write_text(dump_config(cfg))
    return out


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    out = prepare_out(args, cfg)
    train, _ = build_splits(cfg)
    net = net_for(cfg, train)
    workers = max(1, int(os.environ.get("DD_THREADS", "1")))
    records = build_pool(net, train, out, size=cfg["pool.n"],
                         epochs=cfg["pool.epochs"],
                         lr_range=(cfg["pool.lr_min"], cfg["pool.lr_max"]),
                         batch_size=cfg["pool.batch_size"], seed=cfg["pool.seed"],
                         strategies=comma_list(cfg["pool.strategies"]),
                         workers=min(workers, cfg["pool.n"]))
    for rec in records:
        print(f"{rec.path}  lr={rec.lr:g} augment={rec.augment} "
              f"loss={rec.train_loss:.4f} acc={rec.train_acc:.4f}")
    print(f"pool of {len(records)} models trained for {cfg['pool.epochs']} "
          f"epochs written to {out}")
    return 0


def cmd_distill(args) -> int:
    # the dedicated flags expand to ordinary overrides; explicit --set
    # pairs come last so they win, same as the defaults < file < override
    # layering inside load_config
    overrides = []
    if args.preset:
        overrides.append(f"distill.outer_steps={PRESETS[args.preset]}")
    if args.objective:
        overrides.append(f"match.objective={args.objective}")
    if args.seed is not None:
        overrides.append(f"distill.seed={args.seed}")
    overrides += list(args.set)
    cfg = load_config(args.config, tuple(overrides))
    out = prepare_out(args, cfg)
    train, _ = build_splits(cfg)
    pool = ModelPool.from_dir(args.pool)
    settings = DistillSettings(
        ipc=cfg["distill.ipc"], factor=cfg["distill.factor"],
        outer_steps=cfg["distill.outer_steps"],
        inner_steps=cfg["distill.inner_steps"],
        image_lr=cfg["distill.image_lr"], net_lr=cfg["distill.net_lr"],
        batch_real=cfg["distill.batch_real"], batch_net=cfg["distill.batch_net"],
        alpha=cfg["perturb.alpha"], epsilon=cfg["perturb.epsilon"],
        objective=cfg["match.objective"], layers=cfg["match.layers"],
        selection=cfg["distill.selection"],
        augment=cfg["distill.augment"], seed=cfg["distill.seed"])
    every = max(1, settings.outer_steps // 10)

    def progress(row):
        if row["step"] % every == 0 or row["step"] == settings.outer_steps - 1:
            print(f"step {row['step']:5d}  match={row['matching_loss_mean']:.5f}  "
                  f"net={row['net_loss']:.4f}  ckpt={row['checkpoint_id']}")

    result = distill(train, pool, settings, log_path=out / "run_log.jsonl",
                     progress=progress)
    result.synthetic.save(out / "synthetic.ddsy")
    print(f"synthetic set: {out / 'synthetic.ddsy'}")
    print(f"updates: {result.synth_updates} pixel, {result.net_updates} network; "
          f"estimated flops {result.flops:.3e}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, tuple(args.set))
    out = prepare_out(args, cfg)
    train, test = build_splits(cfg)
    synth = SyntheticSet.load(args.synthetic)
    net = net_for(cfg, train)
    settings = TrainSettings(epochs=cfg["eval.epochs"], lr=cfg["eval.lr"],
                             momentum=cfg["eval.momentum"],
                             batch_size=cfg["eval.batch_size"],
                             augment=cfg["eval.augment"])
    reps, seed = cfg["eval.reps"], cfg["eval.seed"]
    blob = {}
    distilled = evaluate_synthetic(synth, test, net, settings, reps=reps, seed=seed)
    blob["distilled"] = distilled.as_dict()
    print(f"distilled: {distilled.mean:.4f} +- {distilled.std:.4f}")
    if not args.no_baseline:
        base = random_subset_baseline(train, synth.ipc * synth.factor ** 2, test,
                                      net, settings, reps=reps, seed=seed,
                                      subset_seed=seed)
        blob["random_real"] = base.as_dict()
        blob["margin"] = distilled.mean - base.mean
        blob["protocol_match"] = base.config_hash == distilled.config_hash
        print(f"random real: {base.mean:.4f} +- {base.std:.4f}  "
              f"margin {blob['margin']:+.4f}")
    (out / "eval.json").write_text(json.dumps(blob, indent=2) + "\n")
    print(f"wrote {out / 'eval.json'}")
    return 0


def cmd_report(args) -> int:
    written = render_runs(args.run, args.out, dpi=args.dpi)
    if not written:
        print(f"nothing to render in {', '.join(args.run)}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condenser",
        description="Distill a dataset into a few synthetic images by "
                    "matching gradients on a pool of perturbed early-stage "
                    "models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="config file (defaults apply if omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("pretrain", help="train and save the model pool")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="learn the synthetic set")
    common(p)
    p.add_argument("--pool", required=True, help="directory of .ddck checkpoints")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="speed preset; sets distill.outer_steps")
    p.add_argument("--objective", choices=OBJECTIVES,
                   help="override match.objective")
    p.add_argument("--seed", type=int, help="override distill.seed")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="score a synthetic set against a random-real baseline")
    common(p)
    p.add_argument("--synthetic", required=True, help="a .ddsy file")
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the random-real comparison")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables and figures for runs")
    p.add_argument("--run", required=True, action="append",
                   help="run directory to read (repeat to overlay runs)")
    p.add_argument("--out", help="where to write (defaults to the first run directory)")
    p.add_argument("--dpi", type=int, default=120)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except NanLossError as e:
        print(f"error: {e} (outer={e.outer_step} inner={e.inner_step} "
              f"class={e.class_id})", file=sys.stderr)
        return 3
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
