"""Pool of lightly trained models and their on-disk checkpoint format.

Distillation matches gradients on models drawn from this pool.  Members are
diversified along three axes: initialization seed, learning rate (drawn
log-uniformly per member), and the augmentation used during their short
pretraining.  Checkpoints are written in a compact binary layout (magic
``DDCK``) with training provenance in a JSON sidecar next to each file, so
the weight format stays fixed while the metadata can grow.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import apply_plan, sample_plan
from .datasets import Dataset
from .errors import ConfigError, DataFormatError
from .networks import accuracy, sgd_step, wrap_params

DDCK_MAGIC = b"DDCK"
DDCK_VERSION = 1

LR_RANGE = (0.005, 0.02)
SAMPLE_MODES = ("random", "average")


def save_checkpoint(path, arch_id: str, params: dict, meta: dict | None = None) -> None:
    """Write weights as f32 little-endian plus a JSON sidecar."""
    path = Path(path)
    arch_b = arch_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(DDCK_MAGIC)
        f.write(struct.pack("<I", DDCK_VERSION))
        f.write(struct.pack("<I", len(arch_b)))
        f.write(arch_b)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


class _Reader:
    def __init__(self, raw: bytes, origin: str):
        self.raw = raw
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataFormatError(f"{self.origin}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]


def load_checkpoint(path):
    """Read a checkpoint; returns (arch_id, f64 params dict, sidecar meta)."""
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != DDCK_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.unpack("<I")
    if version != DDCK_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    arch_id = r.take(r.unpack("<I")).decode("utf-8")
    count = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim))) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.raw):
        raise DataFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return arch_id, params, meta


@dataclass
class CheckpointRecord:
    path: str
    arch: str
    seed: int
    lr: float
    epochs: int
    augment: str
    train_loss: float
    train_acc: float


def pretrain(net, params: dict, data: Dataset, *, epochs: int, lr: float,
             batch_size: int, augment: str, rng, momentum: float = 0.9):
    """Short SGD pass over the real data, mutating ``params`` in place.
    Returns (mean loss of the last epoch, train accuracy after training)."""
    n = len(data)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    last_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        last_losses.clear()
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = data.images[idx]
            if augment not in ("", "none"):
                plan = sample_plan(augment, (x.shape[2], x.shape[3]), rng)
                with ad.no_grad():
                    x = apply_plan(plan, x).data
            with ad.Tape():
                pt = wrap_params(params)
                loss = net.loss(pt, x, data.labels[idx])
                grads = ad.backward(loss, list(pt.values()))
            last_losses.append(loss.item())
            for k, g in zip(pt, grads):
                velocity[k] = momentum * velocity[k] + g.data
            sgd_step(params, velocity, lr)
    mean_loss = float(np.mean(last_losses)) if last_losses else float("nan")
    return mean_loss, accuracy(net, params, data.images, data.labels)


def member_settings(i: int, member_seed: int, lr_range: tuple[float, float],
                    strategies: tuple[str, ...]):
    """Diversity schedule for pool member i: a log-uniform learning rate
    drawn from the member's own seed, and an augmentation cycled from the
    provided list.  Deterministic per (i, member_seed)."""
    lo, hi = lr_range
    if not 0 < lo <= hi:
        raise ConfigError(f"bad learning-rate range {lr_range}")
    draw = np.random.default_rng(member_seed).random()
    lr = float(np.exp(np.log(lo) + draw * (np.log(hi) - np.log(lo))))
    augment = strategies[i % len(strategies)]
    return lr, augment


def build_pool(net, data: Dataset, out_dir, *, size: int, epochs: int,
               batch_size: int, seed: int, lr_range: tuple[float, float] = LR_RANGE,
               strategies: tuple[str, ...] = ("flip_shift", "flip", "none"),
               workers: int = 1) -> list[CheckpointRecord]:
    """Train ``size`` diversified members and write them as checkpoints.
    Members are independent, so ``workers`` > 1 trains them in parallel
    threads without changing any result."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build_member(i: int) -> CheckpointRecord:
        member_seed = seed * 1000 + i
        lr, augment = member_settings(i, member_seed, lr_range, strategies)
        params = net.init_params(member_seed)
        rng = np.random.default_rng(member_seed)
        loss, acc = pretrain(net, params, data, epochs=epochs, lr=lr,
                             batch_size=batch_size, augment=augment, rng=rng)
        rec = CheckpointRecord(path=str(out_dir / f"model_{i:03d}.ddck"),
                               arch=net.arch_id, seed=member_seed, lr=lr,
                               epochs=epochs, augment=augment,
                               train_loss=loss, train_acc=acc)
        save_checkpoint(rec.path, net.arch_id, params, asdict(rec))
        return rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build_member, range(size)))
    return [build_member(i) for i in range(size)]


class ModelPool:
    """Loaded checkpoint collection; ``sample`` hands out a fresh copy of a
    uniformly drawn member so callers may perturb or train it freely."""

    def __init__(self, records: list[CheckpointRecord]):
        if not records:
            raise DataFormatError("model pool is empty")
        self.records = records
        self._cache: dict[str, dict] = {}

    @classmethod
    def from_dir(cls, pool_dir) -> "ModelPool":
        pool_dir = Path(pool_dir)
        records = []
        for p in sorted(pool_dir.glob("*.ddck")):
            arch, _, meta = load_checkpoint(p)
            meta = {**meta, "path": str(p), "arch": arch}
            records.append(CheckpointRecord(**{
                k: meta.get(k, d) for k, d in [
                    ("path", str(p)), ("arch", arch), ("seed", -1), ("lr", 0.0),
                    ("epochs", 0), ("augment", ""), ("train_loss", float("nan")),
                    ("train_acc", float("nan"))]
            }))
        return cls(records)

    def __len__(self):
        return len(self.records)

    @property
    def arch(self) -> str:
        return self.records[0].arch

    def _params(self, rec: CheckpointRecord) -> dict:
        if rec.path not in self._cache:
            arch, params, _ = load_checkpoint(rec.path)
            if arch != self.arch:
                raise DataFormatError(
                    f"{rec.path}: architecture {arch!r} differs from pool {self.arch!r}")
            self._cache[rec.path] = params
        return self._cache[rec.path]

    def sample(self, rng):
        """Uniform draw; returns (record, deep-copied params)."""
        rec = self.records[int(rng.integers(len(self.records)))]
        return rec, {k: v.copy() for k, v in self._params(rec).items()}

    def average_params(self) -> dict:
        """Element-wise mean of every member's parameters."""
        total: dict[str, np.ndarray] = {}
        for rec in self.records:
            for k, v in self._params(rec).items():
                total[k] = total.get(k, 0.0) + v
        return {k: v / len(self.records) for k, v in total.items()}

    def draw(self, rng, mode: str = "random"):
        """Starting parameters for one outer step: a random member, or the
        pool-wide weight average.  Returns (checkpoint id, params copy)."""
        if mode == "random":
            rec, params = self.sample(rng)
            return Path(rec.path).stem, params
        if mode == "average":
            return "average", self.average_params()
        raise ConfigError(f"sample mode must be one of {SAMPLE_MODES}, got {mode!r}")
