"""Populations of trained base models: manifest, training, persistence."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..container import dumps_json, load_container, save_container
from ..errors import ArgumentError, DataError, FormatError, TrainingDivergedError
from .models import Architecture, ModelCheckpoint, evaluate, init_checkpoint, train_model
from .tasks import TaskSpec, task_splits

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ZooManifest:
    entries: list = field(default_factory=list)
    ratios: tuple = (0.7, 0.15, 0.15)
    arch: dict | None = None
    task: dict | None = None
    excluded: list = field(default_factory=list)
    permutations: dict = field(default_factory=dict)
    reference_id: int | None = None

    def model_ids(self, split=None):
        ids = sorted({e["model_id"] for e in self.entries if split is None or e["split"] == split})
        return ids

    def split_of(self, model_id):
        for e in self.entries:
            if e["model_id"] == model_id:
                return e["split"]
        raise DataError(f"model {model_id} not in manifest")

    def epochs_of(self, model_id):
        return sorted(e["epoch"] for e in self.entries if e["model_id"] == model_id)

    def rows(self, split=None):
        return [e for e in self.entries if split is None or e["split"] == split]

    def to_dict(self):
        return {
            "arch": self.arch, "task": self.task, "ratios": list(self.ratios),
            "entries": self.entries, "excluded": self.excluded,
            "permutations": {str(k): v for k, v in sorted(self.permutations.items())},
            "reference_id": self.reference_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(entries=d["entries"], ratios=tuple(d["ratios"]), arch=d.get("arch"), task=d.get("task"),
                   excluded=d.get("excluded", []),
                   permutations={int(k): v for k, v in d.get("permutations", {}).items()},
                   reference_id=d.get("reference_id"))


def assign_splits(model_ids, ratios=(0.7, 0.15, 0.15), seed=0) -> dict:
    """Partition model ids into train/val/test by a seeded shuffle."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError("split ratios must sum to 1")
    ids = np.array(sorted(model_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    out = {}
    for rank, j in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out[int(ids[j])] = split
    return out


@dataclass
class Zoo:
    """A manifest plus its checkpoints keyed by ``(model_id, epoch)``."""

    manifest: ZooManifest
    checkpoints: dict

    def get(self, model_id, epoch=None) -> ModelCheckpoint:
        if epoch is None:
            epoch = self.manifest.epochs_of(model_id)[-1]
        try:
            return self.checkpoints[(model_id, epoch)]
        except KeyError:
            raise DataError(f"missing checkpoint for model {model_id} epoch {epoch}") from None

    def items(self, split=None):
        for e in self.manifest.rows(split):
            yield e, self.checkpoints[(e["model_id"], e["epoch"])]

    @property
    def arch(self) -> Architecture:
        return Architecture.from_dict(self.manifest.arch)

    @property
    def task(self) -> TaskSpec:
        return TaskSpec.from_dict(self.manifest.task)


@dataclass(frozen=True)
class ZooConfig:
    n_models: int = 64
    epochs: int = 25
    snapshot_epochs: tuple = (1, 5, 10, 25)
    lr: float = 1e-3
    batch_size: int = 32
    n_train: int = 512
    n_val: int = 256
    n_test: int = 512
    seed: int = 0


def _train_one(args):
    arch, task, cfg, model_id = args
    data = task_splits(task, cfg.n_train, cfg.n_val, cfg.n_test)
    rng = np.random.default_rng([cfg.seed, model_id])
    ckpt = init_checkpoint(arch, rng)
    snaps = []

    def record(epoch, c):
        tr_acc, _ = evaluate(c, data["train"])
        te_acc, _ = evaluate(c, data["test"])
        c.meta.update({"model_id": model_id, "epoch": epoch, "seed": int(cfg.seed), "model_seed": [cfg.seed, model_id]})
        snaps.append((epoch, c, tr_acc, te_acc))

    try:
        train_model(ckpt, data["train"], cfg.epochs, rng, lr=cfg.lr, batch_size=cfg.batch_size,
                    snapshot_epochs=cfg.snapshot_epochs, on_snapshot=record)
    except TrainingDivergedError as exc:
        return model_id, None, str(exc)
    return model_id, snaps, None


def train_zoo(arch: Architecture, task: TaskSpec, cfg: ZooConfig, workers: int = 1) -> Zoo:
    """Train ``cfg.n_models`` models differing only in seed and snapshot them.

    Models whose training diverges are excluded and listed in ``manifest.excluded``.
    """
    if max(cfg.snapshot_epochs) > cfg.epochs:
        raise ArgumentError("snapshot epoch beyond training epochs")
    jobs = [(arch, task, cfg, m) for m in range(cfg.n_models)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    results.sort(key=lambda r: r[0])
    good = [r for r in results if r[1] is not None]
    splits = assign_splits([r[0] for r in good], seed=cfg.seed)
    manifest = ZooManifest(arch=arch.to_dict(), task=task.to_dict())
    checkpoints = {}
    for model_id, snaps, err in results:
        if snaps is None:
            log.warning("model %d diverged: %s", model_id, err)
            manifest.excluded.append({"model_id": model_id, "reason": err})
            continue
        for epoch, ckpt, tr, te in snaps:
            manifest.entries.append({
                "model_id": model_id, "epoch": epoch, "task": task.generator, "seed": cfg.seed,
                "train_acc": tr, "test_acc": te, "ggap": tr - te, "split": splits[model_id],
            })
            checkpoints[(model_id, epoch)] = ckpt
    return Zoo(manifest, checkpoints)


# -- persistence ----------------------------------------------------------------
def save_checkpoint(path, ckpt: ModelCheckpoint) -> Path:
    tensors = {f"tensors/{k}": v for k, v in ckpt.tensors.items()}
    tensors.update({f"buffers/{k}": v for k, v in ckpt.buffers.items()})
    return save_container(path, tensors, {"arch": ckpt.arch.to_dict(), "meta": ckpt.meta, "kind": "checkpoint"})


def load_checkpoint(path) -> ModelCheckpoint:
    tensors, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} does not hold a model checkpoint")
    arch = Architecture.from_dict(meta["arch"])
    ckpt = ModelCheckpoint(
        arch,
        {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("tensors/")},
        {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("buffers/")},
        meta.get("meta", {}),
    )
    for i, spec in enumerate(arch.layers):
        for name, shape in _expected(i, spec):
            store = ckpt.buffers if "running" in name else ckpt.tensors
            if name not in store:
                raise FormatError(f"missing tensor {name!r}", tensor_name=name)
            if store[name].shape != shape:
                raise FormatError(f"tensor {name!r} has shape {store[name].shape}, expected {shape}", tensor_name=name)
    return ckpt


def _expected(i, spec):
    if spec.learned:
        yield f"{i}.weight", spec.weight_shape
        if spec.has_bias:
            yield f"{i}.bias", (spec.out_features,)
    else:
        if spec.has_bias:
            yield f"{i}.weight", (spec.out_features,)
            yield f"{i}.bias", (spec.out_features,)
        yield f"{i}.running_mean", (spec.out_features,)
        yield f"{i}.running_var", (spec.out_features,)


def checkpoint_dirname(model_id, epoch):
    return f"m{model_id:04d}_e{epoch:04d}"


def save_zoo(path, zoo: Zoo) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for e in zoo.manifest.entries:
        save_checkpoint(path / checkpoint_dirname(e["model_id"], e["epoch"]), zoo.checkpoints[(e["model_id"], e["epoch"])])
    (path / "zoo.json").write_text(dumps_json(zoo.manifest.to_dict()), encoding="utf-8")
    return path


def load_zoo(path) -> Zoo:
    path = Path(path)
    try:
        manifest = ZooManifest.from_dict(json.loads((path / "zoo.json").read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise DataError(f"no zoo.json in {path}") from exc
    checkpoints = {}
    for e in manifest.entries:
        d = path / checkpoint_dirname(e["model_id"], e["epoch"])
        if not d.exists():
            raise FormatError(f"zoo references missing checkpoint {d.name}")
        checkpoints[(e["model_id"], e["epoch"])] = load_checkpoint(d)
    return Zoo(manifest, checkpoints)


def default_workers():
    return os.cpu_count() or 1
