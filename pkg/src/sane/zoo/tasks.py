"""Synthetic classification tasks the desk-scale zoos are trained on."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, ConfigError

GENERATORS = ("gaussian-blobs", "two-rings", "proc-digits")


@dataclass(frozen=True)
class TaskSpec:
    generator: str = "two-rings"
    n_classes: int = 2
    input_shape: tuple = (2,)
    noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int = field(default=2)

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for s in range(0, len(self), batch_size):
            idx = order[s:s + batch_size]
            yield self.x[idx], self.y[idx]


def _balanced_labels(n, n_classes, rng):
    return rng.permutation(np.arange(n) % n_classes)


def _blobs(spec, labels, rng):
    dim = int(np.prod(spec.input_shape))
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    centers = np.zeros((spec.n_classes, dim))
    centers[:, 0] = 3.0 * np.cos(angles)
    if dim > 1:
        centers[:, 1] = 3.0 * np.sin(angles)
    x = centers[labels] + rng.normal(0.0, 1.0 + spec.noise, size=(len(labels), dim))
    return x.reshape((len(labels),) + spec.input_shape)


def _rings(spec, labels, rng):
    if spec.input_shape != (2,):
        raise ConfigError("two-rings needs input_shape (2,)")
    radius = 1.0 + labels.astype(float)
    theta = rng.uniform(0.0, 2 * np.pi, size=len(labels))
    r = radius + rng.normal(0.0, spec.noise, size=len(labels))
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


# 7-segment style glyphs on a 6x6 canvas: (row0, col0, row1, col1) strokes
_SEGMENTS = {
    "a": (0, 1, 0, 4), "b": (0, 5, 2, 5), "c": (3, 5, 5, 5), "d": (5, 1, 5, 4),
    "e": (3, 0, 5, 0), "f": (0, 0, 2, 0), "g": (2, 1, 3, 4),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _glyph(digit: int) -> np.ndarray:
    img = np.zeros((6, 6))
    for s in _DIGITS[digit]:
        r0, c0, r1, c1 = _SEGMENTS[s]
        img[r0:r1 + 1, c0:c1 + 1] = 1.0
    return img


def _digits(spec, labels, rng):
    if spec.input_shape != (1, 8, 8):
        raise ConfigError("proc-digits needs input_shape (1, 8, 8)")
    if spec.n_classes > 10:
        raise ConfigError("proc-digits supports at most 10 classes")
    glyphs = np.stack([_glyph(d) for d in range(10)])
    n = len(labels)
    x = np.full((n, 8, 8), 0.2)
    shifts = rng.integers(0, 3, size=(n, 2))
    gains = rng.uniform(0.6, 1.4, size=n)
    for i in range(n):
        r, c = shifts[i]
        x[i, r:r + 6, c:c + 6] += gains[i] * glyphs[labels[i]]
    x += rng.normal(0.0, spec.noise, size=x.shape)
    return x[:, None]


_BUILDERS = {"gaussian-blobs": _blobs, "two-rings": _rings, "proc-digits": _digits}


def generate_task(spec: TaskSpec, n: int, seed_offset: int = 0) -> Dataset:
    """Deterministic, class-balanced (within one sample) dataset of ``n`` points."""
    if n <= 0:
        raise ArgumentError("n must be positive")
    if spec.generator not in _BUILDERS:
        raise ConfigError(f"unknown task generator {spec.generator!r}", key_path="task.generator")
    rng = np.random.default_rng([spec.seed, seed_offset])
    labels = _balanced_labels(n, spec.n_classes, rng)
    x = _BUILDERS[spec.generator](spec, labels, rng)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), spec.n_classes)


def task_splits(spec: TaskSpec, n_train: int, n_val: int, n_test: int) -> dict:
    """Independent train/val/test draws of the same task."""
    return {
        "train": generate_task(spec, n_train, 0),
        "val": generate_task(spec, n_val, 1),
        "test": generate_task(spec, n_test, 2),
    }
