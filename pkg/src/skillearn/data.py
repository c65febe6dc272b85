"""Synthetic classification tasks: gaussian blobs, two moons, xor grid."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec

KINDS = ("blobs", "moons", "xor")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "blobs"
    classes: int = 2
    dim: int = 2
    separation: float = 4.0
    noise: float = 0.3
    # rotation of the label function, so learners can get distinct tasks
    rotation: float = 0.0

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown generator {self.kind!r}")
        if self.classes < 2 or self.dim < 2:
            raise InvalidSpec("need at least 2 classes and 2 dimensions")
        if self.kind in ("moons", "xor") and self.classes != 2:
            raise InvalidSpec(f"{self.kind} is a binary task")
        if not (self.noise >= 0 and np.isfinite(self.noise)):
            raise InvalidSpec("noise must be >= 0")


@dataclass(frozen=True)
class DataSpec:
    tasks: tuple[GeneratorSpec, ...] = (GeneratorSpec(),)
    n_train: int = 200
    n_val: int = 100
    n_test: int = 200
    bank_corruption: float = 0.1

    def validate(self):
        if not self.tasks:
            raise InvalidSpec("at least one task is required")
        for t in self.tasks:
            t.validate()
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidSpec("split sizes must be positive")
        if not 0.0 <= self.bank_corruption <= 1.0:
            raise InvalidSpec("bank_corruption must lie in [0, 1]")
        dims = {t.dim for t in self.tasks}
        if len(dims) != 1:
            raise InvalidSpec("all tasks must share one input space")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class TaskData:
    train: Split
    val: Split
    test: Split


@dataclass
class DatasetBundle:
    tasks: list[TaskData]
    bank: Split
    corrupted: np.ndarray = field(repr=False)
    spec: DataSpec = field(default_factory=DataSpec)
    seed: int = 0

    def to_npz(self) -> bytes:
        arrays = {"bank.x": self.bank.x, "bank.y": self.bank.y, "bank.corrupted": self.corrupted}
        for i, t in enumerate(self.tasks):
            for name in ("train", "val", "test"):
                s = getattr(t, name)
                arrays[f"task{i}.{name}.x"] = s.x
                arrays[f"task{i}.{name}.y"] = s.y
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()


def _rotate(x: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return x
    c, s = np.cos(angle), np.sin(angle)
    out = x.copy()
    out[:, :2] = x[:, :2] @ np.array([[c, s], [-s, c]])
    return out


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def _sample(spec: GeneratorSpec, n: int, rng) -> Split:
    y = _balanced_labels(n, spec.classes, rng)
    x = np.zeros((n, spec.dim))
    if spec.kind == "blobs":
        ang = 2 * np.pi * np.arange(spec.classes) / spec.classes
        centers = np.zeros((spec.classes, spec.dim))
        centers[:, 0] = spec.separation / 2 * np.cos(ang)
        centers[:, 1] = spec.separation / 2 * np.sin(ang)
        x = centers[y] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    elif spec.kind == "moons":
        t = rng.uniform(0.0, np.pi, size=n)
        x[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t)) - 0.5
        x[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t)) - 0.25
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
    else:
        quad = rng.integers(0, 2, size=n)
        sx = np.where(quad == 1, 1.0, -1.0)
        sy = np.where(y == 0, sx, -sx)
        x[:, 0], x[:, 1] = sx, sy
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
    return Split(_rotate(x, spec.rotation), y.astype(np.int64))


def generate_data(spec: DataSpec, seed: int) -> DatasetBundle:
    """Deterministic train/val/test splits per task plus a test bank.

    The bank is the first task's validation split with a fraction of its
    labels moved to a different class.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    tasks = []
    for t in spec.tasks:
        tasks.append(TaskData(_sample(t, spec.n_train, rng), _sample(t, spec.n_val, rng),
                              _sample(t, spec.n_test, rng)))
    val = tasks[0].val
    n_bad = int(round(spec.bank_corruption * len(val)))
    corrupted = np.zeros(len(val), dtype=bool)
    corrupted[rng.choice(len(val), size=n_bad, replace=False)] = True
    classes = spec.tasks[0].classes
    shift = rng.integers(1, classes, size=len(val))
    bank_y = np.where(corrupted, (val.y + shift) % classes, val.y)
    bank = Split(val.x.copy(), bank_y.astype(np.int64))
    return DatasetBundle(tasks, bank, corrupted, spec, seed)
