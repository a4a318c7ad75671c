"""Deterministic synthetic datasets.

``cls``: each class owns a prototype built from a few Gaussian bumps; samples
are jittered, rescaled prototypes plus pixel noise. ``den``: random smooth
bump images paired with noisy copies.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import io


@dataclass(frozen=True)
class DatasetSpec:
    task: str = "cls"
    classes: int = 4
    channels: int = 1
    size: int = 8
    n_train: int = 1024
    n_test: int = 512
    noise: float = 0.6
    bumps: int = 3
    separation: float = 1.0

    def __post_init__(self):
        if self.task not in ("cls", "den"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "cls" and self.classes < 2:
            raise ValueError("cls needs at least two classes")
        if min(self.channels, self.size, self.n_train, self.n_test, self.bumps) < 1:
            raise ValueError("dataset dimensions and counts must be positive")
        if self.noise < 0 or self.separation <= 0:
            raise ValueError("noise must be >= 0 and separation > 0")

    @property
    def name(self) -> str:
        return f"{self.task}{self.classes if self.task == 'cls' else ''}-{self.size}px"


@dataclass
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


def _bump_images(rng: np.random.Generator, n: int, spec: DatasetSpec, bumps: int) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    centers = rng.uniform(0, s - 1, size=(n, spec.channels, bumps, 2))
    widths = rng.uniform(0.8, 2.0, size=(n, spec.channels, bumps))
    amps = rng.choice([-1.0, 1.0], size=(n, spec.channels, bumps)) * rng.uniform(0.6, 1.4, size=(n, spec.channels, bumps))
    d2 = (yy - centers[..., 0, None, None]) ** 2 + (xx - centers[..., 1, None, None]) ** 2
    return (amps[..., None, None] * np.exp(-d2 / (2 * widths[..., None, None] ** 2))).sum(axis=2)


def gen_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    n = spec.n_train + spec.n_test
    if spec.task == "cls":
        protos = _bump_images(rng, spec.classes, spec, spec.bumps) * spec.separation
        y = np.arange(n) % spec.classes
        rng.shuffle(y)
        gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
        x = protos[y] * gain + rng.normal(0.0, spec.noise, size=(n, spec.channels, spec.size, spec.size))
    else:
        clean = _bump_images(rng, n, spec, spec.bumps)
        x = clean + rng.normal(0.0, spec.noise, size=clean.shape)
        y = clean
    # round-trip through float32 so in-memory data equals what files hold
    x = x.astype(np.float32).astype(np.float64)
    if spec.task == "den":
        y = y.astype(np.float32).astype(np.float64)
    k = spec.n_train
    return Dataset(spec, x[:k], y[:k], x[k:], y[k:])


def save_dataset(ds: Dataset, directory) -> dict[str, Path]:
    d = Path(directory)
    meta = {k: v for k, v in asdict(ds.spec).items() if k != "task"}
    paths = {}
    for split, x, y in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
        paths[split] = d / f"{split}.ptsd"
        io.save_dataset(paths[split], ds.spec.task, split, x, y, **meta)
    return paths


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    tr, te = io.load_dataset(d / "train.ptsd"), io.load_dataset(d / "test.ptsd")
    fields = DatasetSpec.__dataclass_fields__
    kwargs = {k: tr[k] for k in fields if k in tr and k not in ("n_train", "n_test")}
    spec = DatasetSpec(**kwargs, n_train=tr["count"], n_test=te["count"])
    return Dataset(spec, tr["x"], tr["y"], te["x"], te["y"])


def sample_calibration(ds: Dataset, count: int, seed: int) -> np.ndarray:
    """Unlabeled calibration inputs drawn without replacement from the train split."""
    rng = np.random.default_rng(seed)
    count = min(count, len(ds.x_train))
    idx = np.sort(rng.choice(len(ds.x_train), size=count, replace=False))
    return ds.x_train[idx]
