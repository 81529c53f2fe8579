"""Seeded generators for the four 2-D benchmark clouds.

Every generator returns a :class:`Samples` bundle: an ``(n, 2)`` response
array ``y`` and an integer class label ``x`` per row. Randomness comes from
numpy's PCG64 bit generator seeded explicitly, so a (spec, seed) pair always
reproduces the same bytes.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

MIXTURE_CENTERS = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
MIXTURE_VAR = 0.01
GAUSSIAN_VAR = 0.1


class Kind(str, enum.Enum):
    MOONS = "moons"
    CIRCLES = "circles"
    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"


N_CLASSES = {Kind.MOONS: 2, Kind.CIRCLES: 2, Kind.GAUSSIAN: 1, Kind.MIXTURE: 4}


class LabeledSample(NamedTuple):
    y0: np.ndarray
    x: int


@dataclass(frozen=True)
class Samples:
    y: np.ndarray
    x: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.y.ndim != 2 or self.y.shape[0] != self.x.shape[0]:
            raise ValueError("y must be (n, d) with one label per row")
        if self.x.size and (self.x.min() < 0 or self.x.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.y.shape[0]

    def __iter__(self) -> Iterator[LabeledSample]:
        for row, label in zip(self.y, self.x):
            yield LabeledSample(row, int(label))

    def subset(self, idx) -> "Samples":
        return Samples(self.y[idx], self.x[idx], self.n_classes)

    def class_means(self) -> np.ndarray:
        means = np.full((self.n_classes, self.y.shape[1]), np.nan)
        for k in range(self.n_classes):
            rows = self.y[self.x == k]
            if len(rows):
                means[k] = rows.mean(axis=0)
        return means


@dataclass(frozen=True)
class DatasetSpec:
    kind: Kind
    n: int
    noise_sd: float = 0.05
    seed: int = 0
    inner_factor: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")

    @property
    def n_classes(self) -> int:
        return N_CLASSES[self.kind]


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _split(n: int) -> tuple[int, int]:
    first = n // 2
    return first, n - first


def _jitter(y: np.ndarray, noise_sd: float, rng: np.random.Generator) -> np.ndarray:
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(y.shape)
    return y


def make_moons(n: int, noise_sd: float = 0.05, seed: int = 0) -> Samples:
    n_upper, n_lower = _split(n)
    theta_u = np.linspace(0.0, np.pi, n_upper)
    theta_l = np.linspace(0.0, np.pi, n_lower)
    upper = np.column_stack([np.cos(theta_u), np.sin(theta_u)])
    lower = np.column_stack([1.0 - np.cos(theta_l), 0.5 - np.sin(theta_l)])
    y = np.vstack([upper, lower])
    x = np.concatenate([np.zeros(n_upper, int), np.ones(n_lower, int)])
    return Samples(_jitter(y, noise_sd, rng_from_seed(seed)), x, 2)


def make_circles(n: int, noise_sd: float = 0.05, inner_factor: float = 0.5,
                 seed: int = 0) -> Samples:
    if not 0.0 < inner_factor < 1.0:
        raise ValueError("inner_factor must lie in (0, 1)")
    n_outer, n_inner = _split(n)
    theta_o = np.linspace(0.0, 2 * np.pi, n_outer, endpoint=False)
    theta_i = np.linspace(0.0, 2 * np.pi, n_inner, endpoint=False)
    outer = np.column_stack([np.cos(theta_o), np.sin(theta_o)])
    inner = inner_factor * np.column_stack([np.cos(theta_i), np.sin(theta_i)])
    y = np.vstack([outer, inner])
    x = np.concatenate([np.zeros(n_outer, int), np.ones(n_inner, int)])
    return Samples(_jitter(y, noise_sd, rng_from_seed(seed)), x, 2)


def make_gaussian(n: int, seed: int = 0) -> Samples:
    rng = rng_from_seed(seed)
    y = np.sqrt(GAUSSIAN_VAR) * rng.standard_normal((n, 2))
    return Samples(y, np.zeros(n, int), 1)


def make_gaussian_mixture(n: int, seed: int = 0, components=None) -> Samples:
    """Equal-weight four-component mixture at (+-0.5, +-0.5).

    ``components`` overrides the random component draw, e.g. ``np.arange(n) % 4``.
    """
    rng = rng_from_seed(seed)
    if components is None:
        x = rng.integers(0, 4, size=n)
    else:
        x = np.asarray(components, dtype=int)
        if x.shape != (n,):
            raise ValueError("components must have one entry per sample")
    y = MIXTURE_CENTERS[x] + np.sqrt(MIXTURE_VAR) * rng.standard_normal((n, 2))
    return Samples(y, x, 4)


def generate(spec: DatasetSpec) -> Samples:
    if spec.kind is Kind.MOONS:
        return make_moons(spec.n, spec.noise_sd, spec.seed)
    if spec.kind is Kind.CIRCLES:
        return make_circles(spec.n, spec.noise_sd, spec.inner_factor, spec.seed)
    if spec.kind is Kind.GAUSSIAN:
        return make_gaussian(spec.n, spec.seed)
    return make_gaussian_mixture(spec.n, spec.seed)


def write_csv(samples: Samples, path, comment: str | None = None) -> None:
    with open(Path(path), "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["y1", "y2", "x"])
        for (a, b), label in zip(samples.y, samples.x):
            w.writerow([repr(float(a)), repr(float(b)), int(label)])


def read_csv(path, n_classes: int | None = None) -> Samples:
    with open(Path(path)) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0] != ["y1", "y2", "x"]:
        raise ValueError(f"{path}: expected header y1,y2,x")
    body = rows[1:]
    y = np.array([[float(r[0]), float(r[1])] for r in body]).reshape(-1, 2)
    x = np.array([int(r[2]) for r in body], dtype=int)
    k = n_classes if n_classes is not None else (int(x.max()) + 1 if len(x) else 1)
    return Samples(y, x, k)
