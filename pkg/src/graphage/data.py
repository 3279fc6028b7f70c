"""Synthetic image corpus and dataset manifests.

Ages must be recoverable from pixels by construction, so each image
renders concentric rings around the center: one ring per full decade of
age, with the ring width growing inside the decade. Seeded noise and a
radial shading base keep the task nontrivial without hiding the signal.
labels.csv rows follow `file,age[,mu,sigma]`.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

__all__ = [
    "DataRecord",
    "DatasetManifest",
    "SyntheticSpec",
    "generate_synthetic",
    "load_image",
    "load_images",
    "load_manifest",
    "render_face",
    "ring_radii",
    "ring_thickness",
]


@dataclass
class SyntheticSpec:
    count: int = 2000
    size: int = 48
    seed: int = 0
    noise: float = 0.1
    age_min: int = 1
    age_max: int = 90

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.size < 16:
            raise ConfigError(f"size must be >= 16, got {self.size}")
        if not 0 <= self.age_min <= self.age_max <= 120:
            raise ConfigError(
                f"age range [{self.age_min}, {self.age_max}] must sit inside [0, 120]"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


@dataclass
class DataRecord:
    file: str
    age: float
    mu: float | None = None
    sigma: float | None = None


@dataclass
class DatasetManifest:
    root: str
    records: list[DataRecord]
    train_idx: np.ndarray
    test_idx: np.ndarray
    split_seed: int

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age for r in self.records])


def ring_radii(age: float, size: int, max_age: int = 90) -> np.ndarray:
    """Radii (pixels) of the rings rendered for an age: floor(age/10)
    rings, evenly spaced between the inner radius and 40% of the size."""
    count = int(age // 10)
    if count == 0:
        return np.zeros(0)
    inner = 0.065 * size
    outer = 0.40 * size
    slots = max(int(max_age // 10) - 1, 1)
    step = (outer - inner) / slots
    return inner + step * np.arange(count)


def ring_thickness(age: float, size: int) -> float:
    """Ring width in pixels: grows with the age's position inside its
    decade, so the decade remainder is visible."""
    return (0.55 + 0.12 * (age % 10)) * (size / 48.0)


def render_face(
    age: float, size: int, rng: np.random.Generator, noise: float = 0.1,
    max_age: int = 90,
) -> np.ndarray:
    """One (size, size, 3) image in [0, 1] encoding the age in its rings."""
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    dist = np.hypot(xx - center, yy - center)

    shading = 0.75 - 0.25 * dist / (0.5 * size)
    rings = np.zeros_like(dist)
    t = ring_thickness(age, size)
    for r in ring_radii(age, size, max_age):
        rings += np.exp(-((dist - r) ** 2) / (2.0 * t * t))
    gray = shading - 0.45 * rings

    tint = np.array([1.0, 0.92, 0.84])
    img = gray[:, :, None] * tint[None, None, :]
    if noise > 0:
        img = img + rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> DatasetManifest:
    """Write the corpus (PNG images plus labels.csv) and load it back.

    Fully determined by the spec: the same spec always produces byte-
    identical files. The annotation columns use mu = age with a fixed
    2-year sigma.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    ages = rng.integers(spec.age_min, spec.age_max + 1, size=spec.count)
    rows = []
    for i, age in enumerate(ages):
        img = render_face(float(age), spec.size, rng, spec.noise, spec.age_max)
        name = f"img_{i:05d}.png"
        data = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(data, "RGB").save(os.path.join(out_dir, name))
        rows.append((name, int(age), int(age), 2.0))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "age", "mu", "sigma"])
        writer.writerows(rows)
    return load_manifest(out_dir, split_seed=spec.seed)


def load_manifest(
    path: str, split_seed: int = 0, train_fraction: float = 0.8
) -> DatasetManifest:
    """Read labels.csv, validate every row, and assign the seeded
    train/test split."""
    csv_path = os.path.join(path, "labels.csv")
    if not os.path.isfile(csv_path):
        raise DataError(f"no labels.csv under {path}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    records: list[DataRecord] = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["file", "age"]:
            raise DataError("labels.csv must start with a `file,age[,mu,sigma]` header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) not in (2, 4):
                raise DataError(f"row {lineno}: expected 2 or 4 fields, got {len(row)}")
            name = row[0].strip()
            full = os.path.join(path, name)
            if not os.path.isfile(full):
                raise DataError(f"row {lineno}: missing image file {name!r}")
            try:
                age = float(row[1])
            except ValueError:
                raise DataError(f"row {lineno}: age {row[1]!r} is not a number") from None
            if not 0.0 <= age <= 120.0 or not np.isfinite(age):
                raise DataError(f"row {lineno}: age {age} outside [0, 120]")
            mu = sigma = None
            if len(row) == 4:
                try:
                    mu, sigma = float(row[2]), float(row[3])
                except ValueError:
                    raise DataError(f"row {lineno}: bad mu/sigma pair") from None
                if sigma <= 0:
                    raise DataError(f"row {lineno}: sigma must be positive, got {sigma}")
            records.append(DataRecord(file=name, age=age, mu=mu, sigma=sigma))
    if not records:
        raise DataError(f"{csv_path} lists no samples")
    n = len(records)
    order = np.random.default_rng(split_seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1) if n > 1 else 1
    return DatasetManifest(
        root=path,
        records=records,
        train_idx=np.sort(order[:n_train]),
        test_idx=np.sort(order[n_train:]),
        split_seed=split_seed,
    )


def load_image(path: str) -> np.ndarray:
    """Decode one image file as a float array in [0, 1]."""
    if not os.path.isfile(path):
        raise DataError(f"no image at {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_images(manifest: DatasetManifest, indices) -> list[np.ndarray]:
    """Decode the referenced images as float arrays in [0, 1]."""
    return [
        load_image(os.path.join(manifest.root, manifest.records[int(i)].file))
        for i in np.asarray(indices, dtype=np.int64)
    ]
