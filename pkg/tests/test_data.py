"""Synthetic corpus and manifest handling."""

import hashlib
import os

import numpy as np
import pytest

from graphage.data import (
    SyntheticSpec,
    generate_synthetic,
    load_images,
    load_manifest,
    render_face,
    ring_radii,
    ring_thickness,
)
from graphage.errors import ConfigError, DataError


def write_labels(tmp_path, lines):
    (tmp_path / "labels.csv").write_text("\n".join(lines) + "\n")


def write_png(tmp_path, name, size=16):
    from PIL import Image

    arr = np.zeros((size, size, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(tmp_path / name)


# ---------------------------------------------------------------- rendering


def test_ring_count_is_one_per_decade():
    assert ring_radii(0, 48).size == 0
    assert ring_radii(7, 48).size == 0
    assert ring_radii(10, 48).size == 1
    assert ring_radii(57, 48).size == 5
    assert ring_radii(90, 48).size == 9


def test_ring_radii_increase_and_stay_inside_the_image():
    radii = ring_radii(90, 48)
    assert np.all(np.diff(radii) > 0)
    assert radii[0] > 0
    assert radii[-1] <= 0.40 * 48 + 1e-9


def test_ring_thickness_tracks_the_decade_remainder():
    assert ring_thickness(39, 48) > ring_thickness(31, 48)
    assert ring_thickness(23, 96) == pytest.approx(2.0 * ring_thickness(23, 48))


def test_render_shape_and_range():
    img = render_face(42, 32, np.random.default_rng(0))
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_is_deterministic_per_seed():
    a = render_face(42, 32, np.random.default_rng(7))
    b = render_face(42, 32, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_distant_ages_render_differently():
    a = render_face(12, 48, np.random.default_rng(0), noise=0.0)
    b = render_face(83, 48, np.random.default_rng(0), noise=0.0)
    assert np.abs(a - b).mean() > 0.01


# ---------------------------------------------------------------- corpus


def tree_hash(root):
    digest = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        digest.update(name.encode())
        with open(os.path.join(root, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


def test_generate_writes_pngs_and_labels(tmp_path):
    spec = SyntheticSpec(count=8, size=32, seed=3)
    manifest = generate_synthetic(spec, str(tmp_path / "corpus"))
    files = sorted(os.listdir(tmp_path / "corpus"))
    assert files == sorted([f"img_{i:05d}.png" for i in range(8)] + ["labels.csv"])
    assert len(manifest.records) == 8
    for rec in manifest.records:
        assert spec.age_min <= rec.age <= spec.age_max
        assert rec.mu == rec.age
        assert rec.sigma == 2.0


def test_generate_is_byte_identical_per_spec(tmp_path):
    spec = SyntheticSpec(count=6, size=32, seed=11)
    generate_synthetic(spec, str(tmp_path / "a"))
    generate_synthetic(spec, str(tmp_path / "b"))
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_different_seed_changes_the_corpus(tmp_path):
    generate_synthetic(SyntheticSpec(count=6, size=32, seed=1), str(tmp_path / "a"))
    generate_synthetic(SyntheticSpec(count=6, size=32, seed=2), str(tmp_path / "b"))
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "b")


def test_loaded_pixels_match_the_render_to_quantization(tmp_path):
    spec = SyntheticSpec(count=3, size=32, seed=5)
    manifest = generate_synthetic(spec, str(tmp_path / "corpus"))
    images = load_images(manifest, [0, 1, 2])
    rng = np.random.default_rng(spec.seed)
    ages = rng.integers(spec.age_min, spec.age_max + 1, size=spec.count)
    for img, age in zip(images, ages):
        expect = np.round(render_face(float(age), 32, rng, spec.noise, spec.age_max) * 255.0)
        assert np.array_equal(img, expect / 255.0)


def test_spec_rejects_bad_ranges():
    with pytest.raises(ConfigError, match="count"):
        SyntheticSpec(count=0)
    with pytest.raises(ConfigError, match="size"):
        SyntheticSpec(size=8)
    with pytest.raises(ConfigError, match="age range"):
        SyntheticSpec(age_min=50, age_max=40)


# ---------------------------------------------------------------- manifests


def test_split_is_deterministic_and_partitions(tmp_path):
    spec = SyntheticSpec(count=20, size=32, seed=2)
    generate_synthetic(spec, str(tmp_path / "c"))
    m1 = load_manifest(str(tmp_path / "c"), split_seed=9)
    m2 = load_manifest(str(tmp_path / "c"), split_seed=9)
    assert np.array_equal(m1.train_idx, m2.train_idx)
    assert np.array_equal(m1.test_idx, m2.test_idx)
    merged = np.sort(np.concatenate([m1.train_idx, m1.test_idx]))
    assert np.array_equal(merged, np.arange(20))
    assert m1.train_idx.size == 16 and m1.test_idx.size == 4

    m3 = load_manifest(str(tmp_path / "c"), split_seed=10)
    assert not np.array_equal(m1.train_idx, m3.train_idx)


def test_two_field_rows_leave_annotations_unset(tmp_path):
    write_png(tmp_path, "x.png")
    write_labels(tmp_path, ["file,age", "x.png,31"])
    m = load_manifest(str(tmp_path))
    assert m.records[0].age == 31.0
    assert m.records[0].mu is None and m.records[0].sigma is None


def test_missing_labels_file(tmp_path):
    with pytest.raises(DataError, match="labels.csv"):
        load_manifest(str(tmp_path))


def test_bad_header(tmp_path):
    write_labels(tmp_path, ["name,years", "x.png,31"])
    with pytest.raises(DataError, match="header"):
        load_manifest(str(tmp_path))


def test_row_errors_carry_line_numbers(tmp_path):
    write_png(tmp_path, "x.png")
    cases = [
        (["file,age", "x.png,31,2"], "row 2.*fields"),
        (["file,age", "x.png,31", "gone.png,12"], "row 3.*missing image"),
        (["file,age", "x.png,old"], "row 2.*not a number"),
        (["file,age", "x.png,130"], r"row 2.*outside \[0, 120\]"),
        (["file,age,mu,sigma", "x.png,31,31,0"], "row 2.*sigma"),
        (["file,age,mu,sigma", "x.png,31,31,abc"], "row 2.*mu/sigma"),
    ]
    for lines, pattern in cases:
        write_labels(tmp_path, lines)
        with pytest.raises(DataError, match=pattern):
            load_manifest(str(tmp_path))


def test_header_only_file_is_rejected(tmp_path):
    write_labels(tmp_path, ["file,age"])
    with pytest.raises(DataError, match="no samples"):
        load_manifest(str(tmp_path))


def test_age_is_linearly_recoverable_from_downsampled_pixels(tmp_path):
    # sanity floor: the corpus must carry enough signal for a plain
    # ridge probe on 8x8 block-averaged pixels to beat 8 years MAE,
    # at the default image size and noise level
    from graphage.metrics import linear_probe

    spec = SyntheticSpec(count=500, size=48, seed=0)
    manifest = generate_synthetic(spec, str(tmp_path / "corpus"))
    images = load_images(manifest, np.arange(500))
    feats = np.stack(
        [img.reshape(8, 6, 8, 6, 3).mean(axis=(1, 3)).reshape(-1) for img in images]
    )
    err = linear_probe(feats, manifest.ages, lam=100.0)
    assert err < 8.0
