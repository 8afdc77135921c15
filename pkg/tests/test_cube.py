import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msscab.cube import (
    WAVELENGTHS,
    BoxAnnotation,
    CubeFormatError,
    DatasetManifest,
    ManifestEntry,
    NormalizationError,
    NormCoefficients,
    Patch,
    PixelMask,
    SpectralCube,
    compute_norm_coefficients,
    format_annotations,
    load_annotations,
    load_cube,
    load_manifest,
    load_mask,
    load_planes,
    normalize_cube,
    parse_annotations,
    save_annotations,
    save_cube,
    save_manifest,
    save_mask,
    sidecar_path,
    split_counts,
    split_manifest,
)


def random_cube(rng, h=12, w=10):
    planes = rng.uniform(0.0, 2.0, size=(8, h, w))
    return SpectralCube(planes, planes.mean(axis=0))


def float32_exact(cube):
    return SpectralCube(cube.planes.astype(np.float32), cube.pan.astype(np.float32))


# --- planar files ----------------------------------------------------------
def test_cube_round_trip(tmp_path):
    cube = float32_exact(random_cube(np.random.default_rng(0)))
    save_cube(tmp_path / "c.raw", cube)
    back = load_cube(tmp_path / "c.raw")
    assert np.array_equal(back.planes, cube.planes)
    assert np.array_equal(back.pan, cube.pan)
    assert back.bands == WAVELENGTHS and not back.normalized
    assert (tmp_path / "c.raw").stat().st_size == 9 * 12 * 10 * 4


def test_payload_is_little_endian_float32_planar(tmp_path):
    planes = np.arange(8 * 2 * 3, dtype=np.float64).reshape(8, 2, 3)
    cube = SpectralCube(planes, np.full((2, 3), 7.0))
    save_cube(tmp_path / "c.raw", cube)
    raw = np.fromfile(tmp_path / "c.raw", dtype="<f4")
    assert np.array_equal(raw[:48], np.arange(48))
    assert np.array_equal(raw[48:], np.full(6, 7.0))


def test_dimension_mismatch_is_reported(tmp_path):
    cube = random_cube(np.random.default_rng(1))
    save_cube(tmp_path / "c.raw", cube)
    meta = json.loads(sidecar_path(tmp_path / "c.raw").read_text())
    meta["width"] += 1
    sidecar_path(tmp_path / "c.raw").write_text(json.dumps(meta))
    with pytest.raises(CubeFormatError, match="payload has"):
        load_cube(tmp_path / "c.raw")


def test_missing_sidecar(tmp_path):
    (tmp_path / "c.raw").write_bytes(b"\0" * 16)
    with pytest.raises(CubeFormatError, match="sidecar"):
        load_planes(tmp_path / "c.raw")


def test_bands_are_resorted_to_ascending_wavelength(tmp_path):
    rng = np.random.default_rng(2)
    cube = float32_exact(random_cube(rng))
    perm = rng.permutation(8)
    data = np.concatenate([cube.planes[perm], cube.pan[None]]).astype("<f4")
    (tmp_path / "c.raw").write_bytes(data.tobytes())
    meta = {"width": 10, "height": 12, "bands": [WAVELENGTHS[i] for i in perm], "has_pan": True}
    sidecar_path(tmp_path / "c.raw").write_text(json.dumps(meta))
    back = load_cube(tmp_path / "c.raw")
    assert np.array_equal(back.planes, cube.planes)


def test_non_finite_and_negative_rejected():
    planes = np.ones((8, 2, 2))
    planes[3, 0, 0] = np.nan
    with pytest.raises(CubeFormatError):
        SpectralCube(planes, np.ones((2, 2)))
    with pytest.raises(CubeFormatError):
        SpectralCube(-np.ones((8, 2, 2)), np.ones((2, 2)))
    with pytest.raises(CubeFormatError):
        SpectralCube(np.ones((7, 2, 2)), np.ones((2, 2)))


# --- normalization -----------------------------------------------------------
def test_coefficients_small_example():
    planes = np.stack([np.full((4, 4), float(b + 1)) for b in range(8)])
    pan = np.full((4, 4), 2.0)
    coeffs = compute_norm_coefficients(SpectralCube(planes, pan), Patch(0, 0, 2, 2))
    assert coeffs.values == tuple((b + 1) / 2.0 for b in range(8))


def test_coefficients_use_only_the_patch():
    planes = np.ones((8, 6, 6))
    planes[:, 3:, 3:] = 100.0
    pan = np.ones((6, 6))
    coeffs = compute_norm_coefficients(SpectralCube(planes, pan), Patch(0, 0, 3, 3))
    assert coeffs.values == (1.0,) * 8


def test_normalize_divides_bands_and_keeps_pan():
    rng = np.random.default_rng(3)
    cube = random_cube(rng)
    coeffs = NormCoefficients(tuple(rng.uniform(0.5, 2.0, size=8)))
    norm = normalize_cube(cube, coeffs)
    for b in range(8):
        assert np.allclose(norm.planes[b], cube.planes[b] / coeffs.values[b], rtol=1e-15)
    assert np.array_equal(norm.pan, cube.pan)
    assert norm.normalized


def test_double_normalization_rejected():
    cube = random_cube(np.random.default_rng(4))
    coeffs = NormCoefficients((1.0,) * 8)
    with pytest.raises(NormalizationError):
        normalize_cube(normalize_cube(cube, coeffs), coeffs)


def test_zero_pan_patch_rejected():
    cube = SpectralCube(np.ones((8, 4, 4)), np.zeros((4, 4)))
    with pytest.raises(NormalizationError):
        compute_norm_coefficients(cube, Patch(0, 0, 2, 2))


def test_patch_outside_rejected():
    with pytest.raises(ValueError):
        compute_norm_coefficients(random_cube(np.random.default_rng(5)), Patch(0, 0, 20, 2))


@given(st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_normalization_is_linear_in_the_scene(a, seed):
    rng = np.random.default_rng(seed)
    cube = random_cube(rng, 5, 5)
    coeffs = NormCoefficients(tuple(rng.uniform(0.2, 3.0, size=8)))
    lhs = normalize_cube(cube.scaled(a), coeffs).planes
    rhs = a * normalize_cube(cube, coeffs).planes
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=0)


@given(st.integers(0, 2**31 - 1))
def test_coefficients_invariant_to_global_gain(seed):
    rng = np.random.default_rng(seed)
    white = random_cube(rng, 6, 6)
    patch = Patch(1, 1, 5, 4)
    a = compute_norm_coefficients(white, patch).as_array()
    b = compute_norm_coefficients(white.scaled(3.5), patch).as_array()
    assert np.allclose(a, b, rtol=1e-12)


# --- masks and annotations -----------------------------------------------------
def test_mask_round_trip(tmp_path):
    labels = np.random.default_rng(6).integers(0, 3, size=(9, 7)).astype(np.uint8)
    save_mask(tmp_path / "m.png", PixelMask(labels))
    assert np.array_equal(load_mask(tmp_path / "m.png").labels, labels)


def test_mask_rejects_unknown_labels():
    with pytest.raises(CubeFormatError):
        PixelMask(np.full((2, 2), 5, dtype=np.uint8))


def test_annotation_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    boxes = [
        BoxAnnotation(int(rng.integers(0, 3)), *rng.uniform(0.1, 0.9, size=2), *rng.uniform(0.01, 0.2, size=2))
        for _ in range(100)
    ]
    save_annotations(tmp_path / "a.txt", boxes)
    back = load_annotations(tmp_path / "a.txt")
    assert len(back) == 100
    for a, b in zip(boxes, back):
        assert a.class_id == b.class_id
        assert np.allclose([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h], atol=5e-7)


def test_annotation_errors_name_the_line():
    with pytest.raises(CubeFormatError, match="line 2"):
        parse_annotations("0 0.5 0.5 0.1 0.1\n0 0.5 0.5\n")
    with pytest.raises(CubeFormatError, match="line 1"):
        parse_annotations("0 1.5 0.5 0.1 0.1\n")
    with pytest.raises(CubeFormatError, match="line 1"):
        parse_annotations("x 0.5 0.5 0.1 0.1\n")


def test_annotation_text_format():
    assert format_annotations([BoxAnnotation(0, 0.5, 0.25, 0.1, 0.2)]) == "0 0.500000 0.250000 0.100000 0.200000\n"


def test_box_pixel_conversion():
    b = BoxAnnotation.from_pixels(0, 10, 20, 30, 60, 100, 200)
    assert (b.cx, b.cy, b.w, b.h) == (0.2, 0.2, 0.2, 0.2)
    assert b.to_pixels(100, 200) == pytest.approx((10, 20, 30, 60))


# --- manifest and split ----------------------------------------------------------
def manifest_of(n):
    return DatasetManifest(tuple(ManifestEntry(f"s{i:03d}", f"s{i:03d}.raw") for i in range(n)))


def test_manifest_round_trip_and_checks(tmp_path):
    cube = random_cube(np.random.default_rng(8))
    save_cube(tmp_path / "s000.raw", cube)
    save_manifest(tmp_path / "manifest.json", manifest_of(1))
    m = load_manifest(tmp_path / "manifest.json")
    assert m.entries[0].scene_id == "s000"
    assert m.resolve("s000.raw") == tmp_path / "s000.raw"
    save_manifest(tmp_path / "manifest.json", manifest_of(2))
    with pytest.raises(CubeFormatError, match="s001"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_duplicate_ids():
    with pytest.raises(CubeFormatError, match="duplicate"):
        DatasetManifest((ManifestEntry("a", "a.raw"), ManifestEntry("a", "b.raw")))


def test_split_counts_examples():
    assert split_counts(168, (0.70, 0.15, 0.15)) == [118, 25, 25]
    assert split_counts(30, (0.70, 0.15, 0.15)) == [21, 5, 4]
    # 2.1 / 0.45 / 0.45: one leftover, the tie goes to the earlier part
    assert split_counts(3, (0.70, 0.15, 0.15)) == [2, 1, 0]
    with pytest.raises(ValueError):
        split_counts(2, (0.70, 0.15, 0.15))


def test_split_is_deterministic_and_seed_dependent():
    m = manifest_of(40)
    a = split_manifest(m, seed=3)
    b = split_manifest(m, seed=3)
    c = split_manifest(m, seed=4)
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    assert [e.split for e in a.entries] != [e.split for e in c.entries]


@given(st.integers(3, 300), st.integers(0, 2**31 - 1))
def test_split_partitions_the_manifest(n, seed):
    m = manifest_of(n)
    split = split_manifest(m, (0.70, 0.15, 0.15), seed)
    parts = [{e.scene_id for e in split.by_split(t)} for t in ("train", "val", "test")]
    assert parts[0].isdisjoint(parts[1]) and parts[0].isdisjoint(parts[2]) and parts[1].isdisjoint(parts[2])
    assert parts[0] | parts[1] | parts[2] == {e.scene_id for e in m.entries}
    assert [len(p) for p in parts] == split_counts(n, (0.70, 0.15, 0.15))


@given(st.integers(3, 500), st.lists(st.floats(0.05, 1.0), min_size=2, max_size=4))
def test_split_counts_sum_and_stay_close(n, raw):
    ratios = [r / sum(raw) for r in raw]
    if abs(sum(ratios) - 1) > 1e-9 or n < len(ratios):
        return
    counts = split_counts(n, ratios)
    assert sum(counts) == n
    assert all(abs(c - n * r) < 1 for c, r in zip(counts, ratios))
