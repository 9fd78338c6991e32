import dataclasses
import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gren import synthgen
from gren.synthgen import Box, DatasetError, SceneSpec, generate_sample, sample_seed


def test_generation_is_deterministic():
    a, b = generate_sample(11), generate_sample(11)
    assert a.equals(b)
    assert not a.equals(generate_sample(12))


def test_lesion_probability_zero_gives_healthy_scenes():
    spec = SceneSpec(lesion_probability=0.0)
    for seed in range(20):
        s = generate_sample(seed, spec)
        assert not s.labels.any() and not s.boxes


def test_class_prevalence_near_half():
    labels = np.array([generate_sample(sample_seed(3, i)).labels for i in range(1000)])
    assert np.all(np.abs(labels.mean(axis=0) - 0.5) <= 0.05)


def test_lesion_radius_too_large_rejected():
    with pytest.raises(ValueError, match="exceeds lung extent"):
        generate_sample(0, SceneSpec(lesion_radius_range=(10.0, 40.0)))


@pytest.mark.parametrize("kwargs", [
    {"image_side": 8}, {"num_classes": 0}, {"lesion_radius_range": (5.0, 2.0)},
    {"lesion_contrast_range": (0.0, 0.1)}, {"annotated_fraction": 1.5}, {"noise_sigma": -0.1},
])
def test_scene_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.floats(0.0, 1.0))
def test_sample_invariants(seed, k, annotated_fraction):
    s = generate_sample(seed, SceneSpec(num_classes=k, annotated_fraction=annotated_fraction))
    assert not np.any(s.left_mask & s.right_mask)
    assert np.all(s.annotated <= s.labels)
    assert {b.k for b in s.boxes} == set(np.flatnonzero(s.annotated))
    lungs = s.left_mask | s.right_mask
    for b in s.boxes:
        region = np.zeros_like(lungs)
        region[b.y0:b.y1 + 1, b.x0:b.x1 + 1] = True
        # the box is the bounding box of the lesion's in-lung footprint
        assert (region & lungs).any()
        in_left = (region & s.left_mask).any()
        in_right = (region & s.right_mask).any()
        assert in_left != in_right
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    np.testing.assert_array_equal(np.round(s.image * 255) / 255, s.image)


def test_lungs_are_mirror_images():
    s = generate_sample(5)
    np.testing.assert_array_equal(s.left_mask, s.right_mask[:, ::-1])


def test_lesions_are_one_sided():
    """Each lesion changes pixels in exactly one lung relative to its healthy twin."""
    spec = SceneSpec(noise_sigma=0.0, num_classes=1, lesion_probability=1.0)
    healthy = SceneSpec(noise_sigma=0.0, num_classes=1, lesion_probability=0.0)
    for seed in range(30):
        s, h = generate_sample(seed, spec), generate_sample(seed, healthy)
        changed = s.image != h.image
        assert changed[s.left_mask].any() != changed[s.right_mask].any()


def test_annotated_fraction_zero_means_no_boxes():
    spec = SceneSpec(annotated_fraction=0.0)
    for seed in range(50):
        s = generate_sample(seed, spec)
        assert not s.annotated.any() and not s.boxes


# ---------------------------------------------------------------- on disk


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 5)).astype(np.float64) / 255.0
    synthgen.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(synthgen.read_pgm(tmp_path / "a.pgm") / 255.0, img)
    mask = np.eye(4, dtype=bool)
    synthgen.write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(synthgen.read_pgm(tmp_path / "m.pgm"), mask * 255)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([10, 200]))
    np.testing.assert_array_equal(synthgen.read_pgm(path), [[10, 200]])


@pytest.mark.parametrize("payload", [b"P2\n1 1\n255\n0", b"P5\n4 4\n255\n" + bytes(3), b"P5\n4"])
def test_pgm_corrupt(tmp_path, payload):
    path = tmp_path / "bad.pgm"
    path.write_bytes(payload)
    with pytest.raises(DatasetError):
        synthgen.read_pgm(path)


def test_generate_dataset_files_and_reload(tmp_path):
    m = synthgen.generate_dataset(SceneSpec(), 8, 4, tmp_path)
    assert [e["id"] for e in m.entries] == [f"{i:05d}" for i in range(8)]
    assert len(list(tmp_path.glob("*.pgm"))) == 24
    doc = json.loads(m.path.read_text())
    assert set(doc) == {"version", "seed", "spec", "samples"}
    assert set(doc["samples"][0]) == {"id", "image", "left_mask", "right_mask", "labels", "lambda", "boxes"}
    loaded = synthgen.load_dataset(m.path)
    for i, s in enumerate(loaded):
        assert s.equals(generate_sample(sample_seed(4, i)))


def test_generate_dataset_first_index(tmp_path):
    m = synthgen.generate_dataset(SceneSpec(), 2, 4, tmp_path, first_index=6)
    assert [e["id"] for e in m.entries] == ["00006", "00007"]
    assert synthgen.load_dataset(m.path)[1].equals(generate_sample(sample_seed(4, 7)))


def test_generate_dataset_is_byte_identical(tmp_path):
    a = synthgen.generate_dataset(SceneSpec(), 3, 9, tmp_path / "a")
    b = synthgen.generate_dataset(SceneSpec(), 3, 9, tmp_path / "b")
    for name in ["manifest.json", "00000.pgm", "00002_left.pgm"]:
        assert (a.root / name).read_bytes() == (b.root / name).read_bytes()


def test_generate_dataset_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        synthgen.generate_dataset(SceneSpec(), 0, 0, tmp_path)


def test_generate_dataset_unwritable_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match=str(blocker)):
        synthgen.generate_dataset(SceneSpec(), 1, 0, blocker / "sub")


def test_load_reports_missing_file_by_id(tmp_path):
    m = synthgen.generate_dataset(SceneSpec(), 3, 0, tmp_path)
    (tmp_path / "00001_right.pgm").unlink()
    with pytest.raises(DatasetError, match="sample 00001"):
        synthgen.load_dataset(m.path)


def test_load_rejects_overlapping_masks(tmp_path):
    m = synthgen.generate_dataset(SceneSpec(), 1, 0, tmp_path)
    left = synthgen.read_pgm(tmp_path / "00000_left.pgm")
    synthgen.write_pgm(tmp_path / "00000_right.pgm", left > 0)
    with pytest.raises(DatasetError, match="overlapping lung masks"):
        synthgen.load_dataset(m.path)


def test_load_rejects_bad_version(tmp_path):
    m = synthgen.generate_dataset(SceneSpec(), 1, 0, tmp_path)
    doc = json.loads(m.path.read_text())
    doc["version"] = 99
    m.path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="version"):
        synthgen.read_manifest(m.path)


def test_sample_validate_rejects_box_without_annotation():
    s = generate_sample(1, SceneSpec(annotated_fraction=0.0, lesion_probability=1.0))
    bad = dataclasses.replace(s, boxes=[Box(0, 40, 40, 42, 42)])
    with pytest.raises(DatasetError):
        bad.validate()


# ---------------------------------------------------------------- batches


def test_make_batches_drops_tail_and_is_deterministic():
    samples = [generate_sample(i) for i in range(10)]
    batches = synthgen.make_batches(samples, 4, shuffle_seed=3)
    assert [len(b) for b in batches] == [4, 4]
    again = synthgen.make_batches(samples, 4, shuffle_seed=3)
    assert [[s.sample_id for s in b.samples] for b in batches] == [[s.sample_id for s in b.samples] for b in again]
    assert len(list(combinations(range(len(batches[0])), 2))) == 6
    assert batches[0].hashes[0] == synthgen.region_hashes(batches[0].samples[0])


def test_make_batches_rejects_singletons():
    with pytest.raises(ValueError):
        synthgen.make_batches([generate_sample(0)] * 3, 1, 0)


def test_region_hashes_of_healthy_scenes_are_closer_after_mirroring():
    spec = SceneSpec(lesion_probability=0.0)
    mirrored, plain = [], []
    for seed in range(40):
        s = generate_sample(seed, spec)
        h = synthgen.region_hashes(s)
        mirrored.append(bin(h.left_flipped ^ h.right).count("1"))
        plain.append(bin(h.left ^ h.right).count("1"))
    assert np.mean(mirrored) < np.mean(plain)
