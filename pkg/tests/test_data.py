import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from depthseg.data import (
    DataError,
    DatasetManifest,
    Sample,
    SyntheticSpec,
    center_crop,
    collate,
    denormalize,
    gen_synthetic,
    load_dataset,
    normalize,
    read_depth,
    read_labels,
    sample_to_tensors,
    synthetic_sample,
    write_depth,
    write_labels,
    write_sample,
)
from depthseg.depth_space import DepthMap

SPEC16 = SyntheticSpec(height=16, width=16, num_classes=4, d_max=10.0)


def manifest(k=5, **kw):
    return DatasetManifest(num_classes=k, d_min=0.1, d_max=10.0, **kw)


def test_depth_png_unit_convention(tmp_path):
    Image.fromarray(np.array([[5000, 0]], dtype=np.uint16)).save(tmp_path / "d.png")
    d = read_depth(tmp_path / "d.png")
    assert d.values.tolist() == [[5.0, 0.0]]
    assert d.valid.tolist() == [[True, False]]


def test_depth_png_round_trip_within_half_mm(tmp_path, rng):
    vals = rng.uniform(0.1, 60.0, (8, 8))
    valid = rng.random((8, 8)) > 0.2
    write_depth(tmp_path / "d.png", DepthMap(np.where(valid, vals, 0.0), valid))
    back = read_depth(tmp_path / "d.png")
    assert np.array_equal(back.valid, valid)
    assert np.abs(back.values - vals)[valid].max() <= 0.0005 + 1e-12


def test_depth_png_range_limit(tmp_path):
    with pytest.raises(ValueError, match="npy"):
        write_depth(tmp_path / "d.png", DepthMap(np.array([[70.0]]), np.ones((1, 1), bool)))
    write_depth(tmp_path / "d.npy", DepthMap(np.array([[70.0, 0.0]]), np.array([[True, False]])))
    back = read_depth(tmp_path / "d.npy")
    assert back.values.tolist() == [[70.0, 0.0]] and back.valid.tolist() == [[True, False]]


def test_depth_rejects_8bit_png(tmp_path):
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "d.png")
    with pytest.raises(DataError):
        read_depth(tmp_path / "d.png")


def test_labels_lossless(tmp_path, rng):
    labels = rng.integers(0, 5, (8, 8))
    labels[0, 0] = 255
    write_labels(tmp_path / "l.png", labels)
    assert np.array_equal(read_labels(tmp_path / "l.png"), labels)


def test_sample_round_trip(tmp_path):
    sample, _ = synthetic_sample(0, 0, 3, SPEC16)
    write_sample(tmp_path, "train", sample)
    (tmp_path / "manifest.json").write_text("{}")
    back = next(load_dataset(tmp_path, "train", manifest(4)))
    assert np.array_equal(back.labels, sample.labels)
    assert np.abs(back.depth.values - sample.depth.values).max() <= 0.001
    assert np.abs(back.image - sample.image).max() <= 0.5 / 255 + 1e-6


def test_empty_split_yields_nothing(tmp_path):
    assert list(load_dataset(tmp_path, "val", manifest())) == []


def test_load_order_is_lexicographic(tmp_path):
    for i in (3, 1, 2):
        s, _ = synthetic_sample(0, 0, i, SPEC16)
        write_sample(tmp_path, "train", s)
    assert [s.id for s in load_dataset(tmp_path, "train", manifest(4))] == ["000001", "000002", "000003"]


def test_missing_file_named(tmp_path):
    s, _ = synthetic_sample(0, 0, 0, SPEC16)
    write_sample(tmp_path, "train", s)
    (tmp_path / "train" / "label" / "000000.png").unlink()
    with pytest.raises(DataError, match="000000.png"):
        list(load_dataset(tmp_path, "train", manifest(4)))


def test_shape_mismatch_named(tmp_path):
    s, _ = synthetic_sample(0, 0, 0, SPEC16)
    write_sample(tmp_path, "train", s)
    write_labels(tmp_path / "train" / "label" / "000000.png", np.zeros((4, 4), int))
    with pytest.raises(DataError, match="000000"):
        list(load_dataset(tmp_path, "train", manifest(4)))


def test_out_of_range_label_named(tmp_path):
    s, _ = synthetic_sample(0, 0, 0, SPEC16)
    write_sample(tmp_path, "train", s)
    with pytest.raises(DataError, match="label"):
        list(load_dataset(tmp_path, "train", manifest(2)))


def test_manifest_round_trip_and_unknown_keys(tmp_path):
    m = manifest(class_names=["a", "b"], splits={"train": 3}, seed=1)
    m.save(tmp_path)
    back = DatasetManifest.load(tmp_path)
    assert back.num_classes == 5 and back.splits == {"train": 3} and back.root == str(tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["mystery"] = 1
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(DataError, match="mystery"):
        DatasetManifest.load(tmp_path)
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "nowhere")


def test_gen_synthetic_byte_identical(tmp_path):
    gen_synthetic(tmp_path / "a", 5, {"train": 3, "val": 2}, SPEC16)
    gen_synthetic(tmp_path / "b", 5, {"train": 3, "val": 2}, SPEC16)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def check(c):
        assert not c.left_only and not c.right_only and not c.diff_files
        assert filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)[1] == []
        for sub in c.subdirs.values():
            check(sub)

    check(cmp)


def test_gen_synthetic_contract(tmp_path):
    m = gen_synthetic(tmp_path, 1, {"train": 10}, SPEC16)
    for s in load_dataset(tmp_path, "train", m):
        assert s.depth.valid.all()
        assert s.depth.values.min() >= 0.1 - 0.0005 and s.depth.values.max() <= SPEC16.d_max
        assert s.labels.max() < 4
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_gen_synthetic_zero_count(tmp_path):
    m = gen_synthetic(tmp_path, 0, {"train": 0}, SPEC16)
    assert (tmp_path / "manifest.json").exists()
    assert list(load_dataset(tmp_path, "train", m)) == []


@pytest.mark.parametrize("k", [1, 9])
def test_gen_synthetic_class_bounds(tmp_path, k):
    with pytest.raises(ValueError):
        gen_synthetic(tmp_path, 0, {"train": 1}, SyntheticSpec(num_classes=k))


def test_depth_and_labels_follow_nearest_shape():
    # brute-force z-order: each pixel takes the class and depth of the nearest covering shape
    for index in range(20):
        sample, shapes = synthetic_sample(3, 0, index, SPEC16)
        for i in range(16):
            for j in range(16):
                covering = [s for s in shapes if s.covers(np.array(i), np.array(j))]
                if covering:
                    nearest = min(covering, key=lambda s: s.depth)
                    assert sample.depth.values[i, j] == nearest.depth
                    assert sample.labels[i, j] == nearest.class_id
                else:
                    assert sample.depth.values[i, j] == SPEC16.d_max
                    assert sample.labels[i, j] == 0


def test_shape_depths_within_bounds():
    for index in range(50):
        _, shapes = synthetic_sample(0, 0, index, SyntheticSpec())
        assert 3 <= len(shapes) <= 8
        assert all(0.1 <= s.depth <= 9.0 and 1 <= s.class_id <= 4 for s in shapes)


def test_normalize_identity_and_round_trip(rng):
    img = rng.random((4, 4, 3))
    assert np.array_equal(normalize(img, [0, 0, 0], [1, 1, 1]), img)
    back = denormalize(normalize(img, [0.4, 0.5, 0.6], [0.2, 0.3, 0.25]), [0.4, 0.5, 0.6], [0.2, 0.3, 0.25])
    assert np.abs(back - img).max() < 1e-6


def test_sample_to_tensors():
    depth = np.array([[10.0, 0.0], [0.1, 1.0]])
    s = Sample(np.full((2, 2, 3), 0.5, np.float32), DepthMap(depth, depth > 0), np.array([[0, 1], [255, 2]]))
    t = sample_to_tensors(s, manifest(3))
    assert t.image.shape == (3, 2, 2) and float(t.image.abs().max()) == 0.0
    assert t.log_depth[0, 0, 0] == pytest.approx(1.0)
    assert t.log_depth[0, 1, 0] == 0.0 and t.log_depth[0, 0, 1] == 0.0
    assert t.valid.tolist() == [[True, False], [True, True]]
    assert t.labels.tolist() == [[0, 1], [255, 2]]
    batch = collate([t, t])
    assert batch.image.shape == (2, 3, 2, 2) and batch.depth.shape == (2, 2, 2)


def test_sample_shape_check():
    with pytest.raises(ValueError):
        Sample(np.zeros((2, 2, 3)), DepthMap(np.ones((2, 3)), np.ones((2, 3), bool)), np.zeros((2, 2), int))


def test_center_crop_windows_every_map():
    s, _ = synthetic_sample(0, 0, 0, SPEC16)
    c = center_crop(s, (8, 12))
    assert c.image.shape == (8, 12, 3) and c.labels.shape == (8, 12)
    assert np.array_equal(c.labels, s.labels[4:12, 2:14])
    assert np.array_equal(c.depth.values, s.depth.values[4:12, 2:14])
    assert np.array_equal(c.image, s.image[4:12, 2:14])
    assert center_crop(s, ()) is s
    with pytest.raises(ValueError):
        center_crop(s, (17, 4))


def test_long_range_dataset_stores_float_depth(tmp_path):
    spec = SyntheticSpec(height=16, width=16, num_classes=4, d_max=80.0)
    m = gen_synthetic(tmp_path, 2, {"train": 2}, spec)
    assert sorted(p.suffix for p in (tmp_path / "train" / "depth").iterdir()) == [".npy", ".npy"]
    s = next(load_dataset(tmp_path, "train", m))
    assert s.depth.values.max() == 80.0
