import math

import numpy as np
import pytest

import oracles
from depthseg.depth_space import DepthMap, DepthRange
from depthseg.metrics import DEPTH_KEYS, REPORT_KEYS, DepthMetrics, SegAccumulator, depth_metrics, miou, update_confusion

R = DepthRange(0.1, 80.0)


def dm(values, valid=None):
    values = np.asarray(values, dtype=np.float64)
    return DepthMap(values, np.ones(values.shape, bool) if valid is None else np.asarray(valid, bool))


def test_report_keys():
    assert REPORT_KEYS == ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "miou", "pixel_acc")


def test_perfect_prediction():
    g = dm(np.geomspace(0.2, 50, 16).reshape(4, 4))
    assert depth_metrics(g, g, R).to_dict() == dict(zip(DEPTH_KEYS, (0, 0, 0, 0, 1, 1, 1)))


def test_single_pixel_strictness():
    m = depth_metrics(dm([[5.0]]), dm([[4.0]]), R)
    assert m.abs_rel == 0.25 and m.sq_rel == 0.25 and m.rmse == 1.0
    assert m.rmse_log == pytest.approx(0.22314355131420976, abs=1e-15)
    assert (m.delta1, m.delta2, m.delta3) == (0.0, 1.0, 1.0)


def test_doubled_prediction():
    g = np.geomspace(0.2, 30, 9).reshape(3, 3)
    m = depth_metrics(dm(2 * g), dm(g), R)
    assert m.abs_rel == pytest.approx(1.0)
    assert (m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 0.0)
    assert m.rmse_log == pytest.approx(math.log(2))


def test_masking_and_clamping():
    pred = dm([[1.0, 1000.0, 3.0]])
    gt = dm([[1.0, 2.0, 0.0]], valid=[[True, True, True]])
    m = depth_metrics(pred, gt, R)
    # third pixel has gt 0 so it is excluded; pred 1000 is clamped to 80
    assert m.abs_rel == pytest.approx((0 + 78 / 2) / 2)


def test_empty_mask_raises():
    with pytest.raises(ValueError):
        depth_metrics(dm([[1.0]]), dm([[1.0]], valid=[[False]]), R)


def test_matches_loop_oracle(rng):
    for _ in range(20):
        g = np.exp(rng.uniform(np.log(0.1), np.log(80), (8, 8)))
        p = g * np.exp(rng.normal(0, 0.4, (8, 8)))
        g[rng.random((8, 8)) < 0.1] = 0.0
        got = depth_metrics(dm(p), dm(g), R).to_dict()
        want = oracles.depth_metrics(p.ravel().tolist(), g.ravel().tolist(), 0.1, 80.0)
        for k in DEPTH_KEYS:
            assert abs(got[k] - want[k]) < 1e-10, k


def test_scale_homogeneity(rng):
    g = np.exp(rng.uniform(0, 2, (6, 6)))
    p = g * np.exp(rng.normal(0, 0.3, (6, 6)))
    wide = DepthRange(1e-6, 1e6)
    a = depth_metrics(dm(p), dm(g), wide)
    b = depth_metrics(dm(3 * p), dm(3 * g), wide)
    for k in ("abs_rel", "rmse_log", "delta1", "delta2", "delta3"):
        assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-12)
    assert b.sq_rel == pytest.approx(3 * a.sq_rel, rel=1e-12)
    assert b.rmse == pytest.approx(3 * a.rmse, rel=1e-12)


def test_mean_of_metrics():
    a = DepthMetrics(*([1.0] * 7))
    b = DepthMetrics(*([3.0] * 7))
    assert DepthMetrics.mean([a, b]).to_dict() == {k: 2.0 for k in DEPTH_KEYS}


def test_confusion_hand_count():
    acc = update_confusion(SegAccumulator(2), np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert acc.confusion.tolist() == [[1, 1], [0, 2]]
    m, per_class, pa = miou(acc)
    assert m == pytest.approx(7 / 12)
    assert per_class.tolist() == [0.5, pytest.approx(2 / 3)]
    assert pa == 0.75


def test_ignored_pixels_leave_matrix_unchanged():
    acc = SegAccumulator(3)
    out = update_confusion(acc, np.array([[0, 1]]), np.array([[255, 255]]))
    assert out.confusion.sum() == 0


def test_confusion_rejects_bad_labels():
    with pytest.raises(ValueError):
        update_confusion(SegAccumulator(2), np.array([[0]]), np.array([[2]]))
    with pytest.raises(ValueError):
        update_confusion(SegAccumulator(2), np.array([[5]]), np.array([[0]]))


def test_miou_requires_pixels():
    with pytest.raises(ValueError):
        miou(SegAccumulator(3))


def test_perfect_segmentation():
    labels = np.array([[0, 2], [2, 0]])
    m, per_class, pa = miou(update_confusion(SegAccumulator(4), labels, labels))
    assert (m, pa) == (1.0, 1.0)
    assert np.isnan(per_class[1]) and np.isnan(per_class[3])


def test_miou_matches_loop_oracle(rng):
    for _ in range(20):
        gt = rng.integers(0, 5, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        pred = np.where(rng.random((8, 8)) < 0.6, np.where(gt == 255, 0, gt), rng.integers(0, 5, (8, 8)))
        m, _, pa = miou(update_confusion(SegAccumulator(5), pred, gt))
        want_m, want_pa = oracles.miou(pred.ravel().tolist(), gt.ravel().tolist(), 5, 255)
        assert abs(m - want_m) < 1e-10 and abs(pa - want_pa) < 1e-10


def test_miou_class_permutation_invariance(rng):
    gt = rng.integers(0, 4, (8, 8))
    pred = rng.integers(0, 4, (8, 8))
    perm = np.array([2, 0, 3, 1])
    m, per_class, _ = miou(update_confusion(SegAccumulator(4), pred, gt))
    m2, per_class2, _ = miou(update_confusion(SegAccumulator(4), perm[pred], perm[gt]))
    assert m2 == pytest.approx(m, abs=1e-15)
    np.testing.assert_allclose(per_class2[perm], per_class)


def test_merge_equals_joint_update(rng):
    a_gt, b_gt = rng.integers(0, 3, (2, 4, 4))
    a_p, b_p = rng.integers(0, 3, (2, 4, 4))
    acc = SegAccumulator(3)
    merged = update_confusion(acc, a_p, a_gt).merge(update_confusion(acc, b_p, b_gt))
    joint = update_confusion(acc, np.stack([a_p, b_p]), np.stack([a_gt, b_gt]))
    assert merged.confusion.tolist() == joint.confusion.tolist()
