from collections import Counter

import numpy as np
import pytest

from depthseg.augment import (
    AugConfig,
    PatchSlot,
    adjust,
    apply_patch_shuffle,
    augment_batch,
    draw_permutation,
    draw_slots,
    flip_sample,
    hflip,
    patch_mixup,
    patch_sides,
    photometric,
)
from depthseg.data import Sample
from depthseg.depth_space import DepthMap

ZERO = AugConfig(brightness=0, contrast=0, gamma=0, hue=0, saturation=0)


def make_sample(rng, h=8, w=8, k=5, sid=""):
    image = rng.random((h, w, 3)).astype(np.float32)
    depth = rng.uniform(0.1, 10, (h, w))
    valid = rng.random((h, w)) > 0.1
    labels = rng.integers(0, k, (h, w))
    labels[rng.random((h, w)) < 0.05] = 255
    return Sample(image, DepthMap(np.where(valid, depth, 0.0), valid), labels, sid)


def tuples(batch):
    out = Counter()
    for s in batch:
        for i in range(s.labels.shape[0]):
            for j in range(s.labels.shape[1]):
                out[(tuple(s.image[i, j].tolist()), float(s.depth.values[i, j]), int(s.labels[i, j]),
                     bool(s.depth.valid[i, j]))] += 1
    return out


def same(a: Sample, b: Sample) -> bool:
    return (
        np.array_equal(a.image, b.image)
        and np.array_equal(a.depth.values, b.depth.values)
        and np.array_equal(a.depth.valid, b.depth.valid)
        and np.array_equal(a.labels, b.labels)
    )


# ---------------------------------------------------------------------------
# photometric


def test_zero_ranges_are_identity(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(photometric(img, rng, ZERO), img)


def test_neutral_parameters_are_identity(rng):
    img = rng.random((8, 8, 3))
    assert np.array_equal(adjust(img, brightness=0, contrast=1, gamma=1, hue=0, saturation=0), img)


def test_gamma_two_on_half():
    out = adjust(np.full((4, 4, 3), 0.5), gamma=2.0)
    assert np.allclose(out, 0.25, atol=1e-15)


def test_photometric_stays_in_unit_range(rng):
    cfg = AugConfig(brightness=0.5, contrast=0.9, gamma=0.9, hue=0.5, saturation=0.5)
    for _ in range(20):
        out = photometric(rng.random((8, 8, 3)), rng, cfg)
        assert out.min() >= 0 and out.max() <= 1


def test_hue_shift_full_turn_is_identity(rng):
    img = rng.random((6, 6, 3))
    assert np.allclose(adjust(img, hue=1.0), img, atol=1e-9)


def test_photometric_consumes_fixed_draws(rng):
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    photometric(np.full((2, 2, 3), 0.5), a, ZERO)
    photometric(np.full((2, 2, 3), 0.5), b, AugConfig())
    assert a.random() == b.random()


def test_augment_batch_leaves_maps_alone_without_geometry(rng):
    batch = [make_sample(rng) for _ in range(3)]
    cfg = AugConfig(flip_p=0.0, mixup_p=0.0, brightness=0.3)
    out = augment_batch(batch, rng, cfg)
    for a, b in zip(batch, out):
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.depth.values, b.depth.values)
        assert not np.array_equal(a.image, b.image)


# ---------------------------------------------------------------------------
# flip


def test_flip_definition(rng):
    s = make_sample(rng)
    f = flip_sample(s)
    w = s.labels.shape[1]
    for i, j in [(0, 0), (3, 5), (7, 7)]:
        assert f.depth.values[i, j] == s.depth.values[i, w - 1 - j]
        assert f.labels[i, j] == s.labels[i, w - 1 - j]
        assert f.depth.valid[i, j] == s.depth.valid[i, w - 1 - j]
        assert np.array_equal(f.image[i, j], s.image[i, w - 1 - j])


def test_double_flip_identity(rng):
    s = make_sample(rng)
    assert same(flip_sample(flip_sample(s)), s)


def test_flip_probability_bounds(rng):
    s = make_sample(rng)
    assert same(hflip(s, rng, 0.0), s)
    assert same(hflip(s, rng, 1.0), flip_sample(s))


# ---------------------------------------------------------------------------
# patch mixup


def test_patch_sides_grid():
    assert patch_sides(64, 64, AugConfig()) == [8, 16, 24, 32]
    with pytest.raises(ValueError):
        patch_sides(8, 3, AugConfig())


def test_slots_inside_image(rng):
    cfg = AugConfig()
    for s in draw_slots(rng, 4, 64, 48, cfg):
        assert s.side in (8, 16, 24, 32)
        assert 0 <= s.y <= 64 - s.side and 0 <= s.x <= 48 - s.side


def test_n_zero_identity(rng):
    batch = [make_sample(rng) for _ in range(3)]
    out = patch_mixup(batch, rng, AugConfig(n_patches=0))
    assert all(same(a, b) for a, b in zip(batch, out))


def test_identity_permutation_identity(rng):
    batch = [make_sample(rng) for _ in range(2)]
    slots = [PatchSlot(0, 0, 0, 4), PatchSlot(1, 2, 2, 4)]
    out = apply_patch_shuffle(batch, slots, [0, 1])
    assert all(same(a, b) for a, b in zip(batch, out))


def test_swap_moves_pixels_with_labels(rng):
    a, b = make_sample(rng), make_sample(rng)
    slots = [PatchSlot(0, 1, 2, 3), PatchSlot(1, 4, 0, 3)]
    out = apply_patch_shuffle([a, b], slots, [1, 0])
    assert np.array_equal(out[0].image[1:4, 2:5], b.image[4:7, 0:3])
    assert np.array_equal(out[0].labels[1:4, 2:5], b.labels[4:7, 0:3])
    assert np.array_equal(out[1].depth.values[4:7, 0:3], a.depth.values[1:4, 2:5])
    assert np.array_equal(out[1].depth.valid[4:7, 0:3], a.depth.valid[1:4, 2:5])
    # outside the slot nothing moves
    assert np.array_equal(out[0].labels[5:], a.labels[5:])
    assert tuples(out) == tuples([a, b])


def test_conservation_with_disjoint_equal_patches(rng):
    for trial in range(10):
        batch = [make_sample(rng, sid=str(i)) for i in range(3)]
        corners = [(0, 0), (0, 4), (4, 0), (4, 4)]
        slots = []
        for b in range(3):
            for y, x in rng.permutation(corners)[:2]:
                slots.append(PatchSlot(b, int(y), int(x), 4))
        perm = draw_permutation(rng, slots, cross_image=True)
        out = apply_patch_shuffle(batch, slots, perm)
        assert tuples(out) == tuples(batch)


def test_within_image_permutation_stays_in_image(rng):
    slots = [PatchSlot(b, 0, 4 * k, 4) for b in range(3) for k in range(2)]
    for _ in range(20):
        perm = draw_permutation(rng, slots, cross_image=False)
        assert all(slots[p].image == slots[j].image for j, p in enumerate(perm))


def test_permutation_only_within_size_groups(rng):
    slots = [PatchSlot(0, 0, 0, 2), PatchSlot(1, 0, 0, 4), PatchSlot(1, 4, 4, 2), PatchSlot(0, 4, 4, 4)]
    for _ in range(20):
        perm = draw_permutation(rng, slots, cross_image=True)
        assert sorted(perm.tolist()) == [0, 1, 2, 3]
        assert all(slots[p].side == slots[j].side for j, p in enumerate(perm))


def test_mismatched_paste_raises(rng):
    batch = [make_sample(rng) for _ in range(2)]
    with pytest.raises(ValueError):
        apply_patch_shuffle(batch, [PatchSlot(0, 0, 0, 2), PatchSlot(1, 0, 0, 4)], [1, 0])


def test_later_pastes_overwrite(rng):
    a, b = make_sample(rng), make_sample(rng)
    # slots 0 and 2 overlap in image 0; slot 2 is pasted last
    slots = [PatchSlot(0, 0, 0, 4), PatchSlot(1, 0, 0, 4), PatchSlot(0, 2, 2, 4), PatchSlot(1, 4, 4, 4)]
    out = apply_patch_shuffle([a, b], slots, [1, 0, 3, 2])
    assert np.array_equal(out[0].labels[2:6, 2:6], b.labels[4:8, 4:8])
    assert np.array_equal(out[0].labels[0:2, 0:4], b.labels[0:2, 0:4])


def test_mixup_keeps_shapes_and_label_set(rng):
    batch = [make_sample(rng, 16, 16) for _ in range(4)]
    for _ in range(10):
        out = patch_mixup(batch, rng, AugConfig())
        for s in out:
            assert s.image.shape == (16, 16, 3) and s.labels.shape == (16, 16)
            assert set(np.unique(s.labels)) <= set(range(5)) | {255}


def test_mixup_deterministic_given_seed():
    batch = [make_sample(np.random.default_rng(i), 16, 16) for i in range(3)]
    a = augment_batch(batch, np.random.default_rng(9), AugConfig(mixup_p=1.0))
    b = augment_batch(batch, np.random.default_rng(9), AugConfig(mixup_p=1.0))
    assert all(same(x, y) for x, y in zip(a, b))


def test_mixup_requires_equal_sizes(rng):
    with pytest.raises(ValueError):
        patch_mixup([make_sample(rng, 8, 8), make_sample(rng, 16, 16)], rng, AugConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        AugConfig(min_frac=0.6, max_frac=0.5)
    with pytest.raises(ValueError):
        AugConfig(flip_p=1.5)
    with pytest.raises(ValueError):
        AugConfig(n_patches=-1)
