import itertools

import numpy as np
import pytest
import torch

from conftest import smooth_field
from motionreg.core.errors import InvalidInputError, UndefinedMetricError
from motionreg.ops.volume import DisplacementField
from motionreg.services.metrics import (
    LabelVolume,
    assd,
    dice,
    hd95,
    mean_dice,
    summarize,
    surface_voxels,
    warp_labels,
)


def cube(dims, start, size, label=1) -> np.ndarray:
    data = np.zeros(dims, dtype=np.int16)
    i, j, k = start
    data[i : i + size, j : j + size, k : k + size] = label
    return data


def brute_surface(mask: np.ndarray) -> list[tuple[int, int, int]]:
    points = []
    for p in zip(*np.nonzero(mask)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            q = list(p)
            q[axis] += step
            if not 0 <= q[axis] < mask.shape[axis] or not mask[tuple(q)]:
                points.append(p)
                break
    return points


def test_dice_identical_and_disjoint():
    a = LabelVolume(cube((10, 10, 10), (1, 1, 1), 3))
    b = LabelVolume(cube((10, 10, 10), (6, 6, 6), 3))
    assert dice(a, a, 1) == 1.0
    assert dice(a, b, 1) == 0.0


def test_dice_of_shifted_cube():
    a = LabelVolume(cube((10, 10, 10), (2, 2, 2), 4))
    b = LabelVolume(cube((10, 10, 10), (3, 2, 2), 4))
    # overlap 3x4x4 = 48 of 64 + 64
    assert dice(a, b, 1) == pytest.approx(0.75)


def test_dice_of_absent_label_is_one():
    a = LabelVolume(cube((6, 6, 6), (1, 1, 1), 2))
    assert dice(a, a, 7) == 1.0


def test_mean_dice_over_union_of_labels():
    a = cube((10, 10, 10), (0, 0, 0), 3, label=1)
    b = a.copy()
    b[6:9, 6:9, 6:9] = 2
    assert mean_dice(LabelVolume(a), LabelVolume(b)) == pytest.approx(0.5)


def test_dice_rejects_mismatched_dims():
    with pytest.raises(InvalidInputError):
        dice(LabelVolume(np.zeros((4, 4, 4), np.int16)), LabelVolume(np.zeros((4, 4, 5), np.int16)), 1)


def test_label_volume_validation():
    with pytest.raises(InvalidInputError):
        LabelVolume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(InvalidInputError):
        LabelVolume(np.zeros((4, 4), dtype=np.int16))
    with pytest.raises(InvalidInputError):
        LabelVolume(cube((4, 4, 4), (0, 0, 0), 2, label=3), labels=(1, 2))
    assert LabelVolume(np.zeros((4, 4, 4), np.int16), labels=(0, 1, 2)).foreground_labels() == [1, 2]


def test_surface_of_solid_cube_is_its_shell():
    mask = cube((8, 8, 8), (2, 2, 2), 4).astype(bool)
    assert int(surface_voxels(mask).sum()) == 64 - 8
    # the grid border counts as background
    assert surface_voxels(np.ones((3, 3, 3), dtype=bool)).sum() == 26


def test_surface_matches_neighbour_loop(rng):
    mask = rng.random((7, 7, 7)) < 0.5
    expected = np.zeros_like(mask)
    for p in brute_surface(mask):
        expected[p] = True
    assert np.array_equal(surface_voxels(mask), expected)


def test_hd95_identical_is_zero():
    a = LabelVolume(cube((10, 10, 10), (2, 2, 2), 5))
    assert hd95(a, a, 1) == 0.0
    assert assd(a, a, 1) == 0.0


def test_surface_distance_between_single_voxels():
    a, b = np.zeros((10, 10, 10), np.int16), np.zeros((10, 10, 10), np.int16)
    a[2, 2, 2] = 1
    b[5, 2, 2] = 1
    assert hd95(LabelVolume(a), LabelVolume(b), 1) == pytest.approx(3.0)
    assert assd(LabelVolume(a), LabelVolume(b), 1) == pytest.approx(3.0)


def test_surface_distance_between_planes_respects_spacing():
    a, b = np.zeros((8, 6, 6), np.int16), np.zeros((8, 6, 6), np.int16)
    a[2] = 1
    b[4] = 1
    assert assd(LabelVolume(a), LabelVolume(b), 1) == pytest.approx(2.0)
    assert hd95(LabelVolume(a), LabelVolume(b), 1) == pytest.approx(2.0)
    assert assd(LabelVolume(a), LabelVolume(b), 1, spacing=(2.0, 1.0, 1.0)) == pytest.approx(4.0)


def test_hd95_matches_all_pairs_oracle():
    grid = np.stack(np.meshgrid(*(np.arange(12),) * 3, indexing="ij"), axis=-1)
    a = (np.linalg.norm(grid - [5, 5, 5], axis=-1) <= 3.5).astype(np.int16)
    b = (np.linalg.norm(grid - [6, 5, 4], axis=-1) <= 3.0).astype(np.int16)
    spacing = (1.0, 0.5, 2.0)
    pa = np.array(brute_surface(a.astype(bool))) * spacing
    pb = np.array(brute_surface(b.astype(bool))) * spacing
    pairwise = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    pooled = np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)])
    la, lb = LabelVolume(a), LabelVolume(b)
    assert hd95(la, lb, 1, spacing) == pytest.approx(np.percentile(pooled, 95))
    assert assd(la, lb, 1, spacing) == pytest.approx(pooled.mean())


@pytest.mark.slow
def test_metrics_match_brute_force_on_random_masks(rng):
    for _ in range(50):
        dims = tuple(rng.integers(4, 13, size=3))
        a = (rng.random(dims) < 0.3).astype(np.int16)
        b = (rng.random(dims) < 0.3).astype(np.int16)
        if not a.any() or not b.any():
            continue
        pa, pb = np.array(brute_surface(a.astype(bool))), np.array(brute_surface(b.astype(bool)))
        pairwise = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
        pooled = np.concatenate([pairwise.min(axis=1), pairwise.min(axis=0)])
        overlap = np.logical_and(a, b).sum()
        la, lb = LabelVolume(a), LabelVolume(b)
        assert dice(la, lb, 1) == pytest.approx(2 * overlap / (a.sum() + b.sum()), abs=1e-6)
        assert hd95(la, lb, 1) == pytest.approx(np.percentile(pooled, 95), abs=1e-6)
        assert assd(la, lb, 1) == pytest.approx(pooled.mean(), abs=1e-6)


def test_surface_distance_of_empty_mask_is_undefined():
    a = LabelVolume(cube((6, 6, 6), (1, 1, 1), 2))
    empty = LabelVolume(np.zeros((6, 6, 6), np.int16))
    with pytest.raises(UndefinedMetricError):
        hd95(a, empty, 1)
    with pytest.raises(UndefinedMetricError):
        assd(empty, a, 1)


def test_warp_labels_identity_and_shift():
    labels = LabelVolume(np.arange(4 * 5 * 6, dtype=np.int32).reshape(4, 5, 6))
    same = warp_labels(labels, DisplacementField.identity((4, 5, 6)))
    assert np.array_equal(same.data, labels.data)
    shift = torch.zeros(3, 4, 5, 6)
    shift[0] = 1.0
    shift[2] = -0.6
    moved = warp_labels(labels, DisplacementField(shift))
    expected = labels.data[np.minimum(np.arange(4) + 1, 3)][:, :, np.maximum(np.arange(6) - 1, 0)]
    assert np.array_equal(moved.data, expected)


def test_summarize_identity():
    data = cube((12, 12, 12), (1, 1, 1), 4, label=1)
    data[6:10, 6:10, 6:10] = 2
    labels = LabelVolume(data)
    report = summarize(labels, labels, DisplacementField.identity((12, 12, 12)))
    assert report["dsc_per_label"] == {"1": 1.0, "2": 1.0}
    assert report["mean_dsc"] == 1.0
    assert report["hd95"] == 0.0
    assert report["assd"] == 0.0
    assert report["folding_pct"] == 0.0


def test_summarize_counts_folding_and_skips_empty_surfaces():
    fixed = LabelVolume(cube((8, 8, 8), (2, 2, 2), 3))
    warped = LabelVolume(np.zeros((8, 8, 8), np.int16))
    report = summarize(fixed, warped, smooth_field((8, 8, 8), max_disp=3.0, sigma=0.5, seed=2))
    assert report["dsc_per_label"] == {"1": 0.0}
    assert report["hd95"] is None and report["assd"] is None
    assert 0.0 < report["folding_pct"] <= 100.0


def test_summarize_without_field():
    labels = LabelVolume(cube((6, 6, 6), (1, 1, 1), 3))
    assert summarize(labels, labels)["folding_pct"] is None
