import numpy as np
import pytest
import torch

from motionreg.core.config import SynthConfig
from motionreg.core.errors import InvalidInputError
from motionreg.ops.fields import folding_ratio, jacobian_determinant, warp
from motionreg.ops.volume import DisplacementField
from motionreg.services.metrics import mean_dice, warp_labels
from motionreg.services.synth import (
    endpoint_error,
    make_pair,
    make_translation_pair,
    phantom,
    smooth_velocity,
)


def test_phantom_labels_match_spheres():
    image, labels = phantom((24, 24, 24), 3, np.random.default_rng(0))
    assert image.shape == labels.shape == (24, 24, 24)
    assert image.min() == 0.0 and image.max() == 1.0
    assert set(np.unique(labels).tolist()) <= {0, 1, 2, 3}
    assert (labels > 0).any()


def test_smooth_velocity_peak_norm():
    v = smooth_velocity((16, 16, 16), 1.5, 3.0, np.random.default_rng(1))
    assert np.sqrt((v**2).sum(axis=0)).max() == pytest.approx(1.5)


def test_make_pair_is_deterministic():
    cfg = SynthConfig(dims=(16, 16, 16), seed=3)
    a, b = make_pair(cfg, torch.float64), make_pair(cfg, torch.float64)
    assert torch.equal(a.pair.fixed.data, b.pair.fixed.data)
    assert torch.equal(a.ground_truth.data, b.ground_truth.data)
    assert np.array_equal(a.pair.fixed_labels.data, b.pair.fixed_labels.data)
    c = make_pair(SynthConfig(dims=(16, 16, 16), seed=4), torch.float64)
    assert not torch.equal(a.pair.moving.data, c.pair.moving.data)


def test_make_pair_fixed_is_warped_moving():
    sample = make_pair(SynthConfig(dims=(16, 16, 16), max_disp=1.5, seed=2), torch.float64)
    pair = sample.pair
    assert torch.equal(warp(pair.moving, sample.ground_truth).data, pair.fixed.data)
    assert np.array_equal(warp_labels(pair.moving_labels, sample.ground_truth).data, pair.fixed_labels.data)
    assert folding_ratio(jacobian_determinant(sample.ground_truth)) == 0.0
    assert float(sample.velocity.data.norm(dim=0).max()) == pytest.approx(1.5)
    assert sample.initial_dsc == mean_dice(pair.fixed_labels, pair.moving_labels)


def test_smooth_velocity_tapers_away_from_support():
    support = np.zeros((24, 24, 24), dtype=bool)
    support[9:15, 9:15, 9:15] = True
    v = smooth_velocity((24, 24, 24), 2.0, 3.0, np.random.default_rng(2), support)
    norm = np.sqrt((v**2).sum(axis=0))
    assert norm.max() == pytest.approx(2.0)
    assert norm[support].max() > 0.5
    # corners sit about 15 voxels from the cube
    for corner in ((0, 0, 0), (23, 23, 23), (0, 23, 0)):
        assert norm[corner] < 0.05


def test_default_pairs_start_misaligned():
    for seed in range(5):
        sample = make_pair(SynthConfig(seed=seed), torch.float64)
        pair = sample.pair
        assert sample.initial_dsc <= 0.85, seed
        assert mean_dice(pair.fixed_labels, pair.moving_labels) == sample.initial_dsc
        assert folding_ratio(jacobian_determinant(sample.ground_truth)) == 0.0, seed
        assert float(sample.ground_truth.data.norm(dim=0).max()) <= 2.5


def test_unreachable_initial_dsc_is_reported():
    with pytest.raises(InvalidInputError, match="unregistered DSC"):
        make_pair(SynthConfig(dims=(16, 16, 16), max_disp=0.0), torch.float64)
    sample = make_pair(SynthConfig(dims=(16, 16, 16), max_disp=0.0, max_initial_dsc=None), torch.float64)
    assert torch.equal(sample.pair.fixed.data, sample.pair.moving.data)
    assert sample.initial_dsc == 1.0


def test_translation_pair_ground_truth_is_constant():
    sample = make_translation_pair(dims=(16, 16, 16), shift=(1.0, -1.0, 0.0), spheres=2)
    assert torch.equal(sample.ground_truth.data[:, 3, 4, 5], torch.tensor([1.0, -1.0, 0.0]))
    # an integer shift moves labels exactly, away from the clamped border
    moved = sample.pair.fixed_labels.data[2:-2, 2:-2]
    assert np.array_equal(moved, sample.pair.moving_labels.data[3:-1, 1:-3])
    assert mean_dice(sample.pair.fixed_labels, sample.pair.moving_labels) < 1.0


def test_endpoint_error():
    sample = make_translation_pair(dims=(16, 16, 16), shift=(2.0, 0.0, 0.0), spheres=2)
    zero = torch.zeros_like(sample.ground_truth.data)
    assert endpoint_error(sample.ground_truth, sample.ground_truth) == 0.0
    assert endpoint_error(DisplacementField(zero), sample.ground_truth) == pytest.approx(2.0)
    assert endpoint_error(DisplacementField(zero), sample.ground_truth, sample.foreground) == pytest.approx(2.0)
