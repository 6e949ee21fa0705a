import itertools
import math

import numpy as np
import pytest
import torch

from motionreg.core.errors import ComputationError, InvalidInputError
from motionreg.ops.volume import (
    DisplacementField,
    FeatureMap,
    Volume,
    avg_pool_2x,
    normalize_intensity,
    trilinear_sample,
    upsample_field_2x,
)


def brute_trilinear(data: np.ndarray, coord) -> float:
    """Eight-corner interpolation with clamp-to-edge, written out per corner."""
    c = [min(max(float(x), 0.0), s - 1) for x, s in zip(coord, data.shape)]
    base = [min(int(math.floor(x)), s - 2) for x, s in zip(c, data.shape)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        weight = 1.0
        index = []
        for axis in range(3):
            frac = c[axis] - base[axis]
            weight *= frac if corner[axis] else 1 - frac
            index.append(base[axis] + corner[axis])
        total += weight * data[tuple(index)]
    return total


def test_volume_rejects_non_finite_data():
    data = torch.zeros(3, 3, 3)
    data[1, 2, 0] = float("nan")
    with pytest.raises(ComputationError) as exc:
        Volume(data)
    assert exc.value.position == (1, 2, 0)


def test_volume_rejects_wrong_rank():
    with pytest.raises(InvalidInputError):
        Volume(torch.zeros(3, 3))
    with pytest.raises(InvalidInputError):
        DisplacementField(torch.zeros(2, 3, 3, 3))


def test_identity_field_is_zero():
    field = DisplacementField.identity((4, 5, 6))
    assert field.dims == (4, 5, 6)
    assert torch.count_nonzero(field.data) == 0


def test_trilinear_exact_on_lattice(generator):
    vol = Volume(torch.randn((4, 5, 6), generator=generator))
    for i, j, k in [(0, 0, 0), (3, 4, 5), (1, 2, 3), (2, 0, 5)]:
        assert trilinear_sample(vol, (i, j, k)) == vol.data[i, j, k]


def test_trilinear_midpoint_is_mean(generator):
    vol = Volume(torch.randn((4, 4, 4), generator=generator))
    value = trilinear_sample(vol, (1.5, 2, 3))
    assert float(value) == pytest.approx(float((vol.data[1, 2, 3] + vol.data[2, 2, 3]) / 2), abs=1e-6)


def test_trilinear_clamps_to_edge(generator):
    vol = Volume(torch.randn((4, 4, 4), generator=generator))
    assert trilinear_sample(vol, (-5, 0, 0)) == trilinear_sample(vol, (0, 0, 0))
    assert trilinear_sample(vol, (3, 9, 3)) == vol.data[3, 3, 3]


def test_trilinear_matches_corner_loop(rng):
    data = rng.standard_normal((5, 6, 4))
    vol = Volume(torch.from_numpy(data))
    for coord in rng.uniform(-0.5, 5.5, size=(20, 3)):
        assert float(trilinear_sample(vol, coord)) == pytest.approx(brute_trilinear(data, coord), abs=1e-10)


def test_trilinear_is_linear_in_data(generator):
    a = torch.randn((4, 4, 4), generator=generator)
    b = torch.randn((4, 4, 4), generator=generator)
    coord = (1.25, 0.6, 2.9)
    combined = trilinear_sample(Volume(2.0 * a - 3.0 * b), coord)
    separate = 2.0 * trilinear_sample(Volume(a), coord) - 3.0 * trilinear_sample(Volume(b), coord)
    assert float(combined) == pytest.approx(float(separate), rel=1e-5, abs=1e-6)


def test_trilinear_feature_map_returns_channel_vector(generator):
    fm = FeatureMap(torch.randn((3, 4, 4, 4), generator=generator))
    out = trilinear_sample(fm, (1, 2, 3))
    assert out.shape == (3,)
    torch.testing.assert_close(out, fm.data[:, 1, 2, 3])


def test_trilinear_rejects_degenerate_dims():
    with pytest.raises(InvalidInputError):
        trilinear_sample(Volume(torch.zeros(1, 4, 4)), (0, 0, 0))


def test_avg_pool_constant():
    fm = FeatureMap(torch.full((2, 4, 6, 8), 1.5))
    out = avg_pool_2x(fm)
    assert out.dims == (2, 3, 4)
    torch.testing.assert_close(out.data, torch.full((2, 2, 3, 4), 1.5))


def test_avg_pool_single_block():
    fm = FeatureMap(torch.arange(8, dtype=torch.float32).reshape(1, 2, 2, 2))
    assert float(avg_pool_2x(fm).data.squeeze()) == 3.5


def test_avg_pool_matches_block_loop(generator):
    data = torch.randn((1, 4, 4, 4), generator=generator, dtype=torch.float64)
    out = avg_pool_2x(FeatureMap(data)).data[0]
    for i, j, k in itertools.product(range(2), repeat=3):
        block = data[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2]
        assert float(out[i, j, k]) == pytest.approx(float(block.mean()), abs=1e-12)


def test_avg_pool_preserves_mean(generator):
    data = torch.randn((3, 6, 8, 4), generator=generator, dtype=torch.float64)
    out = avg_pool_2x(FeatureMap(data))
    torch.testing.assert_close(out.data.mean(dim=(1, 2, 3)), data.mean(dim=(1, 2, 3)))


def test_avg_pool_odd_dims_replicate_last_slice():
    data = torch.arange(3, dtype=torch.float32).reshape(1, 3, 1, 1).expand(1, 3, 2, 2).clone()
    out = avg_pool_2x(FeatureMap(data))
    assert out.dims == (2, 1, 1)
    # second block is slice 2 and its replica
    assert out.data[0, :, 0, 0].tolist() == [0.5, 2.0]


def test_upsample_zero_field():
    out = upsample_field_2x(DisplacementField.identity((3, 4, 5)), (6, 8, 10))
    assert out.dims == (6, 8, 10)
    assert torch.count_nonzero(out.data) == 0


def test_upsample_constant_field_doubles():
    field = DisplacementField(torch.tensor([1.0, 0.0, 0.0]).reshape(3, 1, 1, 1).expand(3, 4, 4, 4).clone())
    out = upsample_field_2x(field, (8, 8, 8))
    expected = torch.tensor([2.0, 0.0, 0.0]).reshape(3, 1, 1, 1).expand(3, 8, 8, 8)
    torch.testing.assert_close(out.data, expected)


def test_upsample_matches_interpolation_loop(rng):
    coarse = rng.standard_normal((3, 3, 4, 3))
    out = upsample_field_2x(DisplacementField(torch.from_numpy(coarse)), (6, 7, 6)).data.numpy()
    for j in itertools.product(range(6), range(7), range(6)):
        coord = [x / 2 for x in j]
        for c in range(3):
            assert out[(c, *j)] == pytest.approx(2.0 * brute_trilinear(coarse[c], coord), abs=1e-10)


def test_upsample_then_subsample_recovers_field(generator):
    field = DisplacementField(torch.randn((3, 4, 5, 3), generator=generator))
    fine = upsample_field_2x(field, (8, 10, 6))
    recovered = fine.data[:, ::2, ::2, ::2] / 2
    torch.testing.assert_close(recovered, field.data, atol=1e-5, rtol=0)


@pytest.mark.parametrize("target", [(9, 8, 8), (7, 8, 8)])
def test_upsample_accepts_odd_targets(target):
    out = upsample_field_2x(DisplacementField.identity((4, 4, 4)), target)
    assert out.dims == target


def test_upsample_rejects_other_targets():
    with pytest.raises(InvalidInputError):
        upsample_field_2x(DisplacementField.identity((4, 4, 4)), (10, 8, 8))


def test_normalize_intensity():
    vol = Volume(torch.tensor([2.0, 4.0, 6.0]).reshape(3, 1, 1).expand(3, 2, 2).clone())
    out = normalize_intensity(vol)
    assert out.data[:, 0, 0].tolist() == [0.0, 0.5, 1.0]
    assert torch.count_nonzero(normalize_intensity(Volume(torch.ones(2, 2, 2))).data) == 0
