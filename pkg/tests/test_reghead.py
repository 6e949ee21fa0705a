import itertools

import numpy as np
import pytest
import torch

from conftest import smooth_field
from motionreg.core.errors import InvalidInputError
from motionreg.models.reghead import REGHEAD_INIT_STD, RegHead, fuse, scaling_squaring
from motionreg.ops.attention import SubfieldStack
from motionreg.ops.fields import compose, folding_ratio, jacobian_determinant
from motionreg.ops.volume import DisplacementField
from motionreg.services.synth import euler_integrate


def test_fresh_head_is_near_zero(generator):
    torch.manual_seed(0)
    head = RegHead(heads=4)
    assert torch.count_nonzero(head.bias) == 0
    assert float(head.weight.std()) == pytest.approx(REGHEAD_INIT_STD, rel=0.2)
    stack = SubfieldStack(torch.rand((4, 3, 6, 6, 6), generator=generator) * 2 - 1)
    with torch.no_grad():
        out = fuse(stack, head)
    assert out.dims == (6, 6, 6)
    assert float(out.data.abs().max()) <= 1e-3


def test_identity_head_passes_single_subfield(generator):
    head = RegHead(heads=1)
    with torch.no_grad():
        head.weight.zero_()
        for c in range(3):
            head.weight[c, c, 1, 1, 1] = 1.0
    stack = SubfieldStack(torch.randn((1, 3, 4, 4, 4), generator=generator))
    with torch.no_grad():
        out = fuse(stack, head)
    torch.testing.assert_close(out.data, stack.data[0])


def test_fuse_matches_convolution_loop(rng):
    head = RegHead(heads=2).to(torch.float64)
    weight, bias = rng.standard_normal((3, 6, 3, 3, 3)), rng.standard_normal(3)
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(weight))
        head.bias.copy_(torch.from_numpy(bias))
    subfields = rng.standard_normal((2, 3, 4, 4, 4))
    with torch.no_grad():
        out = fuse(SubfieldStack(torch.from_numpy(subfields)), head).data.numpy()
    # channel 3*s + c carries component c of subfield s
    channels = np.pad(subfields.reshape(6, 4, 4, 4), ((0, 0), (1, 1), (1, 1), (1, 1)))
    for o, i, j, k in itertools.product(range(3), range(4), range(4), range(4)):
        expected = (channels[:, i : i + 3, j : j + 3, k : k + 3] * weight[o]).sum() + bias[o]
        assert out[o, i, j, k] == pytest.approx(expected, abs=1e-10)


def test_fuse_rejects_wrong_head_count():
    with pytest.raises(InvalidInputError):
        fuse(SubfieldStack(torch.zeros(3, 3, 4, 4, 4)), RegHead(heads=2))


def test_scaling_squaring_of_zero_velocity():
    for steps in (1, 4, 7):
        out = scaling_squaring(DisplacementField.identity((4, 4, 4)), steps)
        assert torch.count_nonzero(out.data) == 0


def test_scaling_squaring_of_constant_velocity_is_exact():
    v = DisplacementField(torch.tensor([1.5, 0.0, 0.0]).reshape(3, 1, 1, 1).expand(3, 5, 5, 5).clone())
    for steps in (1, 3, 7):
        assert torch.equal(scaling_squaring(v, steps).data, v.data)


def test_scaling_squaring_matches_euler_integration():
    velocity = smooth_field((20, 20, 20), max_disp=0.3, sigma=5.0, seed=11, dtype=torch.float64)
    integrated = scaling_squaring(velocity, 7).data
    reference = euler_integrate(velocity, steps=512).data
    inner = (slice(None), slice(3, -3), slice(3, -3), slice(3, -3))
    assert float((integrated - reference)[inner].abs().max()) <= 1e-3


def test_scaling_squaring_converges_in_steps():
    velocity = smooth_field((16, 16, 16), max_disp=0.3, sigma=4.0, seed=12, dtype=torch.float64)
    diff = scaling_squaring(velocity, 8).data - scaling_squaring(velocity, 7).data
    assert float(diff.abs().max()) <= 1e-3


def test_scaling_squaring_output_does_not_fold():
    for seed in range(20):
        velocity = smooth_field((16, 16, 16), max_disp=0.4, sigma=2.0, seed=100 + seed)
        phi = scaling_squaring(velocity, 7)
        assert folding_ratio(jacobian_determinant(phi)) == 0.0, seed


def test_scaling_squaring_is_inverse_consistent():
    velocity = smooth_field((16, 16, 16), max_disp=0.3, sigma=4.0, seed=14, dtype=torch.float64)
    forward = scaling_squaring(velocity, 7)
    backward = scaling_squaring(DisplacementField(-velocity.data), 7)
    residual = compose(forward, backward).data[:, 2:-2, 2:-2, 2:-2]
    assert float(residual.abs().max()) <= 1e-2


def test_scaling_squaring_rejects_zero_steps():
    with pytest.raises(InvalidInputError):
        scaling_squaring(DisplacementField.identity((4, 4, 4)), 0)


def test_diffeomorphic_head_integrates_its_output(generator):
    head = RegHead(heads=2, diffeomorphic=True, ss_steps=5)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.05, generator=generator)
        stack = SubfieldStack(torch.randn((2, 3, 6, 6, 6), generator=generator))
        torch.testing.assert_close(head(stack).data, scaling_squaring(fuse(stack, head), 5).data)
