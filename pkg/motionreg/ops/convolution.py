import torch
import torch.nn.functional as F

from motionreg.core.errors import InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.volume import FeatureMap

IN_EPS = 1e-5


@taped("conv3")
def conv3(fm: FeatureMap, weight: torch.Tensor, bias: torch.Tensor) -> FeatureMap:
    """Zero-padded 3x3x3 convolution, stride 1; weight is (out, in, 3, 3, 3)."""
    if weight.ndim != 5 or tuple(weight.shape[2:]) != (3, 3, 3):
        raise InvalidInputError(f"conv3 kernel must be (out, in, 3, 3, 3), got {tuple(weight.shape)}")
    if weight.shape[1] != fm.channels:
        raise InvalidInputError(f"conv3: kernel expects {weight.shape[1]} channels, input has {fm.channels}")
    return FeatureMap(F.conv3d(fm.data[None], weight, bias, padding=1)[0])


@taped("instance_norm")
def instance_norm(fm: FeatureMap, scale: torch.Tensor, shift: torch.Tensor) -> FeatureMap:
    """Per-channel normalisation over all voxels, then affine scale/shift."""
    if scale.shape != (fm.channels,) or shift.shape != (fm.channels,):
        raise InvalidInputError(f"instance_norm: affine parameters must have shape ({fm.channels},)")
    x = fm.data
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    var = x.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
    # a single-voxel channel normalises to zero
    normed = (x - mean) / torch.sqrt(var + IN_EPS)
    return FeatureMap(normed * scale[:, None, None, None] + shift[:, None, None, None])


@taped("leaky_relu")
def leaky_relu(fm: FeatureMap, slope: float) -> FeatureMap:
    return FeatureMap(F.leaky_relu(fm.data, negative_slope=slope))
