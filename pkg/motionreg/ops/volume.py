"""Dense 3D grids and the sampling primitives every other module builds on.

Axis convention: a grid of dims (h, w, l) is a torch tensor indexed [i, j, k]; component
c of a displacement vector moves along axis c. Displacements are in voxels of the grid
they live on.
"""
from dataclasses import dataclass
from typing import Sequence, Union
import logging

import torch
import torch.nn.functional as F

from motionreg.core.errors import ComputationError, InvalidInputError
from motionreg.diff.tape import taped

logger = logging.getLogger(__name__)

Dims = tuple[int, int, int]


def ensure_finite(tensor: torch.Tensor, op: str) -> torch.Tensor:
    """Raise ComputationError naming the first non-finite element of `tensor`."""
    finite = torch.isfinite(tensor)
    if not bool(finite.all()):
        bad = torch.nonzero(~finite)[0].tolist()
        raise ComputationError("Non-finite value", op=op, position=tuple(bad))
    return tensor


@dataclass(frozen=True)
class Volume:
    """Scalar grid: an image, a single feature channel, or a per-voxel measurement."""

    data: torch.Tensor
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidInputError(f"Volume data must be 3D, got shape {tuple(self.data.shape)}")
        ensure_finite(self.data, "Volume")

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class FeatureMap:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise InvalidInputError(f"FeatureMap data must be (c, h, w, l), got {tuple(self.data.shape)}")
        ensure_finite(self.data, "FeatureMap")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vectors, stored as (3, h, w, l)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InvalidInputError(f"DisplacementField data must be (3, h, w, l), got {tuple(self.data.shape)}")
        ensure_finite(self.data, "DisplacementField")

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[1:])

    @classmethod
    def identity(cls, dims: Sequence[int], dtype: torch.dtype = torch.float32) -> "DisplacementField":
        return cls(torch.zeros((3, *dims), dtype=dtype))


Grid = Union[Volume, FeatureMap]


def voxel_grid(dims: Sequence[int], dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """Integer voxel coordinates of every lattice point, shape (3, h, w, l)."""
    axes = [torch.arange(d, dtype=dtype, device=device) for d in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def interpolate(data: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of `data` (C, h, w, l) at `coords` (3, *out), clamp-to-edge.

    Lattice corners are chosen as ceil(c) - 1, so an exact lattice coordinate takes weight
    one on its own voxel and the gradient there is the left-side difference.
    """
    channels = data.shape[0]
    dims = data.shape[1:]
    out_shape = coords.shape[1:]
    lower, upper, fracs = [], [], []
    for axis, size in enumerate(dims):
        c = coords[axis].clamp(0, size - 1)
        i0 = (torch.ceil(c.detach()) - 1).clamp(0, max(size - 2, 0))
        lower.append(i0.long())
        upper.append((i0 + 1).clamp(max=size - 1).long())
        fracs.append(c - i0)

    flat = data.reshape(channels, -1)
    _, w, l = dims
    out = None
    for corner in range(8):
        weight = None
        index = None
        for axis in range(3):
            use_upper = (corner >> (2 - axis)) & 1
            idx = upper[axis] if use_upper else lower[axis]
            wgt = fracs[axis] if use_upper else 1 - fracs[axis]
            weight = wgt if weight is None else weight * wgt
            index = idx if index is None else index * (w if axis == 1 else l) + idx
        term = flat[:, index.reshape(-1)].reshape(channels, *out_shape) * weight
        out = term if out is None else out + term
    return out


def _require_samplable(dims: Sequence[int], op: str) -> None:
    if any(d < 2 for d in dims):
        raise InvalidInputError(f"{op} needs at least 2 voxels along every axis, got dims {tuple(dims)}")


@taped("trilinear_sample")
def trilinear_sample(vol: Grid, coord: Union[Sequence[float], torch.Tensor]) -> torch.Tensor:
    """Sample a volume (scalar) or feature map (channel vector) at a continuous voxel coordinate."""
    _require_samplable(vol.dims, "trilinear_sample")
    coord = torch.as_tensor(coord, dtype=vol.data.dtype, device=vol.data.device).reshape(3, 1)
    data = vol.data[None] if isinstance(vol, Volume) else vol.data
    out = interpolate(data, coord)[:, 0]
    return out[0] if isinstance(vol, Volume) else out


@taped("avg_pool_2x")
def avg_pool_2x(fm: FeatureMap) -> FeatureMap:
    """Mean over 2x2x2 blocks; odd axes are first padded by replicating their last slice."""
    h, w, l = fm.dims
    x = fm.data[None]
    if h % 2 or w % 2 or l % 2:
        x = F.pad(x, (0, l % 2, 0, w % 2, 0, h % 2), mode="replicate")
    return FeatureMap(F.avg_pool3d(x, kernel_size=2)[0])


@taped("upsample_field_2x")
def upsample_field_2x(field: DisplacementField, target_dims: Sequence[int]) -> DisplacementField:
    """Resample a field onto a grid twice as fine and rescale its vectors to the new voxel size.

    Fine index j reads the coarse field at coordinate j / 2, so every even fine voxel
    lies on a coarse lattice point.
    """
    target_dims = tuple(int(t) for t in target_dims)
    for axis, (src, dst) in enumerate(zip(field.dims, target_dims)):
        if dst not in (2 * src - 1, 2 * src, 2 * src + 1) or dst < 1:
            raise InvalidInputError(
                f"upsample target {target_dims} is not twice the source dims {field.dims} (axis {axis})"
            )
    coords = voxel_grid(target_dims, dtype=field.data.dtype, device=field.data.device) / 2
    return DisplacementField(2.0 * interpolate(field.data, coords))


def normalize_intensity(vol: Volume) -> Volume:
    """Min-max rescale intensities to [0, 1]; a constant volume maps to zeros."""
    lo, hi = vol.data.min(), vol.data.max()
    span = hi - lo
    if span <= 0:
        return Volume(torch.zeros_like(vol.data), vol.spacing)
    return Volume((vol.data - lo) / span, vol.spacing)
