from typing import TypeVar
import logging

import torch

from motionreg.core.errors import InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.volume import DisplacementField, FeatureMap, Volume, interpolate, voxel_grid

logger = logging.getLogger(__name__)

G = TypeVar("G", Volume, FeatureMap)


def _check_same_dims(a, b, op: str) -> None:
    if tuple(a) != tuple(b):
        raise InvalidInputError(f"{op}: dims mismatch {tuple(a)} vs {tuple(b)}")


def _sample_positions(field: DisplacementField) -> torch.Tensor:
    return voxel_grid(field.dims, dtype=field.data.dtype, device=field.data.device) + field.data


@taped("warp")
def warp(vol: G, field: DisplacementField) -> G:
    """out(x) = vol(x + field(x)), trilinear with clamp-to-edge."""
    _check_same_dims(vol.dims, field.dims, "warp")
    if any(d < 2 for d in vol.dims):
        raise InvalidInputError(f"warp needs at least 2 voxels along every axis, got {vol.dims}")
    positions = _sample_positions(field)
    if isinstance(vol, Volume):
        return Volume(interpolate(vol.data[None], positions)[0], vol.spacing)
    return FeatureMap(interpolate(vol.data, positions))


@taped("compose")
def compose(prev: DisplacementField, res: DisplacementField) -> DisplacementField:
    """out(x) = res(x) + prev(x + res(x)).

    `res` acts first, in fixed space: warp(v, compose(prev, res)) ~ warp(warp(v, prev), res).
    """
    _check_same_dims(prev.dims, res.dims, "compose")
    return DisplacementField(res.data + interpolate(prev.data, _sample_positions(res)))


@taped("jacobian_determinant")
def jacobian_determinant(field: DisplacementField) -> Volume:
    """det(I + grad u) per voxel; central differences inside, one-sided at the borders."""
    if any(d < 3 for d in field.dims):
        raise InvalidInputError(f"jacobian_determinant needs at least 3 voxels per axis, got {field.dims}")
    # jac[r][c] = d u_r / d x_c
    jac = [torch.gradient(field.data[r], dim=(0, 1, 2), edge_order=1) for r in range(3)]
    a = [[jac[r][c] + (1.0 if r == c else 0.0) for c in range(3)] for r in range(3)]
    det = (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
    return Volume(det)


def folding_ratio(jac_det: Volume) -> float:
    """Fraction of voxels whose Jacobian determinant is <= 0 (whole grid, borders included)."""
    return float((jac_det.data <= 0).to(torch.float64).mean())
