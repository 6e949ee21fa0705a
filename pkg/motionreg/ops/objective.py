import logging

import torch
import torch.nn.functional as F

from motionreg.core.config import LossConfig
from motionreg.core.errors import InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.fields import warp
from motionreg.ops.volume import DisplacementField, Volume

logger = logging.getLogger(__name__)

NCC_EPS = 1e-5


def _window_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    kernel = torch.ones((1, 1, window, window, window), dtype=x.dtype, device=x.device)
    return F.conv3d(x[None, None], kernel, padding=window // 2)[0, 0]


@taped("ncc_loss")
def ncc_loss(fixed: Volume, warped: Volume, window: int = 9) -> torch.Tensor:
    """Negative mean local squared correlation; -1 for a perfect match.

    Window sums are zero-padded at the border and window means divide by the number of
    in-bounds voxels, so padding contributes nothing to the local statistics.
    """
    if fixed.dims != warped.dims:
        raise InvalidInputError(f"ncc_loss: dims mismatch {fixed.dims} vs {warped.dims}")
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"ncc_loss: window must be odd, got {window}")
    f, g = fixed.data, warped.data
    count = _window_sum(torch.ones_like(f), window)
    f_sum = _window_sum(f, window)
    g_sum = _window_sum(g, window)
    f2_sum = _window_sum(f * f, window)
    g2_sum = _window_sum(g * g, window)
    fg_sum = _window_sum(f * g, window)

    f_mean = f_sum / count
    g_mean = g_sum / count
    cross = fg_sum - f_mean * g_sum
    f_var = (f2_sum - f_mean * f_sum).clamp(min=0)
    g_var = (g2_sum - g_mean * g_sum).clamp(min=0)

    cc = cross * cross / (f_var * g_var + NCC_EPS)
    return -cc.mean()


@taped("grad_reg")
def grad_reg(field: DisplacementField) -> torch.Tensor:
    """Diffusion regulariser: sum over axes of the mean squared forward difference."""
    if any(d < 2 for d in field.dims):
        raise InvalidInputError(f"grad_reg needs at least 2 voxels per axis, got {field.dims}")
    u = field.data
    dx = u[:, 1:, :, :] - u[:, :-1, :, :]
    dy = u[:, :, 1:, :] - u[:, :, :-1, :]
    dz = u[:, :, :, 1:] - u[:, :, :, :-1]
    return (dx * dx).mean() + (dy * dy).mean() + (dz * dz).mean()


@taped("total_loss")
def total_loss(fixed: Volume, moving: Volume, field: DisplacementField, cfg: LossConfig) -> torch.Tensor:
    """ncc(fixed, moving warped by field) + lambda * grad_reg(field)."""
    if fixed.dims != moving.dims:
        raise InvalidInputError(f"total_loss: dims mismatch {fixed.dims} vs {moving.dims}")
    similarity = ncc_loss(fixed, warp(moving, field), cfg.ncc_window)
    return similarity + cfg.lam * grad_reg(field)
