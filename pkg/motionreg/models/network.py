from dataclasses import dataclass
import dataclasses
from typing import Optional
import logging

import torch
from torch import nn

from motionreg.core.config import LEVELS, ModelConfig
from motionreg.core.errors import ComputationError, InvalidInputError
from motionreg.diff.tape import ParamTensor, Role, taped
from motionreg.models.attention import MotionDecomposition
from motionreg.models.encoder import Encoder, encode, level_dims
from motionreg.models.reghead import RegHead
from motionreg.ops.attention import SubfieldStack
from motionreg.ops.fields import compose, warp
from motionreg.ops.volume import DisplacementField, Volume, upsample_field_2x

logger = logging.getLogger(__name__)

_ROLE_BY_MODULE: dict[type, Role] = {
    nn.Conv3d: Role.ENCODER_CONV,
    nn.InstanceNorm3d: Role.NORM_AFFINE,
    nn.LayerNorm: Role.NORM_AFFINE,
    nn.Linear: Role.PROJECTION,
    MotionDecomposition: Role.REL_POS_BIAS,
    RegHead: Role.REGHEAD_CONV,
}


@dataclass
class RegistrationResult:
    field: DisplacementField
    residuals: list[DisplacementField]  # coarse to fine
    warped: Volume
    subfields: list[SubfieldStack] = dataclasses.field(default_factory=list)  # coarse to fine, one per residual
    loss_trace: list[float] = dataclasses.field(default_factory=list)
    dsc_trace: list[float] = dataclasses.field(default_factory=list)
    metrics: dict = dataclasses.field(default_factory=dict)


class PyramidRegistrationNet(nn.Module):
    """Coarse-to-fine registration: attention + RegHead per level, residuals composed upward."""

    def __init__(self, cfg: ModelConfig, naive_attention: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        # index i holds encoder level i + 1 (finest first)
        self.estimators = nn.ModuleList(
            MotionDecomposition(cfg.encoder.channels(level), cfg.attention(level), naive=naive_attention)
            for level in range(1, LEVELS + 1)
        )
        self.heads = nn.ModuleList(
            RegHead(cfg.attention(level).heads, cfg.diffeomorphic, cfg.ss_steps) for level in range(1, LEVELS + 1)
        )

    def param_tensors(self) -> list[ParamTensor]:
        tensors = []
        for module_name, module in self.named_modules():
            for name, param in module.named_parameters(recurse=False):
                role = _ROLE_BY_MODULE.get(type(module))
                if role is None:
                    raise InvalidInputError(f"No gradient role for parameter {module_name}.{name}")
                tensors.append(ParamTensor(f"{module_name}.{name}", role, param))
        return tensors

    def parameter_counts(self) -> dict[str, int]:
        """Trainable parameter count per component."""
        return {
            "encoder": sum(p.numel() for p in self.encoder.parameters()),
            "attention": sum(p.numel() for p in self.estimators.parameters()),
            "reghead": sum(p.numel() for p in self.heads.parameters()),
        }

    def _level(self, level: int, fixed_fm, moving_fm) -> tuple[DisplacementField, SubfieldStack]:
        stack = self.estimators[level - 1](fixed_fm, moving_fm)
        return self.heads[level - 1](stack), stack

    def forward(self, fixed: Volume, moving: Volume) -> RegistrationResult:
        if fixed.dims != moving.dims:
            raise InvalidInputError(f"fixed {fixed.dims} and moving {moving.dims} images differ in size")
        fixed_features = encode(fixed, self.encoder)
        moving_features = encode(moving, self.encoder)

        total, stack = self._level(LEVELS, fixed_features[-1], moving_features[-1])
        residuals, subfields = [total], [stack]
        for level in range(LEVELS - 1, 0, -1):
            f_level, m_level = fixed_features[level - 1], moving_features[level - 1]
            upsampled = upsample_field_2x(total, f_level.dims)
            residual, stack = self._level(level, f_level, warp(m_level, upsampled))
            if residual.dims != level_dims(fixed.dims, level):
                raise ComputationError(
                    f"residual {residual.dims} does not match encoder level {level} dims {f_level.dims}",
                    op="forward",
                )
            residuals.append(residual)
            subfields.append(stack)
            total = compose(upsampled, residual)
            logger.debug(f"level {level}: dims={f_level.dims} max|phi|={float(total.data.abs().max()):.4f}")

        if total.dims != fixed.dims:
            raise ComputationError(f"total field {total.dims} does not match image {fixed.dims}", op="forward")
        return RegistrationResult(field=total, residuals=residuals, warped=warp(moving, total), subfields=subfields)


@taped("forward")
def forward(fixed: Volume, moving: Volume, model: PyramidRegistrationNet) -> RegistrationResult:
    return model(fixed, moving)


def build_model(cfg: ModelConfig, seed: Optional[int] = None, dtype: torch.dtype = torch.float32) -> PyramidRegistrationNet:
    """Construct a freshly initialised network; `seed` makes the initialisation reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    model = PyramidRegistrationNet(cfg).to(dtype)
    counts = model.parameter_counts()
    logger.info(f"Built model: diffeomorphic={cfg.diffeomorphic} params={sum(counts.values())} {counts}")
    return model
