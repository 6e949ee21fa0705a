import torch
from torch import nn

from motionreg.core.config import AttentionConfig
from motionreg.ops.attention import (
    ProjectionParams,
    SubfieldStack,
    neighborhood_attention_fused,
    neighborhood_attention_naive,
    project_qk,
    subfields_from_attention,
)
from motionreg.ops.volume import FeatureMap

PROJECTION_INIT_STD = 1e-5


class MotionDecomposition(nn.Module):
    """Splits the motion at one pyramid level into S subfields via neighborhood attention."""

    def __init__(self, in_channels: int, cfg: AttentionConfig, naive: bool = False):
        super().__init__()
        self.cfg = cfg
        self.naive = naive
        self.proj = nn.Linear(in_channels, cfg.channels)
        self.norm = nn.LayerNorm(cfg.channels)
        n = cfg.neighborhood
        self.rel_pos_bias = nn.Parameter(torch.zeros(cfg.heads, n, n, n))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.normal_(self.proj.weight, mean=0.0, std=PROJECTION_INIT_STD)
        nn.init.zeros_(self.proj.bias)
        nn.init.ones_(self.norm.weight)
        nn.init.zeros_(self.norm.bias)
        nn.init.zeros_(self.rel_pos_bias)

    def projection(self) -> ProjectionParams:
        return ProjectionParams(self.proj.weight, self.proj.bias, self.norm.weight, self.norm.bias)

    def forward(self, fixed: FeatureMap, moving: FeatureMap) -> SubfieldStack:
        q, k = project_qk(fixed, moving, self.projection(), self.cfg)
        attend = neighborhood_attention_naive if self.naive else neighborhood_attention_fused
        weights = attend(q, k, self.rel_pos_bias, self.cfg)
        return subfields_from_attention(weights, self.cfg)
