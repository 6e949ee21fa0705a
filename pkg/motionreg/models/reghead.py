import logging

import torch
from torch import nn

from motionreg.core.errors import InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.attention import SubfieldStack
from motionreg.ops.convolution import conv3
from motionreg.ops.fields import compose
from motionreg.ops.volume import DisplacementField, FeatureMap

logger = logging.getLogger(__name__)

REGHEAD_INIT_STD = 1e-5


class RegHead(nn.Module):
    """One 3x3x3 convolution fusing 3*S subfield channels into a residual field.

    With `diffeomorphic` set, the convolution output is a stationary velocity field and
    the residual is its scaling-and-squaring integral.
    """

    def __init__(self, heads: int, diffeomorphic: bool = False, ss_steps: int = 7):
        super().__init__()
        self.heads = heads
        self.diffeomorphic = diffeomorphic
        self.ss_steps = ss_steps
        self.weight = nn.Parameter(torch.empty(3, 3 * heads, 3, 3, 3))
        self.bias = nn.Parameter(torch.empty(3))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.normal_(self.weight, mean=0.0, std=REGHEAD_INIT_STD)
        nn.init.zeros_(self.bias)

    def forward(self, stack: SubfieldStack) -> DisplacementField:
        out = fuse(stack, self)
        if self.diffeomorphic:
            out = scaling_squaring(out, self.ss_steps)
        return out


@taped("fuse")
def fuse(stack: SubfieldStack, head: RegHead) -> DisplacementField:
    """Concatenate subfields on the channel axis (subfield-major) and convolve to 3 channels."""
    if stack.heads != head.heads:
        raise InvalidInputError(f"RegHead expects {head.heads} subfields, got {stack.heads}")
    channels = FeatureMap(stack.data.reshape(3 * stack.heads, *stack.dims))
    return DisplacementField(conv3(channels, head.weight, head.bias).data)


@taped("scaling_squaring")
def scaling_squaring(velocity: DisplacementField, steps: int) -> DisplacementField:
    """Integrate a stationary velocity field: scale by 2^-T, then self-compose T times."""
    if steps < 1:
        raise InvalidInputError(f"scaling_squaring needs at least one step, got {steps}")
    field = DisplacementField(velocity.data / 2**steps)
    for _ in range(steps):
        field = compose(field, field)
    return field
