import logging

from torch import nn

from motionreg.core.config import LEVELS, EncoderConfig
from motionreg.core.errors import InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.convolution import conv3, instance_norm, leaky_relu
from motionreg.ops.volume import FeatureMap, Volume, avg_pool_2x

logger = logging.getLogger(__name__)

MIN_DIM = 2 ** (LEVELS - 1)


class ConvBlock(nn.Module):
    """Two rounds of 3x3x3 convolution, instance normalisation and leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int, leaky_slope: float = 0.2):
        super().__init__()
        self.leaky_slope = leaky_slope
        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_uniform_(conv.weight, a=self.leaky_slope, mode="fan_in", nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)
        for norm in (self.norm1, self.norm2):
            nn.init.ones_(norm.weight)
            nn.init.zeros_(norm.bias)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        x = conv3(fm, self.conv1.weight, self.conv1.bias)
        x = leaky_relu(instance_norm(x, self.norm1.weight, self.norm1.bias), self.leaky_slope)
        x = conv3(x, self.conv2.weight, self.conv2.bias)
        return leaky_relu(instance_norm(x, self.norm2.weight, self.norm2.bias), self.leaky_slope)


class Encoder(nn.Module):
    """Five-level convolutional pyramid; one instance encodes both images of a pair."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks = [ConvBlock(1, cfg.channels(1), cfg.leaky_slope)]
        for level in range(2, cfg.levels + 1):
            blocks.append(ConvBlock(cfg.channels(level - 1), cfg.channels(level), cfg.leaky_slope))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, img: Volume) -> list[FeatureMap]:
        if any(d < MIN_DIM for d in img.dims):
            raise InvalidInputError(
                f"volume {img.dims} is too small for {self.cfg.levels} levels (need >= {MIN_DIM} per axis)"
            )
        x = self.blocks[0](FeatureMap(img.data[None]))
        features = [x]
        for block in self.blocks[1:]:
            x = block(avg_pool_2x(x))
            features.append(x)
        return features


@taped("encode")
def encode(img: Volume, encoder: Encoder) -> list[FeatureMap]:
    """Feature maps F1..F5 (finest first); the same encoder serves fixed and moving images."""
    return encoder(img)


def level_dims(dims: tuple[int, int, int], level: int) -> tuple[int, int, int]:
    """Spatial dims at encoder level `level`: ceil(dims / 2^(level-1))."""
    factor = 2 ** (level - 1)
    return tuple(-(-d // factor) for d in dims)
