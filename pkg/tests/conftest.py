import numpy as np
import pytest
import torch
from scipy import ndimage

from motionreg.ops.volume import DisplacementField, Volume


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def smooth_field(dims, max_disp: float, sigma: float = 2.0, seed: int = 0, dtype=torch.float32) -> DisplacementField:
    """Band-limited random field whose largest component magnitude is `max_disp`."""
    noise = np.random.default_rng(seed).standard_normal((3, *dims))
    data = np.stack([ndimage.gaussian_filter(c, sigma=sigma, mode="nearest") for c in noise])
    data *= max_disp / np.abs(data).max()
    return DisplacementField(torch.from_numpy(data).to(dtype))


def smooth_volume(dims, sigma: float = 1.5, seed: int = 0, dtype=torch.float32) -> Volume:
    noise = np.random.default_rng(seed).standard_normal(dims)
    data = ndimage.gaussian_filter(noise, sigma=sigma, mode="nearest")
    data = (data - data.min()) / (data.max() - data.min())
    return Volume(torch.from_numpy(data).to(dtype))


def ramp(dims, axis: int = 0, dtype=torch.float32) -> Volume:
    """f(x) = x along `axis`."""
    coords = torch.meshgrid(*(torch.arange(d, dtype=dtype) for d in dims), indexing="ij")
    return Volume(coords[axis].clone())
