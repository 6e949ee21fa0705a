from dataclasses import dataclass
from typing import Optional, Sequence
import logging

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from motionreg.core.errors import InvalidInputError, UndefinedMetricError
from motionreg.ops.fields import folding_ratio, jacobian_determinant
from motionreg.ops.volume import DisplacementField, voxel_grid

logger = logging.getLogger(__name__)

# 6-connectivity: a foreground voxel is on the surface if any face-neighbour is background
_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)

__all__ = [
    "LabelVolume",
    "assd",
    "dice",
    "folding_ratio",
    "hd95",
    "mean_dice",
    "summarize",
    "warp_labels",
]


@dataclass(frozen=True)
class LabelVolume:
    data: np.ndarray  # integer label per voxel, 0 = background
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    labels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidInputError(f"LabelVolume must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InvalidInputError(f"LabelVolume needs integer labels, got {self.data.dtype}")
        if self.labels is not None:
            undeclared = set(np.unique(self.data).tolist()) - set(self.labels) - {0}
            if undeclared:
                raise InvalidInputError(f"labels {sorted(undeclared)} are not in the declared set {self.labels}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def foreground_labels(self) -> list[int]:
        if self.labels is not None:
            return [label for label in self.labels if label != 0]
        return [int(v) for v in np.unique(self.data) if v != 0]


def _check_dims(a: LabelVolume, b: LabelVolume, op: str) -> None:
    if a.dims != b.dims:
        raise InvalidInputError(f"{op}: dims mismatch {a.dims} vs {b.dims}")


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when the label is absent from both."""
    _check_dims(a, b, "dice")
    mask_a, mask_b = a.data == label, b.data == label
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(mask_a, mask_b).sum()) / total


def mean_dice(a: LabelVolume, b: LabelVolume) -> float:
    labels = sorted(set(a.foreground_labels()) | set(b.foreground_labels()))
    if not labels:
        return 1.0
    return float(np.mean([dice(a, b, label) for label in labels]))


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbour; voxels on the grid border count as surface."""
    eroded = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)
    return np.logical_and(mask, np.logical_not(eroded))


def surface_distances(a: LabelVolume, b: LabelVolume, label: int, spacing: Sequence[float]) -> np.ndarray:
    """Pooled directed surface-to-nearest-surface distances a->b and b->a, in mm."""
    _check_dims(a, b, "surface_distances")
    mask_a, mask_b = a.data == label, b.data == label
    if not mask_a.any() or not mask_b.any():
        raise UndefinedMetricError(f"surface distance is undefined for label {label}: empty mask")
    scale = np.asarray(spacing, dtype=np.float64)
    points_a = np.argwhere(surface_voxels(mask_a)) * scale
    points_b = np.argwhere(surface_voxels(mask_b)) * scale
    a_to_b, _ = cKDTree(points_b).query(points_a)
    b_to_a, _ = cKDTree(points_a).query(points_b)
    return np.concatenate([a_to_b, b_to_a])


def hd95(a: LabelVolume, b: LabelVolume, label: int, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """95th percentile (linear interpolation) of the pooled two-direction surface distances."""
    return float(np.percentile(surface_distances(a, b, label, spacing), 95))


def assd(a: LabelVolume, b: LabelVolume, label: int, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance over the pooled two-direction distances."""
    return float(np.mean(surface_distances(a, b, label, spacing)))


def warp_labels(labels: LabelVolume, field: DisplacementField) -> LabelVolume:
    """Nearest-neighbour resampling of a label map at x + field(x), clamp-to-edge."""
    if labels.dims != field.dims:
        raise InvalidInputError(f"warp_labels: dims mismatch {labels.dims} vs {field.dims}")
    with torch.no_grad():
        positions = voxel_grid(field.dims, dtype=torch.float64) + field.data.detach().to(torch.float64)
        index = []
        for axis, size in enumerate(field.dims):
            index.append(torch.floor(positions[axis] + 0.5).clamp(0, size - 1).long().numpy())
    return LabelVolume(labels.data[tuple(index)], labels.spacing, labels.labels)


def summarize(
    fixed_labels: LabelVolume,
    warped_labels: LabelVolume,
    field: Optional[DisplacementField] = None,
    spacing: Optional[Sequence[float]] = None,
) -> dict:
    """Metric report: per-label DSC, mean DSC, mean HD95/ASSD (mm) and folding percentage."""
    spacing = spacing or fixed_labels.spacing
    labels = sorted(set(fixed_labels.foreground_labels()) | set(warped_labels.foreground_labels()))
    dsc = {str(label): dice(fixed_labels, warped_labels, label) for label in labels}
    hd, asd = [], []
    for label in labels:
        try:
            hd.append(hd95(fixed_labels, warped_labels, label, spacing))
            asd.append(assd(fixed_labels, warped_labels, label, spacing))
        except UndefinedMetricError as e:
            logger.warning(f"Skipping surface metrics: {e}")
    report = {
        "dsc_per_label": dsc,
        "mean_dsc": float(np.mean(list(dsc.values()))) if dsc else 1.0,
        "hd95": float(np.mean(hd)) if hd else None,
        "assd": float(np.mean(asd)) if asd else None,
        "folding_pct": None,
    }
    if field is not None:
        report["folding_pct"] = 100.0 * folding_ratio(jacobian_determinant(field))
    return report
