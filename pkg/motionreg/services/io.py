"""File formats: NIfTI-1 import, raw volumes with a JSON sidecar, model checkpoints and traces."""
from itertools import permutations
from pathlib import Path
from typing import Literal, Optional, Sequence, Union
import csv
import json
import logging
import struct

import nibabel as nib
import numpy as np
import torch
from pydantic import BaseModel, ValidationError, field_validator

from motionreg.core.config import ModelConfig, build_config
from motionreg.core.errors import ConfigError, ParseError
from motionreg.models.network import PyramidRegistrationNet
from motionreg.ops.volume import DisplacementField, Volume, normalize_intensity
from motionreg.services.engine import ImagePair
from motionreg.services.metrics import LabelVolume

logger = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1"
# datatype code -> bits per voxel
NIFTI_DATATYPES = {2: 8, 4: 16, 16: 32}
LABEL_DATATYPES = {2, 4}

CHECKPOINT_MAGIC = b"MDT2"
CHECKPOINT_VERSION = 1

RAW_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
LABELS_SUFFIX = "_labels"

Raw = Union[Volume, LabelVolume, DisplacementField]


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float], nib.Nifti1Header]:
    blob = Path(path).read_bytes()

    if len(blob) < NIFTI_HEADER_SIZE:
        raise ParseError(
            f"{path}: truncated header ({len(blob)} of {NIFTI_HEADER_SIZE} bytes)", field="sizeof_hdr"
        )
    hdr = nib.Nifti1Header(binaryblock=blob[:NIFTI_HEADER_SIZE], check=False)

    if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
        raise ParseError(f"{path}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348", field="sizeof_hdr")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != NIFTI_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}, expected single-file NIfTI-1 'n+1'", field="magic")
    dim = [int(d) for d in hdr["dim"]]
    if dim[0] != 3:
        raise ParseError(f"{path}: unsupported dimensionality dim[0]={dim[0]}", field="dim")
    dims = tuple(dim[1:4])
    if any(d < 1 for d in dims):
        raise ParseError(f"{path}: invalid dims {dims}", field="dim")
    datatype = int(hdr["datatype"])
    if datatype not in NIFTI_DATATYPES:
        raise ParseError(f"{path}: unsupported datatype {datatype}", field="datatype")
    if int(hdr["bitpix"]) != NIFTI_DATATYPES[datatype]:
        raise ParseError(
            f"{path}: bitpix {int(hdr['bitpix'])} does not match datatype {datatype}", field="bitpix"
        )

    dtype = hdr.get_data_dtype()
    offset = int(hdr["vox_offset"])
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(blob) - offset
    if offset < NIFTI_HEADER_SIZE or actual < expected:
        raise ParseError(
            f"{path}: truncated data (expected {expected} bytes at offset {offset}, found {max(actual, 0)})",
            field="vox_offset",
        )
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=offset).reshape(dims, order="F")
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    logger.debug(f"Read NIfTI {path}: dims={dims} datatype={datatype} spacing={spacing}")
    return data, spacing, hdr


def load_nifti(path: Union[str, Path]) -> Volume:
    """Read a single-file NIfTI-1 volume as float32, applying scl_slope/scl_inter when slope != 0.

    Args:
        path: File with a 348-byte header, magic "n+1" and datatype u8, i16 or f32.

    Returns:
        Volume with spacing taken from pixdim[1..3].

    Raises:
        ParseError: naming the offending header field.
    """
    path = Path(path)
    data, spacing, hdr = _read_nifti(path)
    values = data.astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope):
        values = values * slope + (inter if np.isfinite(inter) else 0.0)
    if not np.isfinite(values).all():
        raise ParseError(f"{path}: voxel data contains non-finite values", field="data")
    return Volume(torch.from_numpy(values.astype(np.float32)), spacing)


def load_nifti_labels(path: Union[str, Path]) -> LabelVolume:
    path = Path(path)
    data, spacing, hdr = _read_nifti(path)
    datatype = int(hdr["datatype"])
    if datatype not in LABEL_DATATYPES:
        raise ParseError(f"{path}: label maps must use an integer datatype, got {datatype}", field="datatype")
    return LabelVolume(data.astype(np.int64), spacing)


# ---------------------------------------------------------------------------
# Raw + JSON sidecar
# ---------------------------------------------------------------------------

class RawVolumeHeader(BaseModel):
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: Literal["f32", "u16"] = "f32"
    order: Literal["xyz-row-major"] = "xyz-row-major"
    components: Literal[1, 3] = 1

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(d < 1 for d in v):
            raise ValueError("dims must be positive")
        return v

    @property
    def byte_length(self) -> int:
        return int(np.prod(self.dims)) * self.components * RAW_DTYPES[self.dtype].itemsize


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_raw(path: Union[str, Path], obj: Raw) -> RawVolumeHeader:
    """Write `obj` as little-endian voxels (x fastest) plus a JSON header next to it."""
    path = Path(path)
    if isinstance(obj, LabelVolume):
        if obj.data.min(initial=0) < 0 or obj.data.max(initial=0) > np.iinfo(np.uint16).max:
            raise ParseError(f"labels of {path} do not fit in u16", field="dtype")
        header = RawVolumeHeader(dims=obj.dims, spacing=obj.spacing, dtype="u16")
        payload = obj.data.astype("<u2").ravel(order="F")
    elif isinstance(obj, DisplacementField):
        header = RawVolumeHeader(dims=obj.dims, dtype="f32", components=3)
        payload = obj.data.detach().cpu().numpy().astype("<f4").transpose(1, 2, 3, 0).ravel(order="F")
    else:
        header = RawVolumeHeader(dims=obj.dims, spacing=obj.spacing, dtype="f32")
        payload = obj.data.detach().cpu().numpy().astype("<f4").ravel(order="F")

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.tobytes())
    sidecar_path(path).write_text(header.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path} ({header.byte_length} bytes, {header.dtype} x{header.components})")
    return header


def read_raw_header(path: Union[str, Path]) -> RawVolumeHeader:
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"Missing header {sidecar} for {path}")
    try:
        return RawVolumeHeader.model_validate_json(sidecar.read_text(encoding="utf-8"))
    except ValidationError as e:
        err = e.errors()[0]
        field = ".".join(str(loc) for loc in err["loc"]) or "header"
        raise ParseError(f"{sidecar}: {field}: {err['msg']}", field=field)


def load_raw(path: Union[str, Path]) -> Raw:
    """Inverse of save_raw: u16 gives a LabelVolume, 3-component f32 a DisplacementField."""
    path = Path(path)
    header = read_raw_header(path)
    blob = path.read_bytes()
    if len(blob) != header.byte_length:
        raise ParseError(
            f"{path}: data length mismatch (expected {header.byte_length} bytes, actual {len(blob)})",
            field="dims",
        )
    flat = np.frombuffer(blob, dtype=RAW_DTYPES[header.dtype])
    if header.dtype == "u16":
        if header.components != 1:
            raise ParseError(f"{path}: label volumes have a single component", field="components")
        return LabelVolume(flat.reshape(header.dims, order="F").astype(np.int64), header.spacing)
    if header.components == 3:
        data = flat.reshape((*header.dims, 3), order="F").transpose(3, 0, 1, 2)
        return DisplacementField(torch.from_numpy(np.ascontiguousarray(data)))
    return Volume(torch.from_numpy(flat.reshape(header.dims, order="F").copy()), header.spacing)


def _is_nifti(path: Path) -> bool:
    return path.suffix == ".nii"


def load_image(
    path: Union[str, Path],
    normalize: bool = True,
    dtype: Optional[torch.dtype] = None,
) -> Volume:
    """Load an intensity volume from .nii or raw, min-max normalised unless `normalize` is off."""
    path = Path(path)
    vol = load_nifti(path) if _is_nifti(path) else load_raw(path)
    if not isinstance(vol, Volume):
        raise ParseError(f"{path} is not a scalar intensity volume", field="dtype")
    if normalize:
        vol = normalize_intensity(vol)
    if dtype is not None:
        vol = Volume(vol.data.to(dtype), vol.spacing)
    return vol


def load_labels(path: Union[str, Path]) -> LabelVolume:
    path = Path(path)
    labels = load_nifti_labels(path) if _is_nifti(path) else load_raw(path)
    if not isinstance(labels, LabelVolume):
        raise ParseError(f"{path} is not a label volume", field="dtype")
    return labels


def load_field(path: Union[str, Path], dtype: Optional[torch.dtype] = None) -> DisplacementField:
    field = load_raw(path)
    if not isinstance(field, DisplacementField):
        raise ParseError(f"{path} is not a 3-component displacement field", field="components")
    return DisplacementField(field.data.to(dtype)) if dtype is not None else field


def pairs_from_directory(directory: Union[str, Path], dtype: Optional[torch.dtype] = None) -> list[ImagePair]:
    """Every ordered pair (i, j), i != j, of the images in `directory`.

    Images are `*.raw` or `*.nii` files; a sibling named `<stem>_labels` with either
    extension is attached as the image's label map.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Data directory {directory} does not exist")

    images, labels = {}, {}
    for path in sorted(directory.iterdir()):
        if path.suffix not in (".raw", ".nii"):
            continue
        if path.stem.endswith(LABELS_SUFFIX):
            labels[path.stem[: -len(LABELS_SUFFIX)]] = load_labels(path)
            continue
        if path.suffix == ".raw" and read_raw_header(path).components != 1:
            continue  # displacement fields
        images[path.stem] = load_image(path, dtype=dtype)

    if len(images) < 2:
        raise ParseError(f"{directory} needs at least two images, found {len(images)}", field="data")
    pairs = [
        ImagePair(
            fixed=images[f],
            moving=images[m],
            fixed_labels=labels.get(f),
            moving_labels=labels.get(m),
            name=f"{f}<-{m}",
        )
        for f, m in permutations(sorted(images), 2)
    ]
    logger.info(f"Loaded {len(images)} images ({len(labels)} labelled) from {directory}: {len(pairs)} pairs")
    return pairs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: PyramidRegistrationNet) -> None:
    """Write magic, version, ModelConfig JSON and every parameter as little-endian f32."""
    path = Path(path)
    config_blob = model.cfg.model_dump_json().encode("utf-8")
    state = model.state_dict()
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_blob)),
        config_blob,
        struct.pack("<I", len(state)),
    ]
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        array = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info(f"Checkpoint written to {path} ({len(state)} tensors)")


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, size: int, field: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise ParseError(
                f"{self.path}: truncated checkpoint while reading {field} "
                f"(need {size} bytes at offset {self.pos}, file has {len(self.blob)})",
                field=field,
            )
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, field: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelConfig, dict[str, torch.Tensor]]:
    """Parse a checkpoint into its ModelConfig and named float32 tensors."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", field="magic")
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}", field="version")
    (config_len,) = reader.unpack("<I", "config")
    try:
        config_data = json.loads(reader.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: config blob is not valid JSON: {e}", field="config")
    try:
        cfg = build_config(ModelConfig, config_data)
    except ConfigError as e:
        raise ParseError(f"{path}: {e}", field="config")

    (count,) = reader.unpack("<I", "tensor_count")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name")
        name = reader.take(name_len, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "ndim")
        shape = reader.unpack(f"<{ndim}I", "shape")
        data = reader.take(int(np.prod(shape)) * 4, f"data[{name}]")
        tensors[name] = torch.from_numpy(np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32))
    if reader.pos != len(reader.blob):
        raise ParseError(f"{path}: {len(reader.blob) - reader.pos} trailing bytes", field="tensor_count")
    return cfg, tensors


def load_model(path: Union[str, Path], dtype: torch.dtype = torch.float32) -> PyramidRegistrationNet:
    """Rebuild the network described by a checkpoint and load its parameters."""
    cfg, tensors = load_checkpoint(path)
    model = PyramidRegistrationNet(cfg)
    expected = model.state_dict()
    missing = set(expected) - set(tensors)
    unexpected = set(tensors) - set(expected)
    if missing or unexpected:
        raise ParseError(
            f"{path}: tensors do not match the configured model (missing={sorted(missing)}, "
            f"unexpected={sorted(unexpected)})",
            field="tensors",
        )
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise ParseError(
                f"{path}: tensor {name} has shape {tuple(tensor.shape)}, expected {tuple(expected[name].shape)}",
                field="shape",
            )
    model.load_state_dict(tensors)
    logger.info(f"Loaded checkpoint {path} (diffeomorphic={cfg.diffeomorphic})")
    return model.to(dtype)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def write_trace(path: Union[str, Path], loss_trace: Sequence[float], dsc_trace: Sequence[float] = ()) -> None:
    """CSV with columns iteration, loss and (when recorded) dsc."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "dsc"] if dsc_trace else ["iteration", "loss"])
        for i, loss in enumerate(loss_trace):
            row = [i, repr(float(loss))]
            if dsc_trace:
                row.append(repr(float(dsc_trace[i])) if i < len(dsc_trace) else "")
            writer.writerow(row)
    logger.debug(f"Trace written to {path} ({len(loss_trace)} rows)")
