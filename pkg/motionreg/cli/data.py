"""Data commands: synthetic pair generation and label metrics."""
from pathlib import Path
from typing import Annotated, Optional
import logging

import typer

from motionreg.cli.common import ConfigPath, InputFile, OptionalInputFile, echo_json
from motionreg.core.config import SynthConfig, merge_config, build_config, load_config_file
from motionreg.core.errors import InvalidInputError
from motionreg.services.io import load_field, load_labels, save_raw
from motionreg.services.metrics import summarize, warp_labels
from motionreg.services.synth import make_pair

logger = logging.getLogger(__name__)

# file stems written by `synth`
FIXED, MOVING, FIXED_LABELS, MOVING_LABELS, GT_FIELD, VELOCITY = (
    "fixed", "moving", "fixed_labels", "moving_labels", "gt_field", "velocity"
)


def synth(
    out: Annotated[Path, typer.Option(file_okay=False, help="Output directory")],
    dims: Annotated[Optional[int], typer.Option(help="Edge length of the cubic volumes")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Generator seed")] = None,
    max_disp: Annotated[Optional[float], typer.Option("--max-disp", help="Largest velocity magnitude, voxels")] = None,
    smoothness: Annotated[Optional[float], typer.Option(help="Gaussian sigma of the velocity field")] = None,
    spheres: Annotated[Optional[int], typer.Option(help="Number of labelled spheres")] = None,
    config: ConfigPath = None,
):
    """Write a synthetic pair, its labels and the ground-truth field as raw volumes."""
    overrides = {
        "dims": (dims, dims, dims) if dims is not None else None,
        "seed": seed,
        "max_disp": max_disp,
        "smoothness": smoothness,
        "spheres": spheres,
    }
    cfg = build_config(SynthConfig, merge_config(load_config_file(config).get("synth", {}), overrides))
    sample = make_pair(cfg)
    pair = sample.pair
    save_raw(out / f"{FIXED}.raw", pair.fixed)
    save_raw(out / f"{MOVING}.raw", pair.moving)
    save_raw(out / f"{FIXED_LABELS}.raw", pair.fixed_labels)
    save_raw(out / f"{MOVING_LABELS}.raw", pair.moving_labels)
    save_raw(out / f"{GT_FIELD}.raw", sample.ground_truth)
    save_raw(out / f"{VELOCITY}.raw", sample.velocity)
    logger.info(f"Synthetic pair written to {out}")
    echo_json({"out": str(out), "dims": list(cfg.dims), "seed": cfg.seed, "max_disp": cfg.max_disp})


def metrics(
    a: InputFile,
    b: InputFile,
    field: OptionalInputFile = None,
):
    """Compare label map A with label map B, warping B by FIELD first when one is given.

    Prints {dsc_per_label, mean_dsc, hd95, assd, folding_pct} as JSON; distances are in mm
    using A's voxel spacing.
    """
    labels_a, labels_b = load_labels(a), load_labels(b)
    if labels_a.dims != labels_b.dims:
        raise InvalidInputError(f"label maps differ in size: {labels_a.dims} vs {labels_b.dims}")
    phi = None
    if field is not None:
        phi = load_field(field)
        labels_b = warp_labels(labels_b, phi)
    echo_json(summarize(labels_a, labels_b, phi))


def add_commands(app: typer.Typer) -> None:
    app.command("synth")(synth)
    app.command("metrics")(metrics)
