"""Options and helpers shared by the command modules."""
from pathlib import Path
from typing import Annotated, Optional
import json
import logging

import torch
import typer
from rich.console import Console

from motionreg.core.config import OptimConfig, resolve_config
from motionreg.models.network import PyramidRegistrationNet, build_model
from motionreg.services.engine import ImagePair
from motionreg.services.io import load_image, load_labels, load_model

logger = logging.getLogger(__name__)

console = Console()

ConfigPath = Annotated[
    Optional[Path], typer.Option("--config", exists=True, dir_okay=False, help="YAML config file")
]
Preset = Annotated[str, typer.Option("--preset", help="small | large | small-diff | large-diff")]
InputFile = Annotated[Path, typer.Option(exists=True, dir_okay=False)]
OptionalInputFile = Annotated[Optional[Path], typer.Option(exists=True, dir_okay=False)]


def echo_json(data: dict) -> None:
    typer.echo(json.dumps(data, indent=2, sort_keys=True))


def write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_pair(
    fixed: Path,
    moving: Path,
    fixed_labels: Optional[Path] = None,
    moving_labels: Optional[Path] = None,
) -> ImagePair:
    dtype = torch.get_default_dtype()
    return ImagePair(
        fixed=load_image(fixed, dtype=dtype),
        moving=load_image(moving, dtype=dtype),
        fixed_labels=load_labels(fixed_labels) if fixed_labels else None,
        moving_labels=load_labels(moving_labels) if moving_labels else None,
        name=f"{fixed.stem}<-{moving.stem}",
    )


def prepare_model(
    preset: str,
    config: Optional[Path],
    ckpt: Optional[Path],
    diff: bool,
    optim_overrides: dict,
    seed: int,
) -> tuple[PyramidRegistrationNet, OptimConfig]:
    """Model from a checkpoint when given, otherwise freshly initialised from the preset.

    The optimiser settings always come from flags > config file > defaults.
    """
    if diff and not preset.endswith("-diff"):
        preset = f"{preset}-diff"
    model_cfg, optim_cfg = resolve_config(preset, config, optim_overrides=optim_overrides)
    dtype = torch.get_default_dtype()
    if ckpt is not None:
        model = load_model(ckpt, dtype=dtype)
        if diff and not model.cfg.diffeomorphic:
            logger.warning(f"--diff ignored: checkpoint {ckpt} holds a non-diffeomorphic model")
    else:
        model = build_model(model_cfg, seed=seed, dtype=dtype)
    return model, optim_cfg
