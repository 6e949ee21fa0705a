"""Model commands: one-shot registration, pairwise optimisation, training and model info."""
from pathlib import Path
from enum import Enum
from typing import Annotated, Optional
import logging
import time

import torch
import typer
from rich.table import Table

from motionreg.cli.common import (
    ConfigPath,
    InputFile,
    OptionalInputFile,
    Preset,
    console,
    echo_json,
    load_pair,
    prepare_model,
    write_json,
)
from motionreg.core.config import LEVELS, settings
from motionreg.services.engine import evaluate_dice, pairwise_optimize, train as train_model
from motionreg.services.io import pairs_from_directory, save_checkpoint, save_raw, write_trace
from motionreg.services.metrics import folding_ratio, mean_dice, summarize, warp_labels
from motionreg.ops.fields import jacobian_determinant
from motionreg.ops.volume import DisplacementField
from motionreg.ops.objective import total_loss

logger = logging.getLogger(__name__)


SaveLevels = Annotated[
    bool, typer.Option("--save-levels", help="Also write each level's residual field and per-head subfields")
]


class Optimizer(str, Enum):
    adam = "adam"
    sgd = "sgd"


def _write_outputs(out: Path, result, pair) -> dict:
    save_raw(out / "field.raw", result.field)
    save_raw(out / "warped.raw", result.warped)
    report = {"folding_pct": 100.0 * folding_ratio(jacobian_determinant(result.field))}
    if pair.labelled:
        warped_labels = warp_labels(pair.moving_labels, result.field)
        save_raw(out / "warped_labels.raw", warped_labels)
        report.update(summarize(pair.fixed_labels, warped_labels, result.field))
        report["initial_dsc"] = mean_dice(pair.fixed_labels, pair.moving_labels)
    return report


def _write_levels(out: Path, result) -> list[dict]:
    """Per level L (5 coarsest, 1 finest): residual_L.raw and one subfields_L_S.raw per head S."""
    levels = []
    for level, residual, stack in zip(range(LEVELS, 0, -1), result.residuals, result.subfields):
        save_raw(out / f"residual_{level}.raw", residual)
        for s in range(stack.heads):
            save_raw(out / f"subfields_{level}_{s}.raw", DisplacementField(stack.data[s]))
        levels.append({"level": level, "dims": list(residual.dims), "heads": stack.heads})
    heads = sum(entry["heads"] for entry in levels)
    logger.info(f"Wrote {len(levels)} residuals and {heads} subfields to {out}")
    return levels


def register(
    fixed: InputFile,
    moving: InputFile,
    out: Annotated[Path, typer.Option(file_okay=False, help="Output directory")],
    ckpt: OptionalInputFile = None,
    diff: Annotated[bool, typer.Option("--diff", help="Use the diffeomorphic variant")] = False,
    preset: Preset = "small",
    fixed_labels: OptionalInputFile = None,
    moving_labels: OptionalInputFile = None,
    lam: Annotated[Optional[float], typer.Option("--lambda", help="Regulariser weight")] = None,
    save_levels: SaveLevels = False,
    config: ConfigPath = None,
):
    """Register MOVING to FIXED with one forward pass; writes the field, warped image and metrics.json."""
    pair = load_pair(fixed, moving, fixed_labels, moving_labels)
    model, opt = prepare_model(preset, config, ckpt, diff, {"lambda": lam}, settings.SEED)
    model.eval()
    started = time.perf_counter()
    with torch.no_grad():
        result = model(pair.fixed, pair.moving)
        loss = float(total_loss(pair.fixed, pair.moving, result.field, opt.loss))
    elapsed_ms = (time.perf_counter() - started) * 1e3

    report = _write_outputs(out, result, pair)
    if save_levels:
        report["levels"] = _write_levels(out, result)
    report.update(
        {
            "loss": loss,
            "inference_ms": elapsed_ms,
            "parameters": model.parameter_counts(),
            "diffeomorphic": model.cfg.diffeomorphic,
        }
    )
    write_json(out / "metrics.json", report)
    logger.info(f"Registered {pair.name} in {elapsed_ms:.0f} ms; outputs in {out}")
    echo_json(report)


def po(
    fixed: InputFile,
    moving: InputFile,
    ckpt: OptionalInputFile = None,
    iters: Annotated[Optional[int], typer.Option(help="Optimisation steps")] = None,
    lr: Annotated[Optional[float], typer.Option(help="Constant learning rate")] = None,
    lam: Annotated[Optional[float], typer.Option("--lambda", help="Regulariser weight")] = None,
    optimizer: Annotated[Optional[Optimizer], typer.Option(help="adam | sgd")] = None,
    trace: Annotated[Optional[Path], typer.Option(dir_okay=False, help="CSV loss/DSC trace")] = None,
    out: Annotated[Optional[Path], typer.Option(file_okay=False, help="Write field, warped image and metrics")] = None,
    save_ckpt: Annotated[Optional[Path], typer.Option("--save-ckpt", dir_okay=False)] = None,
    diff: Annotated[bool, typer.Option("--diff", help="Use the diffeomorphic variant")] = False,
    preset: Preset = "small",
    fixed_labels: OptionalInputFile = None,
    moving_labels: OptionalInputFile = None,
    save_levels: SaveLevels = False,
    config: ConfigPath = None,
):
    """Pairwise optimisation: fine-tune every parameter on this one pair."""
    if save_levels and out is None:
        raise typer.BadParameter("--save-levels needs --out", param_hint="--save-levels")
    pair = load_pair(fixed, moving, fixed_labels, moving_labels)
    overrides = {"po_iters": iters, "lr_init": lr, "lambda": lam, "optimizer": optimizer.value if optimizer else None}
    model, opt = prepare_model(preset, config, ckpt, diff, overrides, settings.SEED)
    result = pairwise_optimize(pair, model, opt)

    summary = {
        "iterations": opt.po_iters,
        "lr": opt.lr_init,
        "optimizer": opt.optimizer,
        "lambda": opt.lam,
        "initial_loss": result.loss_trace[0],
        "final_loss": result.loss_trace[-1],
    }
    if result.dsc_trace:
        summary.update({"initial_dsc": result.dsc_trace[0], "final_dsc": result.dsc_trace[-1]})
    if trace is not None:
        write_trace(trace, result.loss_trace, result.dsc_trace)
    if out is not None:
        summary.update(_write_outputs(out, result, pair))
        if save_levels:
            summary["levels"] = _write_levels(out, result)
        write_json(out / "metrics.json", summary)
    if save_ckpt is not None:
        save_checkpoint(save_ckpt, model)
    echo_json(summary)


def train(
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Directory of images")],
    preset: Preset = "small",
    epochs: Annotated[Optional[int], typer.Option(help="Training epochs M")] = None,
    lr: Annotated[Optional[float], typer.Option(help="Initial learning rate")] = None,
    lam: Annotated[Optional[float], typer.Option("--lambda", help="Regulariser weight")] = None,
    optimizer: Annotated[Optional[Optimizer], typer.Option(help="adam | sgd")] = None,
    diff: Annotated[bool, typer.Option("--diff", help="Use the diffeomorphic variant")] = False,
    save_ckpt: Annotated[Path, typer.Option("--save-ckpt", dir_okay=False)] = Path("model.mdt2"),
    validate: Annotated[bool, typer.Option(help="Per-epoch DSC on the labelled pairs")] = True,
    config: ConfigPath = None,
):
    """Train on every ordered pair of images in DATA with the polynomial learning-rate schedule."""
    pairs = pairs_from_directory(data, dtype=torch.get_default_dtype())
    overrides = {"epochs": epochs, "lr_init": lr, "lambda": lam, "optimizer": optimizer.value if optimizer else None}
    model, opt = prepare_model(preset, config, None, diff, overrides, settings.SEED)
    validation = [p for p in pairs if p.labelled] if validate else []
    history = train_model(pairs, model, opt, validation)
    save_checkpoint(save_ckpt, model)
    summary = {
        "pairs": len(pairs),
        "epochs": opt.epochs,
        "epoch_losses": history.epoch_losses,
        "learning_rates": history.learning_rates,
        "validation_dsc": history.validation_dsc,
        "checkpoint": str(save_ckpt),
    }
    if validation:
        summary["final_dsc"] = evaluate_dice(model, validation)
    echo_json(summary)


def info(
    preset: Preset = "small",
    ckpt: OptionalInputFile = None,
    config: ConfigPath = None,
):
    """Show the resolved model configuration and trainable parameters per component."""
    model, _ = prepare_model(preset, config, ckpt, False, {}, settings.SEED)
    table = Table(title=f"motionreg model ({'checkpoint' if ckpt else preset})")
    table.add_column("component")
    table.add_column("parameters", justify="right")
    counts = model.parameter_counts()
    for name, count in counts.items():
        table.add_row(name, f"{count:,}")
    table.add_row("total", f"{sum(counts.values()):,}", style="bold")
    console.print(table)
    console.print_json(model.cfg.model_dump_json())


def add_commands(app: typer.Typer) -> None:
    app.command("register")(register)
    app.command("po")(po)
    app.command("train")(train)
    app.command("info")(info)
