from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence
import logging
import math
import time

import numpy as np
import torch

from motionreg.core.config import LossConfig, OptimConfig, Settings
from motionreg.core.errors import ComputationError, InvalidInputError
from motionreg.diff.tape import Tape
from motionreg.models.network import PyramidRegistrationNet, RegistrationResult
from motionreg.ops.objective import total_loss
from motionreg.ops.volume import Volume
from motionreg.services.metrics import LabelVolume, mean_dice, warp_labels

logger = logging.getLogger(__name__)

LR_DECAY_POWER = 0.9


@dataclass
class ImagePair:
    fixed: Volume
    moving: Volume
    fixed_labels: Optional[LabelVolume] = None
    moving_labels: Optional[LabelVolume] = None
    name: str = ""

    @property
    def labelled(self) -> bool:
        return self.fixed_labels is not None and self.moving_labels is not None


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    validation_dsc: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def configure_runtime(settings: Settings) -> None:
    """Seed every RNG and pin thread count; one thread gives bitwise-reproducible traces."""
    torch.manual_seed(settings.SEED)
    np.random.seed(settings.SEED)
    torch.set_num_threads(settings.NUM_THREADS)
    torch.use_deterministic_algorithms(True)
    if settings.DEFAULT_DTYPE == "float64":
        torch.set_default_dtype(torch.float64)
    logger.debug(f"Runtime configured: seed={settings.SEED} threads={settings.NUM_THREADS}")


def lr_schedule(m: int, epochs: int, lr_init: float) -> float:
    """Polynomial decay: lr_init * (1 - (m - 1) / M) ** 0.9 for 1-based epoch m."""
    if not 1 <= m <= epochs:
        raise InvalidInputError(f"epoch index {m} outside [1, {epochs}]")
    return lr_init * (1 - (m - 1) / epochs) ** LR_DECAY_POWER


def make_optimizer(model: PyramidRegistrationNet, opt: OptimConfig, lr: Optional[float] = None) -> torch.optim.Optimizer:
    lr = opt.lr_init if lr is None else lr
    if opt.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=lr)
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(opt.beta1, opt.beta2), eps=opt.eps)


def _optimization_step(
    model: PyramidRegistrationNet,
    pair: ImagePair,
    optimizer: torch.optim.Optimizer,
    loss_cfg: LossConfig,
    context: str,
) -> tuple[float, RegistrationResult]:
    with Tape() as tape:
        result = model(pair.fixed, pair.moving)
        loss = total_loss(pair.fixed, pair.moving, result.field, loss_cfg)
    value = float(loss.detach())
    if not math.isfinite(value):
        logger.error(f"Non-finite loss during {context} (pair={pair.name or '?'})")
        raise ComputationError(f"Non-finite loss during {context}", op="total_loss")
    tape.backward(loss, model.param_tensors())
    optimizer.step()
    return value, result


def _pair_dice(result: RegistrationResult, pair: ImagePair) -> float:
    warped = warp_labels(pair.moving_labels, result.field)
    return mean_dice(pair.fixed_labels, warped)


def evaluate_dice(model: PyramidRegistrationNet, pairs: Sequence[ImagePair]) -> float:
    """Mean DSC over labelled pairs after registering each with the current parameters."""
    scores = []
    with torch.no_grad():
        for pair in pairs:
            if pair.labelled:
                scores.append(_pair_dice(model(pair.fixed, pair.moving), pair))
    return float(np.mean(scores)) if scores else float("nan")


def train(
    pairs: Sequence[ImagePair],
    model: PyramidRegistrationNet,
    opt: OptimConfig,
    validation: Iterable[ImagePair] = (),
) -> TrainingHistory:
    """Epoch loop with polynomial learning-rate decay; one optimiser step per pair (batch size 1)."""
    if not pairs:
        raise InvalidInputError("train needs at least one image pair")
    validation = list(validation)
    optimizer = make_optimizer(model, opt)
    history = TrainingHistory()
    model.train()

    for epoch in range(1, opt.epochs + 1):
        lr = lr_schedule(epoch, opt.epochs, opt.lr_init)
        for group in optimizer.param_groups:
            group["lr"] = lr
        started = time.perf_counter()
        losses = []
        for pair in pairs:
            loss, _ = _optimization_step(model, pair, optimizer, opt.loss, f"training epoch {epoch}")
            losses.append(loss)
            history.step_losses.append(loss)
        history.epoch_losses.append(float(np.mean(losses)))
        history.learning_rates.append(lr)
        if validation:
            history.validation_dsc.append(evaluate_dice(model, validation))
        logger.info(
            f"epoch {epoch}/{opt.epochs}: lr={lr:.3e} loss={history.epoch_losses[-1]:.5f}"
            + (f" val_dsc={history.validation_dsc[-1]:.4f}" if validation else "")
            + f" ({time.perf_counter() - started:.1f}s)"
        )
    return history


def pairwise_optimize(
    pair: ImagePair,
    model: PyramidRegistrationNet,
    opt: OptimConfig,
) -> RegistrationResult:
    """Fine-tune every parameter on a single pair for `po_iters` steps at a constant learning rate.

    The loss trace has po_iters + 1 entries: entry i is the loss after i updates. When the
    pair carries labels, the DSC trace is recorded alongside it.
    """
    optimizer = make_optimizer(model, opt, lr=opt.lr_init)
    model.train()
    result: Optional[RegistrationResult] = None
    loss_trace: list[float] = []
    dsc_trace: list[float] = []

    for iteration in range(opt.po_iters):
        loss, result = _optimization_step(model, pair, optimizer, opt.loss, f"pairwise optimisation step {iteration}")
        loss_trace.append(loss)
        if pair.labelled:
            dsc_trace.append(_pair_dice(result, pair))
        logger.debug(f"po iteration {iteration}: loss={loss:.6f}")

    with torch.no_grad():
        result = model(pair.fixed, pair.moving)
        final = float(total_loss(pair.fixed, pair.moving, result.field, opt.loss))
    if not math.isfinite(final):
        raise ComputationError("Non-finite loss after pairwise optimisation", op="total_loss")
    loss_trace.append(final)
    if pair.labelled:
        dsc_trace.append(_pair_dice(result, pair))

    result.loss_trace = loss_trace
    result.dsc_trace = dsc_trace
    logger.info(f"pairwise optimisation ({opt.optimizer}, {opt.po_iters} iters): loss {loss_trace[0]:.5f} -> {final:.5f}")
    return result
