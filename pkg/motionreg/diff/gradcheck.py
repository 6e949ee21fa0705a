"""Finite-difference verification of every taped op.

Each case builds small float64 inputs, reduces the op's output to a scalar with fixed
random projections, and compares the autograd directional derivative along random unit
directions against a central difference. Perturbations are applied in place to the leaf
tensors, so module parameters are checked the same way as plain inputs.
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional
import logging
import time

import torch
from torch import nn

from motionreg.core.config import AttentionConfig, EncoderConfig, LossConfig, ModelConfig
from motionreg.diff.tape import REGISTERED_OPS, Tape, output_tensors
from motionreg.models.encoder import Encoder, encode
from motionreg.models.network import PyramidRegistrationNet, forward
from motionreg.models.reghead import RegHead, fuse, scaling_squaring
from motionreg.ops.attention import (
    AttentionWeights,
    ProjectionParams,
    SubfieldStack,
    neighborhood_attention_fused,
    neighborhood_attention_naive,
    project_qk,
    subfields_from_attention,
)
from motionreg.ops.convolution import conv3, instance_norm, leaky_relu
from motionreg.ops.fields import compose, jacobian_determinant, warp
from motionreg.ops.objective import grad_reg, ncc_loss, total_loss
from motionreg.ops.volume import (
    DisplacementField,
    FeatureMap,
    Volume,
    avg_pool_2x,
    trilinear_sample,
    upsample_field_2x,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5
# directional derivatives below this magnitude are compared in absolute terms
ABS_FLOOR = 1e-6
# ...or below this fraction of the full gradient norm of the input
GRAD_FLOOR = 1e-2
DTYPE = torch.float64

# folding_ratio is a voxel count and has no derivative; it is not taped.
NON_DIFFERENTIABLE = ("folding_ratio",)


@dataclass
class GradCase:
    fn: Callable[[], Any]
    inputs: dict[str, torch.Tensor]
    tolerance: float = DEFAULT_TOLERANCE
    step: float = DEFAULT_STEP


@dataclass
class GradCheckReport:
    op: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    failure: Optional[str] = None

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=float("nan") if self.failure else 0.0)

    @property
    def worst_input(self) -> Optional[str]:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(e <= self.tolerance for e in self.errors.values())


def _scalarize(result: Any, projections: list[torch.Tensor], generator: torch.Generator) -> torch.Tensor:
    outputs = list(output_tensors(result))
    if not projections:
        for out in outputs:
            w = torch.randn(out.shape, generator=generator, dtype=DTYPE)
            projections.append(w / max(out.numel(), 1) ** 0.5)
    return sum((w * out).sum() for w, out in zip(projections, outputs))


def grad_check(
    op: str,
    fn: Callable[[], Any],
    inputs: dict[str, torch.Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    directions: int = 2,
    step: float = DEFAULT_STEP,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference directional derivatives for each input.

    Args:
        op: Name reported for the check.
        fn: Zero-argument closure evaluating the op on the tensors in `inputs`.
        inputs: Leaf float64 tensors to differentiate with respect to; perturbed in place.
        tolerance: Largest accepted relative error |a - n| / max(|a|, |n|, floor), where
            floor is the larger of ABS_FLOOR and GRAD_FLOOR times the input's gradient norm.
        directions: Random unit directions per input.
        step: Central-difference step along each direction.
        seed: Seed for projections and directions.

    Returns:
        Report with the worst relative error per input.
    """
    generator = torch.Generator().manual_seed(seed)
    projections: list[torch.Tensor] = []
    report = GradCheckReport(op, tolerance)
    started = time.perf_counter()
    leaves = list(inputs.values())
    for t in leaves:
        t.requires_grad_(True)

    try:
        with Tape():
            scalar = _scalarize(fn(), projections, generator)
        grads = torch.autograd.grad(scalar, leaves, allow_unused=True)
        for (name, tensor), grad in zip(inputs.items(), grads):
            grad = torch.zeros_like(tensor) if grad is None else grad
            original = tensor.detach().clone()
            floor = max(ABS_FLOOR, GRAD_FLOOR * float(grad.norm()))
            worst = 0.0
            for _ in range(directions):
                v = torch.randn(tensor.shape, generator=generator, dtype=DTYPE)
                v /= v.norm()
                analytic = float((grad * v).sum())
                values = []
                for sign in (1.0, -1.0):
                    with torch.no_grad():
                        tensor.copy_(original + sign * step * v)
                        values.append(float(_scalarize(fn(), projections, generator)))
                with torch.no_grad():
                    tensor.copy_(original)
                numeric = (values[0] - values[1]) / (2 * step)
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, error)
            report.errors[name] = worst
    except Exception as e:
        logger.error(f"grad_check {op} raised: {e}", exc_info=True)
        report.failure = f"{type(e).__name__}: {e}"
    report.seconds = time.perf_counter() - started
    logger.debug(f"grad_check {op}: worst={report.worst:.2e} ({report.worst_input}) in {report.seconds:.2f}s")
    return report


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

def _randn(g: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return scale * torch.randn(shape, generator=g, dtype=DTYPE)


def _away_from_zero(g: torch.Generator, *shape: int) -> torch.Tensor:
    x = _randn(g, *shape)
    return torch.sign(x) * (0.1 + x.abs())


def _randomize_affine(module: nn.Module, g: torch.Generator) -> None:
    """Move norm affine parameters off their 1/0 init so no activation sits on the leaky-ReLU kink."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (nn.InstanceNorm3d, nn.LayerNorm)):
                sub.weight.copy_(1 + _randn(g, *sub.weight.shape, scale=0.1))
                sub.bias.copy_(_randn(g, *sub.bias.shape, scale=0.1))


def _params(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


def _case_trilinear_sample(g):
    inputs = {"vol": _randn(g, 5, 5, 5), "coord": torch.tensor([1.3, 2.7, 0.4], dtype=DTYPE)}
    return GradCase(lambda: trilinear_sample(Volume(inputs["vol"]), inputs["coord"]), inputs)


def _case_avg_pool_2x(g):
    inputs = {"fm": _randn(g, 2, 5, 4, 3)}
    return GradCase(lambda: avg_pool_2x(FeatureMap(inputs["fm"])), inputs)


def _case_upsample_field_2x(g):
    inputs = {"field": _randn(g, 3, 3, 4, 3)}
    return GradCase(lambda: upsample_field_2x(DisplacementField(inputs["field"]), (6, 8, 5)), inputs)


def _case_warp(g):
    inputs = {"vol": _randn(g, 6, 6, 6), "field": _randn(g, 3, 6, 6, 6, scale=0.8)}
    return GradCase(lambda: warp(Volume(inputs["vol"]), DisplacementField(inputs["field"])), inputs)


def _case_compose(g):
    inputs = {"prev": _randn(g, 3, 5, 5, 5, scale=0.7), "res": _randn(g, 3, 5, 5, 5, scale=0.7)}
    return GradCase(
        lambda: compose(DisplacementField(inputs["prev"]), DisplacementField(inputs["res"])), inputs
    )


def _case_jacobian_determinant(g):
    inputs = {"field": _randn(g, 3, 4, 4, 4, scale=0.3)}
    return GradCase(lambda: jacobian_determinant(DisplacementField(inputs["field"])), inputs)


def _case_conv3(g):
    inputs = {"fm": _randn(g, 2, 4, 4, 4), "weight": _randn(g, 3, 2, 3, 3, 3), "bias": _randn(g, 3)}
    return GradCase(lambda: conv3(FeatureMap(inputs["fm"]), inputs["weight"], inputs["bias"]), inputs)


def _case_instance_norm(g):
    inputs = {"fm": _randn(g, 3, 4, 4, 4), "scale": 1 + _randn(g, 3, scale=0.1), "shift": _randn(g, 3)}
    # squared: a linear read-out of a normalised map is nearly flat in fm
    return GradCase(
        lambda: instance_norm(FeatureMap(inputs["fm"]), inputs["scale"], inputs["shift"]).data ** 2, inputs
    )


def _case_leaky_relu(g):
    inputs = {"fm": _away_from_zero(g, 2, 4, 4, 4)}
    return GradCase(lambda: leaky_relu(FeatureMap(inputs["fm"]), 0.2), inputs)


def _case_ncc_loss(g):
    inputs = {"fixed": _randn(g, 8, 8, 8), "warped": _randn(g, 8, 8, 8)}
    return GradCase(lambda: ncc_loss(Volume(inputs["fixed"]), Volume(inputs["warped"]), 5), inputs)


def _case_grad_reg(g):
    inputs = {"field": _randn(g, 3, 4, 4, 4)}
    return GradCase(lambda: grad_reg(DisplacementField(inputs["field"])), inputs)


def _case_total_loss(g):
    cfg = LossConfig(lam=0.5, ncc_window=5)
    inputs = {
        "fixed": _randn(g, 8, 8, 8),
        "moving": _randn(g, 8, 8, 8),
        "field": _randn(g, 3, 8, 8, 8, scale=0.5),
    }
    return GradCase(
        lambda: total_loss(
            Volume(inputs["fixed"]), Volume(inputs["moving"]), DisplacementField(inputs["field"]), cfg
        ),
        inputs,
    )


_ATTENTION = AttentionConfig(heads=2, head_dim=3, neighborhood=3)


def _case_project_qk(g):
    c, sd = 4, _ATTENTION.channels
    inputs = {
        "fixed": _randn(g, c, 3, 3, 3),
        "moving": _randn(g, c, 3, 3, 3),
        "weight": _randn(g, sd, c),
        "bias": _randn(g, sd, scale=0.1),
        "ln_scale": 1 + _randn(g, sd, scale=0.1),
        "ln_shift": _randn(g, sd, scale=0.1),
    }

    def fn():
        p = ProjectionParams(inputs["weight"], inputs["bias"], inputs["ln_scale"], inputs["ln_shift"])
        return project_qk(FeatureMap(inputs["fixed"]), FeatureMap(inputs["moving"]), p, _ATTENTION)

    return GradCase(fn, inputs)


def _attention_case(kernel):
    def build(g):
        shape = (_ATTENTION.heads, _ATTENTION.head_dim, 4, 4, 4)
        inputs = {"q": _randn(g, *shape), "k": _randn(g, *shape), "bias": _randn(g, _ATTENTION.heads, 3, 3, 3)}
        return GradCase(lambda: kernel(inputs["q"], inputs["k"], inputs["bias"], _ATTENTION), inputs)

    return build


def _case_subfields_from_attention(g):
    # parametrised by logits so the weights stay normalised under perturbation
    inputs = {"logits": _randn(g, _ATTENTION.heads, 64, _ATTENTION.offsets)}

    def fn():
        weights = AttentionWeights(torch.softmax(inputs["logits"], dim=-1), (4, 4, 4))
        return subfields_from_attention(weights, _ATTENTION)

    return GradCase(fn, inputs)


def _case_encode(g):
    encoder = Encoder(EncoderConfig(base_channels=2)).to(DTYPE)
    _randomize_affine(encoder, g)
    inputs = {"img": _randn(g, 16, 16, 16), **_params("encoder", encoder)}
    return GradCase(lambda: encode(Volume(inputs["img"]), encoder), inputs)


def _case_fuse(g):
    head = RegHead(heads=2).to(DTYPE)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.1, generator=g)
        head.bias.normal_(0.0, 0.1, generator=g)
    inputs = {"stack": _randn(g, 2, 3, 4, 4, 4, scale=0.5), **_params("head", head)}
    return GradCase(lambda: fuse(SubfieldStack(inputs["stack"]), head), inputs)


def _case_scaling_squaring(g):
    inputs = {"velocity": _randn(g, 3, 6, 6, 6, scale=0.4)}
    return GradCase(lambda: scaling_squaring(DisplacementField(inputs["velocity"]), 4), inputs, tolerance=1e-3)


def _case_forward(g):
    cfg = ModelConfig(encoder=EncoderConfig(base_channels=2), heads_per_level=(2, 2, 1, 1, 1), head_dim=2)
    model = PyramidRegistrationNet(cfg).to(DTYPE)
    _randomize_affine(model, g)
    # larger than the near-zero training init so every parameter moves the output measurably
    with torch.no_grad():
        for estimator in model.estimators:
            estimator.proj.weight.normal_(0.0, 1e-1, generator=g)
            estimator.rel_pos_bias.normal_(0.0, 1e-1, generator=g)
        for head in model.heads:
            head.weight.normal_(0.0, 1e-2, generator=g)
    inputs = {"fixed": _randn(g, 16, 16, 16), "moving": _randn(g, 16, 16, 16), **_params("model", model)}

    def fn():
        result = forward(Volume(inputs["fixed"]), Volume(inputs["moving"]), model)
        return result.field, result.warped

    # coarse levels are 1 to 2 voxels wide, so every sample sits near a lattice or clamp kink
    return GradCase(fn, inputs, step=1e-7)


CASES: dict[str, Callable[[torch.Generator], GradCase]] = {
    "trilinear_sample": _case_trilinear_sample,
    "avg_pool_2x": _case_avg_pool_2x,
    "upsample_field_2x": _case_upsample_field_2x,
    "warp": _case_warp,
    "compose": _case_compose,
    "jacobian_determinant": _case_jacobian_determinant,
    "conv3": _case_conv3,
    "instance_norm": _case_instance_norm,
    "leaky_relu": _case_leaky_relu,
    "ncc_loss": _case_ncc_loss,
    "grad_reg": _case_grad_reg,
    "total_loss": _case_total_loss,
    "project_qk": _case_project_qk,
    "neighborhood_attention_fused": _attention_case(neighborhood_attention_fused),
    "neighborhood_attention_naive": _attention_case(neighborhood_attention_naive),
    "subfields_from_attention": _case_subfields_from_attention,
    "encode": _case_encode,
    "fuse": _case_fuse,
    "scaling_squaring": _case_scaling_squaring,
    "forward": _case_forward,
}


def missing_cases() -> list[str]:
    """Registered ops without a gradient case."""
    return sorted(set(REGISTERED_OPS) - set(CASES))


def run_suite(ops: Optional[Iterable[str]] = None, seed: int = 0) -> list[GradCheckReport]:
    """Run the cases for `ops` (all registered ops by default), in a fixed order."""
    selected = list(ops) if ops is not None else sorted(REGISTERED_OPS)
    reports = []
    for op in selected:
        if op not in CASES:
            reports.append(GradCheckReport(op, DEFAULT_TOLERANCE, failure="no gradient case registered"))
            continue
        generator = torch.Generator().manual_seed(seed)
        case = CASES[op](generator)
        reports.append(grad_check(op, case.fn, case.inputs, case.tolerance, step=case.step, seed=seed))
    failed = [r.op for r in reports if not r.passed]
    logger.info(f"Gradient suite: {len(reports) - len(failed)}/{len(reports)} passed" + (f", failed: {failed}" if failed else ""))
    return reports
