"""Multi-head neighborhood attention and its conversion into displacement subfields.

Attention weights are laid out (S, h*w*l, n^3): head, flattened position, neighborhood
offset. Offsets enumerate [-r, r]^3 with the first axis slowest; the relative position
bias B (S, n, n, n) flattens to the same order.

Logits are Q_p . K_{p+o} + B_o with no 1/sqrt(d) temperature. Neighbors outside the grid
read a zero K vector, so their logit is the bias alone.
"""
from dataclasses import dataclass
from typing import Optional
import itertools
import logging

import torch
import torch.nn.functional as F

from motionreg.core.config import AttentionConfig
from motionreg.core.errors import ComputationError, InvalidInputError
from motionreg.diff.tape import taped
from motionreg.ops.volume import Dims, FeatureMap

logger = logging.getLogger(__name__)

LN_EPS = 1e-5
NORMALIZATION_TOLERANCE = 1e-5


@dataclass(frozen=True)
class ProjectionParams:
    weight: torch.Tensor  # (S*d, c)
    bias: torch.Tensor  # (S*d,)
    ln_scale: torch.Tensor  # (S*d,)
    ln_shift: torch.Tensor  # (S*d,)


@dataclass(frozen=True)
class AttentionWeights:
    data: torch.Tensor  # (S, h*w*l, n^3)
    dims: Dims


@dataclass(frozen=True)
class SubfieldStack:
    data: torch.Tensor  # (S, 3, h, w, l)

    @property
    def heads(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[2:])


class AuxMemoryMeter:
    """Tracks bytes of temporary tensors an attention kernel holds at once."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, tensor: torch.Tensor) -> None:
        self.current += tensor.numel() * tensor.element_size()
        self.peak = max(self.peak, self.current)

    def free(self, tensor: torch.Tensor) -> None:
        self.current -= tensor.numel() * tensor.element_size()


def offset_grid(neighborhood: int, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """The fixed value grid V: integer offsets in [-r, r]^3, shape (n^3, 3)."""
    r = (neighborhood - 1) // 2
    offsets = list(itertools.product(range(-r, r + 1), repeat=3))
    return torch.tensor(offsets, dtype=dtype, device=device)


def _neighbor_view(padded: torch.Tensor, offset: tuple[int, int, int], radius: int, dims: Dims) -> torch.Tensor:
    a, b, c = offset
    h, w, l = dims
    return padded[..., radius + a : radius + a + h, radius + b : radius + b + w, radius + c : radius + c + l]


def _stable_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def _check_logits(logits: torch.Tensor, dims: Dims, op: str) -> None:
    finite = torch.isfinite(logits)
    if bool(finite.all()):
        return
    head, flat, offset = torch.nonzero(~finite)[0].tolist()
    h, w, l = dims
    position = (head, flat // (w * l), (flat // l) % w, flat % l, offset)
    raise ComputationError("Non-finite attention logit", op=op, position=position)


def _check_qk(q: torch.Tensor, k: torch.Tensor, cfg: AttentionConfig) -> None:
    if q.shape != k.shape:
        raise InvalidInputError(f"Q and K shapes differ: {tuple(q.shape)} vs {tuple(k.shape)}")
    if q.ndim != 5 or q.shape[0] != cfg.heads or q.shape[1] != cfg.head_dim:
        raise InvalidInputError(
            f"Q must be (S={cfg.heads}, d={cfg.head_dim}, h, w, l), got {tuple(q.shape)}"
        )


@taped("project_qk")
def project_qk(
    fixed: FeatureMap, moving: FeatureMap, p: ProjectionParams, cfg: AttentionConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """Q = LN(proj(F)), K = LN(proj(M)) with shared weights, split into S heads of d channels.

    LayerNorm runs jointly over all S*d channels, before the head split.
    """
    if fixed.channels != moving.channels or fixed.dims != moving.dims:
        raise InvalidInputError(
            f"project_qk: fixed {fixed.channels}x{fixed.dims} and moving {moving.channels}x{moving.dims} differ"
        )
    if p.weight.shape != (cfg.channels, fixed.channels):
        raise InvalidInputError(
            f"project_qk: weight must be ({cfg.channels}, {fixed.channels}), got {tuple(p.weight.shape)}"
        )

    def project(fm: FeatureMap) -> torch.Tensor:
        x = fm.data.reshape(fm.channels, -1).T
        y = F.layer_norm(F.linear(x, p.weight, p.bias), (cfg.channels,), p.ln_scale, p.ln_shift, eps=LN_EPS)
        return y.T.reshape(cfg.heads, cfg.head_dim, *fm.dims)

    return project(fixed), project(moving)


class _FusedNeighborhoodAttention(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, bias, radius: int, meter: AuxMemoryMeter):
        heads, _, h, w, l = q.shape
        dims = (h, w, l)
        offsets = list(itertools.product(range(-radius, radius + 1), repeat=3))
        padded = F.pad(k, (radius,) * 6)
        meter.alloc(padded)

        logits = q.new_empty((heads, h * w * l, len(offsets)))
        for o, offset in enumerate(offsets):
            product = q * _neighbor_view(padded, offset, radius, dims)
            meter.alloc(product)
            logits[:, :, o] = product.sum(dim=1).reshape(heads, -1)
            meter.free(product)
            del product
        meter.free(padded)
        del padded

        logits += bias.reshape(heads, 1, -1)
        _check_logits(logits, dims, "neighborhood_attention_fused")
        weights = _stable_softmax(logits)

        ctx.save_for_backward(q, k, weights)
        ctx.radius = radius
        ctx.offsets = offsets
        return weights

    @staticmethod
    def backward(ctx, grad_weights):
        q, k, weights = ctx.saved_tensors
        radius, offsets = ctx.radius, ctx.offsets
        heads, _, h, w, l = q.shape
        dims = (h, w, l)

        # softmax backward
        grad_logits = weights * (grad_weights - (grad_weights * weights).sum(dim=-1, keepdim=True))

        grad_q = grad_k = grad_bias = None
        padded = F.pad(k, (radius,) * 6)
        if ctx.needs_input_grad[0]:
            grad_q = torch.zeros_like(q)
        if ctx.needs_input_grad[1]:
            grad_padded = torch.zeros_like(padded)
        for o, offset in enumerate(offsets):
            g = grad_logits[:, :, o].reshape(heads, 1, h, w, l)
            if grad_q is not None:
                grad_q += g * _neighbor_view(padded, offset, radius, dims)
            if ctx.needs_input_grad[1]:
                _neighbor_view(grad_padded, offset, radius, dims).add_(g * q)
        if ctx.needs_input_grad[1]:
            grad_k = _neighbor_view(grad_padded, (0, 0, 0), radius, dims).contiguous()
        if ctx.needs_input_grad[2]:
            grad_bias = grad_logits.sum(dim=1).reshape(heads, *([2 * radius + 1] * 3))
        return grad_q, grad_k, grad_bias, None, None


@taped("neighborhood_attention_fused")
def neighborhood_attention_fused(
    q: torch.Tensor,
    k: torch.Tensor,
    bias: torch.Tensor,
    cfg: AttentionConfig,
    meter: Optional[AuxMemoryMeter] = None,
) -> AttentionWeights:
    """Neighborhood attention that streams K one offset at a time.

    Auxiliary memory is one padded copy of K plus one (S, d, h, w, l) product per offset;
    the (S, d, positions, n^3) window tensor is never built.
    """
    _check_qk(q, k, cfg)
    if bias.shape != (cfg.heads, cfg.neighborhood, cfg.neighborhood, cfg.neighborhood):
        raise InvalidInputError(f"relative position bias must be (S, n, n, n), got {tuple(bias.shape)}")
    weights = _FusedNeighborhoodAttention.apply(q, k, bias, cfg.radius, meter or AuxMemoryMeter())
    return AttentionWeights(weights, tuple(q.shape[2:]))


@taped("neighborhood_attention_naive")
def neighborhood_attention_naive(
    q: torch.Tensor,
    k: torch.Tensor,
    bias: torch.Tensor,
    cfg: AttentionConfig,
    meter: Optional[AuxMemoryMeter] = None,
) -> AttentionWeights:
    """Reference implementation: build explicit n^3 sliding windows of K, then dot and softmax."""
    _check_qk(q, k, cfg)
    meter = meter or AuxMemoryMeter()
    heads, head_dim, h, w, l = q.shape
    n, r = cfg.neighborhood, cfg.radius
    padded = F.pad(k, (r,) * 6)
    meter.alloc(padded)
    windows = (
        padded.unfold(2, n, 1).unfold(3, n, 1).unfold(4, n, 1).reshape(heads, head_dim, h * w * l, n**3)
    )
    meter.alloc(windows)
    product = q.reshape(heads, head_dim, -1, 1) * windows
    meter.alloc(product)
    logits = product.sum(dim=1) + bias.reshape(heads, 1, -1)
    _check_logits(logits, (h, w, l), "neighborhood_attention_naive")
    return AttentionWeights(_stable_softmax(logits), (h, w, l))


@taped("subfields_from_attention")
def subfields_from_attention(weights: AttentionWeights, cfg: AttentionConfig) -> SubfieldStack:
    """phi^(s)_p = sum over offsets of weight(p, s, offset) * offset; V is a constant grid."""
    data = weights.data
    if data.ndim != 3 or data.shape[0] != cfg.heads or data.shape[2] != cfg.offsets:
        raise InvalidInputError(
            f"attention weights must be (S={cfg.heads}, positions, {cfg.offsets}), got {tuple(data.shape)}"
        )
    sums = data.detach().sum(dim=-1)
    deviation = float((sums - 1).abs().max())
    if deviation > NORMALIZATION_TOLERANCE:
        raise InvalidInputError(f"attention weights are not normalised (max |sum - 1| = {deviation:.3g})")
    values = offset_grid(cfg.neighborhood, dtype=data.dtype, device=data.device)
    fields = torch.matmul(data, values)  # (S, positions, 3)
    return SubfieldStack(fields.permute(0, 2, 1).reshape(cfg.heads, 3, *weights.dims))
