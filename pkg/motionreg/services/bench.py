"""Fused versus naive neighborhood attention: wall time and auxiliary memory."""
from dataclasses import dataclass, field
from typing import Callable
import logging
import time

import torch

from motionreg.core.config import AttentionConfig
from motionreg.ops.attention import (
    AuxMemoryMeter,
    neighborhood_attention_fused,
    neighborhood_attention_naive,
)

logger = logging.getLogger(__name__)

MAX_MEMORY_RATIO = 0.2


@dataclass
class BenchRow:
    impl: str
    dims: tuple[int, int, int]
    S: int
    time_ms: float
    peak_aux_bytes: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    max_abs_diff: float = 0.0

    def row(self, impl: str) -> BenchRow:
        return next(r for r in self.rows if r.impl == impl)

    @property
    def memory_ratio(self) -> float:
        return self.row("fused").peak_aux_bytes / max(self.row("naive").peak_aux_bytes, 1)

    @property
    def time_ratio(self) -> float:
        return self.row("fused").time_ms / max(self.row("naive").time_ms, 1e-9)

    @property
    def passed(self) -> bool:
        return self.memory_ratio <= MAX_MEMORY_RATIO and self.time_ratio <= 1.0


def _time(fn: Callable[[], torch.Tensor], repeats: int) -> tuple[float, torch.Tensor]:
    best, out = float("inf"), None
    for _ in range(repeats):
        started = time.perf_counter()
        out = fn()
        best = min(best, (time.perf_counter() - started) * 1e3)
    return best, out


def bench_attention(
    dims: int = 32,
    heads: int = 8,
    head_dim: int = 6,
    neighborhood: int = 3,
    repeats: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Run both kernels on random Q/K/B of shape (S, d, dims^3) and compare.

    Times are the best of `repeats` forward passes. Peak auxiliary bytes count the
    temporaries each kernel allocates beyond its inputs and the output weights.
    """
    cfg = AttentionConfig(heads=heads, head_dim=head_dim, neighborhood=neighborhood)
    generator = torch.Generator().manual_seed(seed)
    shape = (heads, head_dim, dims, dims, dims)
    q = torch.randn(shape, generator=generator, dtype=torch.float32)
    k = torch.randn(shape, generator=generator, dtype=torch.float32)
    bias = torch.randn((heads, neighborhood, neighborhood, neighborhood), generator=generator, dtype=torch.float32)

    report = BenchReport()
    outputs = {}
    with torch.no_grad():
        for impl, kernel in (("fused", neighborhood_attention_fused), ("naive", neighborhood_attention_naive)):
            meters: list[AuxMemoryMeter] = []

            def run() -> torch.Tensor:
                meters.append(AuxMemoryMeter())
                return kernel(q, k, bias, cfg, meter=meters[-1]).data

            ms, weights = _time(run, repeats)
            meter = meters[-1]
            outputs[impl] = weights
            report.rows.append(BenchRow(impl, (dims, dims, dims), heads, ms, meter.peak))
            logger.info(f"bench {impl}: {ms:.1f} ms, peak aux {meter.peak / 2**20:.2f} MiB")
    report.max_abs_diff = float((outputs["fused"] - outputs["naive"]).abs().max())
    logger.info(
        f"bench dims={dims}^3 S={heads}: memory ratio {report.memory_ratio:.3f}, "
        f"time ratio {report.time_ratio:.3f}, max |diff| {report.max_abs_diff:.2e}"
    )
    return report
