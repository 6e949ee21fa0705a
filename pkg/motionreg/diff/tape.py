"""Reverse-mode bookkeeping on top of torch autograd.

torch builds the backward graph; the Tape records which motionreg operations ran, in
order, and hooks each recorded output so the backward pass can be audited: the visit
order is logged and a non-finite gradient is reported with the name of the op that
produced it.
"""
from contextvars import ContextVar
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, Optional
import functools
import logging

import torch

from motionreg.core.errors import ComputationError, InvalidInputError

logger = logging.getLogger(__name__)

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("motionreg_active_tape", default=None)

# Every op decorated with @taped, by name. The gradcheck suite asserts full coverage.
REGISTERED_OPS: dict[str, Callable] = {}


class Role(str, Enum):
    ENCODER_CONV = "encoder_conv"
    NORM_AFFINE = "norm_affine"
    PROJECTION = "projection"
    REL_POS_BIAS = "rel_pos_bias"
    REGHEAD_CONV = "reghead_conv"


@dataclass
class ParamTensor:
    name: str
    role: Role
    value: torch.nn.Parameter

    @property
    def grad(self) -> torch.Tensor:
        if self.value.grad is None:
            return torch.zeros_like(self.value)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = torch.zeros_like(self.value)


@dataclass
class TapeRecord:
    index: int
    op: str
    output: torch.Tensor = field(repr=False)


class Tape:
    """Ordered record of the ops executed during one forward pass."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.visited: list[str] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: torch.Tensor) -> None:
        if not output.requires_grad:
            return
        record = TapeRecord(index=len(self.records), op=op, output=output)
        self.records.append(record)
        output.register_hook(self._make_hook(record))

    def _make_hook(self, record: TapeRecord) -> Callable[[torch.Tensor], None]:
        def hook(grad: torch.Tensor) -> None:
            self.visited.append(record.op)
            if not torch.isfinite(grad).all():
                raise ComputationError("Non-finite gradient in backward pass", op=record.op)

        return hook

    def backward(
        self,
        loss: torch.Tensor,
        params: Iterable[ParamTensor],
        seed: float = 1.0,
    ) -> dict[str, torch.Tensor]:
        """Zero every parameter's gradient slot, then backpropagate `seed` from `loss`.

        Returns:
            The populated gradients keyed by parameter name.
        """
        if loss.numel() != 1:
            raise InvalidInputError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
        params = list(params)
        for p in params:
            p.zero_grad()
        self.visited.clear()

        loss.backward(torch.full_like(loss, seed))

        grads = {}
        for p in params:
            if not torch.isfinite(p.grad).all():
                raise ComputationError(f"Non-finite gradient for parameter {p.name}", op=p.role.value)
            grads[p.name] = p.grad
        logger.debug(f"Backward visited {len(self.visited)} of {len(self.records)} recorded ops")
        return grads


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def output_tensors(result: Any) -> Iterator[torch.Tensor]:
    if isinstance(result, torch.Tensor):
        yield result
    elif isinstance(result, (tuple, list)):
        for item in result:
            yield from output_tensors(item)
    elif isinstance(getattr(result, "data", None), torch.Tensor):
        yield result.data


def taped(op: str) -> Callable[[Callable], Callable]:
    """Register a differentiable op and record its outputs on the active tape."""

    def decorator(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            result = fn(*args, **kwargs)
            tape = _active_tape.get()
            if tape is not None:
                for tensor in output_tensors(result):
                    tape.record(op, tensor)
            return result

        REGISTERED_OPS[op] = wrapper
        return wrapper

    return decorator
