"""Functional model of a bit-sliced integer MAC datapath.

Weights arrive as 4-bit slice pairs and activations as signed 8-bit
integers.  Both weight slices map into a signed 5-bit field before the
multiply: the MSB slice is left-aligned (doubled) with a hardwired bit at
the vacated LSB position, set to 1 in draft mode so that MSB-only partial
sums carry a built-in half-unit correction, and 0 in full-precision mode so
the separately accumulated LSB slice can be combined without double
counting.  The unsigned LSB slice is zero-extended into the same field.

Accumulators are unbounded model integers; hardware sizing is out of scope.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .bitnest import BitSlicePair, QuantGroup, split_slices

ACT_MIN = -127
ACT_MAX = 127


class SliceMode(enum.Enum):
    FULL_PRECISION = "full_precision"
    DRAFT_MSB_ONLY = "draft_msb_only"


@dataclass(frozen=True)
class FieldValue:
    """Signed 5-bit operand field in [-16, 15]."""

    value: int

    def __post_init__(self):
        if not -16 <= self.value <= 15:
            raise ValueError(f"field value {self.value} outside [-16, 15]")


def to_msb_field(msb: int, mode: SliceMode) -> FieldValue:
    """Map an MSB slice into the 5-bit field: 2*msb plus the hardwired bit.

    The bit is 1 in draft mode and 0 in full-precision mode.
    """
    if not -8 <= msb <= 7:
        raise ValueError(f"msb {msb} outside [-8, 7]")
    bit = 1 if mode is SliceMode.DRAFT_MSB_ONLY else 0
    return FieldValue(2 * msb + bit)


def to_lsb_field(lsb: int) -> FieldValue:
    """Zero-extend an LSB slice into the signed 5-bit field."""
    if not 0 <= lsb <= 15:
        raise ValueError(f"lsb {lsb} outside [0, 15]")
    return FieldValue(lsb)


def _check_activations(activations: Sequence[int]) -> list[int]:
    acts = [int(a) for a in activations]
    for a in acts:
        if not ACT_MIN <= a <= ACT_MAX:
            raise ValueError(f"activation {a} outside [{ACT_MIN}, {ACT_MAX}]")
    return acts


def sliced_dot(
    activations: Sequence[int],
    weights: Sequence[BitSlicePair],
    mode: SliceMode,
) -> int:
    """Dot product through the sliced datapath, in weight-code units.

    MSB and LSB partial sums accumulate separately in index order; the MSB
    sum is shifted up by 3 bits when combined.  In full-precision mode the
    result equals the direct int8 dot product sum(a[i] * code[i]) exactly.
    Draft mode returns only the shifted MSB sum, which equals a dot product
    against the surrogate codes 16*msb + 8.
    """
    acts = _check_activations(activations)
    if len(acts) != len(weights):
        raise ValueError(f"length mismatch: {len(acts)} vs {len(weights)}")
    acc_msb = 0
    acc_lsb = 0
    for a, w in zip(acts, weights):
        acc_msb += a * to_msb_field(w.msb, mode).value
        acc_lsb += a * to_lsb_field(w.lsb).value
    if mode is SliceMode.DRAFT_MSB_ONLY:
        return 8 * acc_msb
    return 8 * acc_msb + acc_lsb


def dequant_dot(
    activations: Sequence[int],
    weight_group: QuantGroup,
    act_scale: float,
    mode: SliceMode,
) -> float:
    """Group dot product with dequantization fused at the accumulator.

    The integer sliced_dot result is scaled once by weight_scale *
    act_scale; no per-element rounding happens, so the full-precision
    result matches a real-valued dot of the dequantized operands.
    """
    weights = [split_slices(c) for c in weight_group.codes.tolist()]
    raw = sliced_dot(activations, weights, mode)
    return raw * weight_group.scale * act_scale
