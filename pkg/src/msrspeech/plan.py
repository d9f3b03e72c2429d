"""Downsampling plans: strided-conv stacks that land on a 20 ms frame grid.

A plan is a stack of valid (unpadded) strided 1-D convolutions whose stride
product consumes exactly one frame shift of samples per output frame, so that
audio at any supported sampling rate maps onto the same 50 frames/second grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import PlanError, TooShortError

FRAME_SHIFT_S = 0.02
TARGET_WINDOW_MS = 25.0
MAX_STRIDE_FACTOR = 7
KERNEL_CAP_FACTOR = 3  # derived kernels never exceed 3x their stride
DEFAULT_CHANNELS = 512

# rate -> (strides, kernels) for the four supported corpus rates
_CANONICAL = {
    16000: ((5, 2, 2, 2, 2, 2, 2), (10, 3, 3, 3, 3, 2, 2)),
    22050: ((7, 7, 3, 3), (19, 14, 4, 3)),
    24000: ((5, 3, 2, 2, 2, 2, 2), (10, 5, 3, 3, 3, 2, 2)),
    48000: ((5, 3, 2, 2, 2, 2, 2, 2), (10, 5, 3, 3, 3, 3, 2, 2)),
}

CANONICAL_RATES = tuple(sorted(_CANONICAL))


@dataclass(frozen=True)
class PlanLayer:
    """One strided conv layer: kernel width, stride, output channels."""

    kernel: int
    stride: int
    channels: int


@dataclass(frozen=True)
class ReceptiveField:
    samples: int
    ms: float


@dataclass(frozen=True)
class DownsamplePlan:
    """Per-rate conv stack whose stride product equals the frame shift in samples."""

    rate_hz: int
    dr: int  # samples consumed per output frame; equals the stride product
    layers: tuple[PlanLayer, ...]

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(l.stride for l in self.layers)

    @property
    def kernels(self) -> tuple[int, ...]:
        return tuple(l.kernel for l in self.layers)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].channels

    def to_dict(self) -> dict:
        return {
            "rate_hz": self.rate_hz,
            "dr": self.dr,
            "layers": [
                {"kernel": l.kernel, "stride": l.stride, "channels": l.channels}
                for l in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DownsamplePlan":
        layers = tuple(
            PlanLayer(int(l["kernel"]), int(l["stride"]), int(l["channels"]))
            for l in d["layers"]
        )
        return cls(rate_hz=int(d["rate_hz"]), dr=int(d["dr"]), layers=layers)

    @classmethod
    def from_json(cls, text: str) -> "DownsamplePlan":
        return cls.from_dict(json.loads(text))


def _channel_list(channels: int | Sequence[int], n_layers: int) -> list[int]:
    if isinstance(channels, int):
        return [channels] * n_layers
    chans = [int(c) for c in channels]
    if len(chans) != n_layers:
        raise ValueError(
            f"expected {n_layers} channel counts, got {len(chans)}"
        )
    return chans


def _build(rate_hz: int, dr: int, strides, kernels, channels) -> DownsamplePlan:
    chans = _channel_list(channels, len(strides))
    layers = tuple(
        PlanLayer(kernel=k, stride=s, channels=c)
        for k, s, c in zip(kernels, strides, chans)
    )
    return DownsamplePlan(rate_hz=rate_hz, dr=dr, layers=layers)


def _exact_frame_samples(rate_hz: int, frame_shift_s: float) -> int:
    """Samples per frame shift, or raise if the product is not an integer."""
    shift = Fraction(str(float(frame_shift_s)))
    dr = Fraction(rate_hz) * shift
    if dr.denominator != 1:
        raise PlanError(
            "incompatible-rate", f"incompatible rate: dr = {float(dr)}"
        )
    return int(dr)


def _prime_factors_desc(n: int) -> list[int]:
    factors = []
    rest = n
    for p in (2, 3, 5, 7):
        while rest % p == 0:
            factors.append(p)
            rest //= p
    if rest != 1:
        raise PlanError(
            "unfactorable-rate",
            f"downsampling ratio {n} has prime factor > {MAX_STRIDE_FACTOR}",
        )
    return sorted(factors, reverse=True)


def canonical_plan(rate_hz: int, channels: int | Sequence[int] = DEFAULT_CHANNELS) -> DownsamplePlan:
    """Return the published stride/kernel row for one of the four corpus rates."""
    if rate_hz not in _CANONICAL:
        raise PlanError(
            "no-canonical-plan",
            f"no canonical plan for {rate_hz} Hz; use derive_plan",
        )
    strides, kernels = _CANONICAL[rate_hz]
    return _build(rate_hz, rate_hz * 2 // 100, strides, kernels, channels)


def derive_plan(
    rate_hz: int,
    frame_shift_s: float = FRAME_SHIFT_S,
    channels: int | Sequence[int] = DEFAULT_CHANNELS,
) -> DownsamplePlan:
    """Build a plan for an arbitrary rate.

    Strides are the prime factors of the per-frame sample count in
    non-increasing order. Kernels start equal to their strides and are widened
    greedily, first layer first, one unit at a time, until the receptive field
    reaches the 25 ms analysis window. Canonical rates return the published row.
    """
    if rate_hz in _CANONICAL and float(frame_shift_s) == FRAME_SHIFT_S:
        return canonical_plan(rate_hz, channels=channels)
    dr = _exact_frame_samples(rate_hz, frame_shift_s)
    strides = _prime_factors_desc(dr)
    kernels = list(strides)
    # smallest sample count whose duration is >= TARGET_WINDOW_MS
    target = int(math.ceil(Fraction(rate_hz) * Fraction(str(TARGET_WINDOW_MS)) / 1000))
    for i in range(len(strides)):
        cap = KERNEL_CAP_FACTOR * strides[i]
        while kernels[i] < cap and _rf_samples(strides, kernels) < target:
            kernels[i] += 1
        if _rf_samples(strides, kernels) >= target:
            break
    return _build(rate_hz, dr, strides, kernels, channels)


def _rf_samples(strides, kernels) -> int:
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


def receptive_field(plan: DownsamplePlan) -> ReceptiveField:
    """Input samples (and ms) influencing a single output frame."""
    samples = _rf_samples(plan.strides, plan.kernels)
    ms = float(Fraction(samples * 1000, plan.rate_hz))
    return ReceptiveField(samples=samples, ms=ms)


def frame_count(plan: DownsamplePlan, n_samples: int) -> int:
    """Output frame count for an input of n_samples, chaining each conv layer."""
    rf = receptive_field(plan).samples
    if n_samples < rf:
        raise TooShortError(
            f"input of {n_samples} samples is shorter than the "
            f"{rf}-sample receptive field"
        )
    t = n_samples
    for layer in plan.layers:
        t = (t - layer.kernel) // layer.stride + 1
    return t


def validate_plan(plan: DownsamplePlan) -> list[str]:
    """Return a list of invariant violations; empty means the plan is valid."""
    violations = []
    product = math.prod(plan.strides) if plan.layers else 0
    if product != plan.dr:
        violations.append(f"stride product {product} != dr {plan.dr}")
    expected_dr = Fraction(plan.rate_hz) * Fraction(1, 50)
    if expected_dr.denominator != 1 or plan.dr != int(expected_dr):
        violations.append(
            f"dr {plan.dr} != rate_hz x {FRAME_SHIFT_S} = {float(expected_dr)}"
        )
    for i, layer in enumerate(plan.layers):
        if layer.kernel < layer.stride:
            violations.append(f"kernel < stride at layer {i}")
        if layer.kernel < 1 or layer.stride < 1:
            violations.append(f"non-positive kernel or stride at layer {i}")
        if layer.channels < 1:
            violations.append(f"non-positive channels at layer {i}")
    return violations
