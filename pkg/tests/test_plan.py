import numpy as np
import pytest

from msrspeech.errors import PlanError, TooShortError
from msrspeech.plan import (
    CANONICAL_RATES,
    DownsamplePlan,
    PlanLayer,
    canonical_plan,
    derive_plan,
    frame_count,
    receptive_field,
    validate_plan,
)

PUBLISHED_ROWS = {
    16000: ((5, 2, 2, 2, 2, 2, 2), (10, 3, 3, 3, 3, 2, 2)),
    22050: ((7, 7, 3, 3), (19, 14, 4, 3)),
    24000: ((5, 3, 2, 2, 2, 2, 2), (10, 5, 3, 3, 3, 2, 2)),
    48000: ((5, 3, 2, 2, 2, 2, 2, 2), (10, 5, 3, 3, 3, 3, 2, 2)),
}


def chain_frame_count(strides, kernels, n):
    """Independent layer-by-layer shape oracle."""
    t = n
    for k, s in zip(kernels, strides):
        t = (t - k) // s + 1
    return t


def min_input_for_one_frame(strides, kernels):
    """Invert the shape chain: the input length yielding exactly one frame.

    This equals the receptive field but is computed by a different recurrence.
    """
    t = 1
    for k, s in zip(reversed(kernels), reversed(strides)):
        t = (t - 1) * s + k
    return t


class TestCanonicalRows:
    @pytest.mark.parametrize("rate", sorted(PUBLISHED_ROWS))
    def test_published_strides_and_kernels(self, rate):
        p = canonical_plan(rate)
        strides, kernels = PUBLISHED_ROWS[rate]
        assert p.strides == strides
        assert p.kernels == kernels

    @pytest.mark.parametrize(
        "rate,product", [(16000, 320), (22050, 441), (24000, 480), (48000, 960)]
    )
    def test_stride_product_is_frame_shift_samples(self, rate, product):
        p = canonical_plan(rate)
        assert int(np.prod(p.strides)) == product == p.dr
        assert p.dr == rate * 2 // 100

    def test_unknown_rate_rejected(self):
        with pytest.raises(PlanError) as ei:
            canonical_plan(32000)
        assert ei.value.code == "no-canonical-plan"

    @pytest.mark.parametrize("rate", sorted(PUBLISHED_ROWS))
    def test_rows_pass_validation(self, rate):
        assert validate_plan(canonical_plan(rate)) == []


class TestDerivePlan:
    def test_32k_plan(self):
        p = derive_plan(32000)
        assert int(np.prod(p.strides)) == 640 == p.dr
        rf = receptive_field(p)
        assert 25.0 <= rf.ms <= 27.0
        assert validate_plan(p) == []

    def test_non_integer_ratio_rejected(self):
        with pytest.raises(PlanError) as ei:
            derive_plan(11025)
        assert ei.value.code == "incompatible-rate"
        assert "220.5" in str(ei.value)

    def test_large_prime_rejected(self):
        # 22000 * 0.02 = 440 = 2^3 * 5 * 11
        with pytest.raises(PlanError) as ei:
            derive_plan(22000)
        assert ei.value.code == "unfactorable-rate"

    def test_canonical_rates_return_published_rows(self):
        for rate in CANONICAL_RATES:
            assert derive_plan(rate) == canonical_plan(rate)

    @pytest.mark.parametrize("rate", [8000, 32000, 44100, 96000, 12000])
    def test_derived_plans_valid_with_window_length_reached(self, rate):
        p = derive_plan(rate)
        assert validate_plan(p) == []
        assert int(np.prod(p.strides)) / rate == 0.02
        assert receptive_field(p).ms >= 25.0
        assert all(l.kernel <= 3 * l.stride for l in p.layers)


class TestFrameCount:
    @pytest.mark.parametrize("rate", sorted(PUBLISHED_ROWS))
    def test_one_second_gives_49_frames(self, rate):
        assert frame_count(canonical_plan(rate), rate) == 49

    @pytest.mark.parametrize("rate", sorted(PUBLISHED_ROWS))
    def test_matches_chain_oracle(self, rate):
        p = canonical_plan(rate)
        rng = np.random.default_rng(rate)
        for n in rng.integers(receptive_field(p).samples, 5 * rate, size=25):
            assert frame_count(p, int(n)) == chain_frame_count(p.strides, p.kernels, int(n))

    def test_too_short_input(self):
        p = canonical_plan(16000)
        with pytest.raises(TooShortError):
            frame_count(p, 399)
        assert frame_count(p, 400) == 1

    def test_alignment_across_rates_on_duration_grid(self):
        plans = [canonical_plan(r) for r in CANONICAL_RATES]
        for d in np.arange(0.5, 10.0001, 0.1):
            counts = [frame_count(p, round(d * p.rate_hz)) for p in plans]
            assert max(counts) - min(counts) <= 1, f"duration {d}: {counts}"


class TestReceptiveField:
    @pytest.mark.parametrize(
        "rate,samples", [(16000, 400), (22050, 551), (24000, 600), (48000, 1200)]
    )
    def test_canonical_values(self, rate, samples):
        rf = receptive_field(canonical_plan(rate))
        assert rf.samples == samples
        assert abs(rf.ms - 25.0) <= 0.05

    def test_single_layer(self):
        p = DownsamplePlan(rate_hz=50, dr=5, layers=(PlanLayer(10, 5, 4),))
        assert receptive_field(p).samples == 10

    @pytest.mark.parametrize("rate", [8000, 16000, 22050, 24000, 32000, 44100, 48000])
    def test_matches_inverted_chain_oracle(self, rate):
        p = derive_plan(rate)
        assert receptive_field(p).samples == min_input_for_one_frame(p.strides, p.kernels)


class TestValidatePlan:
    def test_bad_stride_product(self):
        p = DownsamplePlan(
            rate_hz=16000, dr=320,
            layers=(PlanLayer(10, 5, 8), PlanLayer(3, 2, 8)),
        )
        msgs = validate_plan(p)
        assert any("stride product 10" in m and "320" in m for m in msgs)

    def test_kernel_below_stride(self):
        p = DownsamplePlan(rate_hz=100, dr=2, layers=(PlanLayer(1, 2, 8),))
        msgs = validate_plan(p)
        assert any("kernel < stride at layer 0" in m for m in msgs)

    def test_dr_rate_mismatch(self):
        p = DownsamplePlan(rate_hz=16000, dr=100,
                           layers=(PlanLayer(10, 10, 8), PlanLayer(10, 10, 8)))
        msgs = validate_plan(p)
        assert any("dr 100" in m for m in msgs)


class TestSerialization:
    def test_json_round_trip(self):
        p = canonical_plan(22050, channels=[16, 16, 16, 32])
        restored = DownsamplePlan.from_json(p.to_json())
        assert restored == p

    def test_dict_fields(self):
        d = canonical_plan(16000).to_dict()
        assert d["rate_hz"] == 16000
        assert d["dr"] == 320
        assert d["layers"][0] == {"kernel": 10, "stride": 5, "channels": 512}
