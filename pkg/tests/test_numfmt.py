"""Tests for the dynamic fixed-point number format."""

import numpy as np
import pytest

from dfxtrain import numfmt as nf
from dfxtrain.errors import (
    ExponentOverflow,
    InvalidBitWidth,
    NonFiniteInput,
)

# The shifted-mantissa example bit string from the forward-mapping walkthrough.
EXAMPLE_M24 = int("001011001010101010100000", 2)
EXAMPLE_LO17 = EXAMPLE_M24 & ((1 << 17) - 1)


class TestUnpack:
    def test_power_of_two(self):
        assert nf.unpack(1.0) == nf.UnpackedFloat(0, 0, 1 << 23)

    def test_negative_fraction(self):
        # 0.75 = 1.1b x 2^-1
        assert nf.unpack(-0.75) == nf.UnpackedFloat(1, -1, (1 << 23) + (1 << 22))

    def test_subnormal(self):
        # 2^-140 = 2^9 x 2^-149
        assert nf.unpack(2.0 ** -140) == nf.UnpackedFloat(0, -126, 1 << 9)

    def test_zero(self):
        assert nf.unpack(0.0).mantissa24 == 0

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(NonFiniteInput):
            nf.unpack(bad)

    def test_repack_reproduces_bits(self):
        rng = np.random.default_rng(11)
        vals = rng.standard_normal(500).astype(np.float32)
        vals = np.concatenate([vals, np.float32([1.0, -2.5, 2.0 ** -140, 0.0])])
        for v in vals:
            u = nf.unpack(v)
            assert nf.pack(u).view(np.uint32) == np.float32(v).view(np.uint32)


class TestSharedExponent:
    def test_simple(self):
        assert nf.shared_exponent(np.float32([1.0, 0.5, 0.25])) == 0

    def test_all_zero_sentinel(self):
        assert nf.shared_exponent(np.float32([0.0, 0.0])) is None

    def test_mixed_magnitudes(self):
        # 100.0 = 1.5625 x 2^6
        assert nf.shared_exponent(np.float32([3.5, -100.0])) == 6

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            nf.shared_exponent(np.float32([1.0, np.inf]))


class TestStochasticRound:
    def test_zero_remainder_is_exact(self):
        m = 22 << 17
        for draw in (0, 1, (1 << 17) - 1):
            assert nf.stochastic_round(m, 7, draw) == 22

    def test_example_bit_string_branches(self):
        # Rounds only to the two neighbours 22 and 23.
        outs = {nf.stochastic_round(EXAMPLE_M24, 7, d)
                for d in (0, EXAMPLE_LO17 - 1, EXAMPLE_LO17, (1 << 17) - 1)}
        assert outs == {22, 23}

    def test_exact_expectation(self):
        # E = hi + lo/2^drop, i.e. E * 2^drop == m24 exactly.
        rng = np.random.default_rng(3)
        for m in rng.integers(0, 1 << 24, size=50):
            for keep in (3, 5, 7):
                drop = 24 - keep
                lo, hi = int(m) & ((1 << drop) - 1), int(m) >> drop
                up_count = sum(nf.stochastic_round(int(m), keep, d) - hi
                               for d in range(0, 1 << drop, max(1, (1 << drop) // 64)))
                # per the rule, draw < lo rounds up; count over the stride grid
                expect = sum(1 for d in range(0, 1 << drop, max(1, (1 << drop) // 64))
                             if d < lo)
                assert up_count == expect

    def test_ceiling_boundary(self):
        # 0xFFFFFF at keep 7: exact only when the draw equals lo's max.
        m = 0xFFFFFF
        lo = m & 0x1FFFF
        assert nf.stochastic_round(m, 7, lo) == 127
        assert nf.stochastic_round(m, 7, 0) == 128  # caller saturates

    def test_monte_carlo_unbiased(self):
        rng = np.random.default_rng(5)
        n = 20000
        for m in [EXAMPLE_M24, 0x800001, 0x9ABCDE]:
            draws = rng.integers(0, 1 << 17, size=n)
            out = nf.stochastic_round(np.full(n, m), 7, draws)
            p = (m & 0x1FFFF) / 2 ** 17
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(out.mean() - m / 2 ** 17) <= 4 * sigma

    def test_keep_bits_range(self):
        with pytest.raises(InvalidBitWidth):
            nf.stochastic_round(123, 2, 0)


class TestMapToFixed:
    def test_exact_powers(self):
        ctx = nf.RoundingContext(0, nf.NEAREST)
        t = nf.map_to_fixed(np.float32([1.0, 0.5, 0.25]), 8, ctx)
        assert t.shared_exponent == 0
        assert list(t.mantissas) == [64, 32, 16]

    def test_all_zero_maps_to_sentinel(self):
        ctx = nf.RoundingContext(0)
        t = nf.map_to_fixed(np.zeros(4, np.float32), 8, ctx)
        assert t.shared_exponent is None
        assert not t.mantissas.any()

    def test_example_up_probability(self):
        # Construct a float whose shifted mantissa is the worked example, then
        # check the empirical round-up rate against its lower 17 bits.
        f = np.ldexp(np.float64(EXAMPLE_M24), -23).astype(np.float32)
        x = np.float32([1.0, f])  # e_max = 0, second element aligned as-is
        ups = 0
        trials = 40000
        for s in range(trials):
            t = nf.map_to_fixed(x, 8, nf.RoundingContext(s))
            assert t.mantissas[1] in (22, 23)
            ups += t.mantissas[1] == 23
        p = EXAMPLE_LO17 / 2 ** 17
        sigma = np.sqrt(p * (1 - p) / trials)
        assert abs(ups / trials - p) <= 4 * sigma

    def test_bit_width_validation(self):
        with pytest.raises(InvalidBitWidth):
            nf.map_to_fixed(np.float32([1.0]), 9, nf.RoundingContext(0))
        with pytest.raises(InvalidBitWidth):
            nf.map_to_fixed(np.float32([1.0]), 3, nf.RoundingContext(0))

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            nf.map_to_fixed(np.float32([np.nan]), 8, nf.RoundingContext(0))

    def test_huge_shift_keeps_sticky(self):
        # An element 2^40 below e_max still rounds up sometimes.
        x = np.float32([1.0, 2.0 ** -40])
        ups = 0
        for s in range(60000):
            t = nf.map_to_fixed(x, 8, nf.RoundingContext(s))
            ups += t.mantissas[1] == 1
        # Sticky alignment gives the fixed tail rate of one part in 2^17.
        assert 0 < ups < 60000 * 32 / 2 ** 17

    def test_max_element_at_least_quarter_scale(self):
        rng = np.random.default_rng(2)
        for k in range(4, 9):
            for _ in range(20):
                x = (rng.standard_normal(31) * 10.0 ** rng.integers(-3, 4)).astype(np.float32)
                t = nf.map_to_fixed(x, k, nf.RoundingContext(int(rng.integers(1 << 30))))
                assert np.abs(t.mantissas.astype(int)).max() >= 1 << (k - 2)

    def test_saturation_one_sided(self):
        # Values just below the ceiling round up and clamp at the limit.
        x = np.float32([1.0, 127.9 / 64.0])
        t = nf.map_to_fixed(x, 8, nf.RoundingContext(0, nf.NEAREST))
        assert t.mantissas[1] == 127
        g = 2.0 ** (t.shared_exponent - 6)
        assert abs(float(x[1]) - 127 * g) < g


class TestInverseMap:
    def test_alignment_example(self):
        # shared exponent 127, mantissa pattern (0.0101)b -> 2^125 x (1.0100)b
        t = nf.FxpTensor(np.int16([5]), 127, 6)
        out = nf.inverse_map(t)
        assert out.view(np.uint32)[0] == np.float32(np.ldexp(1.25, 125)).view(np.uint32)

    def test_roundtrip_exact_values(self):
        t = nf.FxpTensor(np.int16([64, 32, 16]), 0, 8)
        np.testing.assert_array_equal(nf.inverse_map(t), np.float32([1.0, 0.5, 0.25]))

    def test_zero_mantissa_packs_positive_zero(self):
        t = nf.FxpTensor(np.int16([0, -3]), 2, 8)
        out = nf.inverse_map(t)
        assert out[0] == 0.0 and np.signbit(out[0]) == False  # noqa: E712

    def test_sentinel(self):
        out = nf.inverse_map(nf.zeros((2, 2)))
        assert out.shape == (2, 2) and not out.any()

    def test_underflow_flushes_to_zero(self):
        # e_max -125, k=8: mantissa 1 sits at exponent -131 < -126.
        t = nf.FxpTensor(np.int16([64, 1]), -125, 8)
        out = nf.inverse_map(t)
        assert out[1] == 0.0

    def test_exponent_overflow(self):
        with pytest.raises(ExponentOverflow):
            nf.wide_to_float(np.array([1 << 40]), 100)

    def test_excess_bits_round_nearest_even(self):
        # 25 significant bits: 0x1FFFFFF rounds to 0x1000000 -> carry.
        out = nf.wide_to_float(np.array([0x1FFFFFF]), 0)
        assert out[0] == np.float32(2.0 ** 25)


class TestRenormalize:
    def test_single_power_of_two(self):
        r = nf.renormalize(np.array([4096]), -5, 8, nf.RoundingContext(1, nf.NEAREST))
        assert r.shared_exponent == 7 and r.mantissas[0] == 64

    def test_all_zero(self):
        r = nf.renormalize(np.zeros(2, np.int64), 3, 8, nf.RoundingContext(1))
        assert r.shared_exponent is None

    @pytest.mark.parametrize("mode", [nf.NEAREST, nf.STOCHASTIC])
    def test_matches_two_step_float_roundtrip(self, mode):
        rng = np.random.default_rng(19)
        for trial in range(30):
            acc = rng.integers(-(2 ** 31) + 1, 2 ** 31 - 1, size=129, dtype=np.int64)
            acc[rng.integers(0, 129, size=7)] = 0
            exponent = int(rng.integers(-40, 20))
            k = int(rng.integers(4, 9))
            c1 = nf.RoundingContext(trial, mode, op_counter=100)
            c2 = nf.RoundingContext(trial, mode, op_counter=100)
            direct = nf.renormalize(acc, exponent, k, c1)
            two_step = nf.map_to_fixed(nf.wide_to_float(acc, exponent), k, c2)
            assert direct.shared_exponent == two_step.shared_exponent
            np.testing.assert_array_equal(direct.mantissas, two_step.mantissas)


class TestFormatInvariants:
    def test_roundtrip_grid_tensors_bit_exact(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            k = int(rng.integers(4, 9))
            limit = (1 << (k - 1)) - 1
            e = int(rng.integers(-100, 100))
            m = rng.integers(-limit, limit + 1, size=17)
            x = np.ldexp(m.astype(np.float64), e - (k - 2)).astype(np.float32)
            ctx = nf.RoundingContext(0, nf.NEAREST)
            back = nf.inverse_map(nf.map_to_fixed(x, k, ctx))
            np.testing.assert_array_equal(back.view(np.uint32), x.view(np.uint32))

    def test_nearest_error_bound(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            k = int(rng.integers(4, 9))
            x = (rng.standard_normal(64) * 2.0 ** rng.integers(-6, 7)).astype(np.float32)
            t = nf.map_to_fixed(x, k, nf.RoundingContext(0, nf.NEAREST))
            g = 2.0 ** (t.shared_exponent - (k - 2))
            err = np.abs(x.astype(np.float64) - t.dequantize())
            non_sat = np.abs(x.astype(np.float64)) < ((1 << (k - 1)) - 0.5) * g
            assert np.all(err[non_sat] <= g / 2)
            assert np.all(err <= g)  # saturated elements: under one grid step

    def test_monotone_up_to_ties(self):
        rng = np.random.default_rng(31)
        for s in range(50):
            k = int(rng.integers(4, 9))
            x = (rng.standard_normal(40) * 3).astype(np.float32)
            t = nf.map_to_fixed(x, k, nf.RoundingContext(s))
            g = 2.0 ** (t.shared_exponent - (k - 2))
            xe = x.astype(np.float64)
            m = t.mantissas.astype(np.int64)
            i, j = np.meshgrid(np.arange(40), np.arange(40), indexing="ij")
            apart = xe[i] < xe[j] - g
            assert np.all(m[i][apart] <= m[j][apart])

    def test_draws_are_pure_and_splittable(self):
        idx = np.arange(1000)
        full = nf.element_draws(9, 4, idx)
        lo = nf.element_draws(9, 4, idx[:300])
        hi = nf.element_draws(9, 4, idx[300:])
        np.testing.assert_array_equal(full, np.concatenate([lo, hi]))
        assert not np.array_equal(full, nf.element_draws(9, 5, idx))
        assert not np.array_equal(full, nf.element_draws(10, 4, idx))

    def test_map_deterministic_across_runs(self):
        x = np.random.default_rng(0).standard_normal(50).astype(np.float32)
        a = nf.map_to_fixed(x, 8, nf.RoundingContext(123, op_counter=7))
        b = nf.map_to_fixed(x, 8, nf.RoundingContext(123, op_counter=7))
        np.testing.assert_array_equal(a.mantissas, b.mantissas)

    def test_every_op_consumes_one_slot(self):
        ctx = nf.RoundingContext(1, nf.NEAREST)
        nf.map_to_fixed(np.zeros(3, np.float32), 8, ctx)
        nf.map_to_fixed(np.float32([1.0]), 8, ctx)
        nf.renormalize(np.array([5]), 0, 8, ctx)
        assert ctx.op_counter == 3


class TestSerialization:
    def test_roundtrip(self):
        t = nf.FxpTensor(np.arange(-8, 8, dtype=np.int16).reshape(4, 4), -3, 5)
        back, used = nf.from_bytes(nf.to_bytes(t))
        assert used == len(nf.to_bytes(t))
        assert back.bit_width == 5 and back.shared_exponent == -3
        np.testing.assert_array_equal(back.mantissas, t.mantissas)

    def test_sentinel_roundtrip(self):
        t = nf.zeros((2, 3), 8)
        back, _ = nf.from_bytes(nf.to_bytes(t))
        assert back.shared_exponent is None and back.shape == (2, 3)

    def test_file_roundtrip(self, tmp_path):
        t = nf.FxpTensor(np.int16([1, -127, 64]), 10, 8)
        nf.save(t, tmp_path / "t.dfxt")
        back = nf.load(tmp_path / "t.dfxt")
        np.testing.assert_array_equal(back.mantissas, t.mantissas)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            nf.from_bytes(b"NOPE" + bytes(20))

    def test_wide_tensor_rejected(self):
        t = nf.FxpTensor(np.int16([1000]), 0, 16)
        with pytest.raises(InvalidBitWidth):
            nf.to_bytes(t)


class TestGoldenVectors:
    def test_line_roundtrip(self):
        line = nf.format_golden_line(EXAMPLE_M24, 7, 43679, 23)
        assert nf.parse_golden_line(line) == (EXAMPLE_M24, 7, 43679, 23)

    def test_frozen_file(self, tmp_path):
        rng = np.random.default_rng(7)
        path = tmp_path / "golden.txt"
        cases = []
        with open(path, "w") as fh:
            fh.write("# m24_hex keep_bits draw_hex expected_hex\n")
            for _ in range(64):
                m = int(rng.integers(0, 1 << 24))
                keep = int(rng.integers(3, 9))
                drop = 24 - keep
                draw = int(rng.integers(0, 1 << drop))
                expected = (m >> drop) + (draw < (m & ((1 << drop) - 1)))
                cases.append((m, keep, draw, expected))
                fh.write(nf.format_golden_line(m, keep, draw, expected) + "\n")
        for m, keep, draw, expected in nf.load_golden_vectors(path):
            assert nf.stochastic_round(m, keep, draw) == expected
