from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import b21_columns, decision_region_ber, hand_terms_16_4, ordered_h, orient
from risnoma.constellation import (
    BerExpression,
    DegenerateConstellationError,
    algorithm1_coefficients,
    bit_terms,
    build_superimposed,
    column_terms,
    conditional_ber,
    detect,
    detect_index,
    expressions_from_json,
    expressions_to_json,
    extract_ber_terms,
    gray,
    raw_user_terms,
)

GOLDEN = Path(__file__).parent / "data" / "golden_4_2.json"
ORACLE_BITS = [[2, 2], [4, 2], [4, 4], [2, 2, 2], [4, 2, 2]]


def Q(x):
    return stats.norm.sf(x)


def as_map(expr: BerExpression):
    return {t.a: t.c for t in expr.terms}


def valid_h(bits, rng):
    return ordered_h(bits, rng)


class TestBuild:
    def test_single_user_bpsk(self):
        spec = build_superimposed([2], [1.0])
        assert spec.levels.tolist() == [-1.0, 1.0]
        assert spec.thresholds.tolist() == [0.0]

    def test_two_bpsk_users_uniform(self):
        spec = build_superimposed([2, 2], [2.0, 1.0])
        assert spec.levels.tolist() == [-3.0, -1.0, 1.0, 3.0]
        assert spec.thresholds.tolist() == [-2.0, 0.0, 2.0]

    def test_16_4_thresholds_symbolic(self):
        spec = build_superimposed([4, 2])
        # thresholds as rows over (h1, h2): 0, +-h1, +-2h1, +-3h1
        assert {tuple(r) for r in spec.threshold_rows} == {(0, 0), (1, 0), (-1, 0), (2, 0), (-2, 0), (3, 0), (-3, 0)}
        levels = {tuple(r) for r in spec.amplitudes}
        for delta in [(1, -1), (1, 1), (3, -1), (3, 1)]:
            assert delta in levels

    def test_counts_and_symmetry(self):
        for bits in ORACLE_BITS + [[6, 4, 4]]:
            spec = build_superimposed(bits)
            assert spec.n_levels == np.prod([2 ** (b // 2) for b in bits])
            assert len(spec.thresholds) == spec.n_levels - 1
            assert np.all(np.diff(spec.levels) > 0)
            np.testing.assert_allclose(spec.thresholds, -spec.thresholds[::-1])

    def test_overlap_is_rejected(self):
        with pytest.raises(DegenerateConstellationError):
            build_superimposed([2, 2], [1.0, 1.0])

    @pytest.mark.parametrize("bits", [[3], [4, 1], [0]])
    def test_odd_bits_rejected(self, bits):
        with pytest.raises(ValueError):
            build_superimposed(bits)

    def test_per_user_gray_steps(self):
        # between adjacent levels each user's sub-label moves by at most one bit
        for bits in ORACLE_BITS:
            spec = build_superimposed(bits)
            for k in range(spec.K):
                lab = spec.labels(k)
                flips = [bin(int(x)).count("1") for x in lab[1:] ^ lab[:-1]]
                assert max(flips) <= 1

    def test_gray_sequence(self):
        assert gray(np.arange(8)).tolist() == [0, 1, 3, 2, 6, 7, 5, 4]


class TestGolden:
    def test_b11_terms(self):
        expr = bit_terms([4, 2], 0, 0)
        assert as_map(expr) == {(1, -1): Fraction(1, 4), (1, 1): Fraction(1, 4),
                                (3, -1): Fraction(1, 4), (3, 1): Fraction(1, 4)}

    def test_b21_columns_seven_terms(self):
        spec = build_superimposed([4, 2])
        expected = b21_columns()
        got = {f"C{m + 1}": column_terms(spec, 1, 0, m) for m in (0, 2, 4, 6)}
        for name, terms in expected.items():
            assert [(s, tuple(r)) for s, r in got[name]] == terms
            assert [s for s, _ in got[name]] == [1, -1, 1, -1, 1, -1, 1]

    def test_user2_matches_merged_columns(self):
        raw = [(Fraction(s, 4), row) for terms in b21_columns().values() for s, row in terms]
        merged, const = orient(raw, [2.0, 1.0])
        assert const == 0
        assert as_map(extract_ber_terms([4, 2])[1]) == merged

    def test_user1_matches_hand_built(self):
        # b_11 (four delta terms) and b_12 from its four columns, averaged
        assert as_map(extract_ber_terms([4, 2])[0]) == hand_terms_16_4()[0]

    def test_golden_file(self):
        assert expressions_to_json(extract_ber_terms([4, 2])) == GOLDEN.read_text().rstrip("\n")
        back = expressions_from_json(GOLDEN.read_text())
        assert back == extract_ber_terms([4, 2])

    def test_single_user_cases(self):
        assert as_map(extract_ber_terms([2])[0]) == {(1,): Fraction(1)}
        assert as_map(extract_ber_terms([4])[0]) == {(1,): Fraction(3, 4), (3,): Fraction(1, 2), (5,): Fraction(-1, 4)}


class TestConditionalBer:
    def test_qpsk(self):
        (expr,) = extract_ber_terms([2])
        assert conditional_ber(expr, [1.0], 1.0) == pytest.approx(0.158655253931457, abs=1e-14)

    def test_hand_coded_16_4(self):
        h1, h2, s = 1.0, 0.3, 0.5
        d1, d2, d3, d4 = h1 - h2, h1 + h2, 3 * h1 - h2, 3 * h1 + h2
        l1, l2, l3 = h1, 2 * h1, 3 * h1
        b11 = 0.25 * sum(Q(d / s) for d in (d1, d2, d3, d4))
        b12 = 0.0
        for m, dm in zip((1, 2, 3, 4), (d4, d3, d2, d1)):
            sg = (-1) ** -(-m // 2)
            b12 += sg * Q((l2 - sg * dm) / s) + Q((sg * l2 + dm) / s)
        b12 /= 4
        col = lambda d: (Q((-l3 + d) / s) - Q((-l2 + d) / s) + Q((-l1 + d) / s) - Q(d / s)
                         + Q((l1 + d) / s) - Q((l2 + d) / s) + Q((l3 + d) / s))
        u2 = 0.25 * (col(d4) + col(d2) + col(-d1) + col(-d3))
        e1, e2 = extract_ber_terms([4, 2])
        assert conditional_ber(e1, [h1, h2], s) == pytest.approx(0.5 * (b11 + b12), abs=1e-14)
        assert conditional_ber(e2, [h1, h2], s) == pytest.approx(u2, abs=1e-14)

    @pytest.mark.parametrize("bits", ORACLE_BITS)
    def test_decision_region_oracle(self, bits):
        rng = np.random.default_rng(sum(bits) * 31 + len(bits))
        exprs = extract_ber_terms(bits)
        for _ in range(100):
            h = valid_h(bits, rng)
            sigma = rng.uniform(0.2, 2.0)
            got = np.array([conditional_ber(e, h, sigma) for e in exprs])
            np.testing.assert_allclose(got, decision_region_ber(bits, h, sigma), rtol=0, atol=1e-12)

    def test_large_channels_vanish(self):
        for e in extract_ber_terms([4, 2]):
            assert conditional_ber(e, [2000.0, 1000.0], 1.0) == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(ORACLE_BITS), st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
    def test_bounds(self, bits, seed, sigma):
        h = valid_h(bits, np.random.default_rng(seed))
        for e in extract_ber_terms(bits):
            v = conditional_ber(e, h, sigma)
            assert 0.0 <= v <= 1.0

    def test_bounds_bulk(self):
        rng = np.random.default_rng(7)
        bits = [4, 2, 2]
        spec = build_superimposed(bits)
        H = rng.uniform(0.05, 4, (200000, 3))
        H = H[np.all(np.diff(H @ spec.amplitudes.T, axis=1) > 0, axis=1)][:10000]
        assert len(H) == 10000
        for e in extract_ber_terms(bits):
            v = conditional_ber(e, H, 0.7)
            assert v.min() >= 0.0 and v.max() <= 1.0


class TestAlgorithm1:
    @pytest.mark.parametrize("bits", ORACLE_BITS + [[2], [4], [6, 4], [6, 4, 4]])
    @pytest.mark.parametrize("eps", [0.1, 0.01])
    def test_matches_symbolic_rows(self, bits, eps):
        spec = build_superimposed(bits)
        for k, A in enumerate(algorithm1_coefficients(bits, epsilon=eps)):
            rows = np.array([row for _, row in raw_user_terms(spec, k)], dtype=float)
            np.testing.assert_allclose(A, rows, atol=1e-6)
            assert np.array_equal(np.round(A), rows)

    def test_b11_rows(self):
        A = algorithm1_coefficients([4, 2], rho=[4.0, 1.0])[0]
        assert {tuple(r) for r in np.round(A[:8]).astype(int)} >= {(1, -1), (1, 1), (3, -1), (3, 1)}

    def test_single(self):
        (A,) = algorithm1_coefficients([2], rho=[1.0])
        assert set(np.round(A).ravel().tolist()) == {1.0}


class TestDetect:
    def test_noiseless_roundtrip_16_4(self):
        spec = build_superimposed([4, 2])
        h = np.array([10.0, 3.0])
        for i1 in range(4):
            for q1 in range(4):
                for i2 in range(2):
                    for q2 in range(2):
                        x1 = complex(2 * i1 - 3, 2 * q1 - 3)
                        x2 = complex(2 * i2 - 1, 2 * q2 - 1)
                        b1, b2 = detect(h[0] * x1 + h[1] * x2, h, spec)
                        assert b1.tolist() == [(gray(i1) >> 1) & 1, gray(i1) & 1, (gray(q1) >> 1) & 1, gray(q1) & 1]
                        assert b2.tolist() == [gray(i2), gray(q2)]

    def test_tie_goes_low(self):
        spec = build_superimposed([4, 2])
        h = np.array([1.0, 0.3])
        t = spec.thresholds_at(h)
        m = int(np.flatnonzero(np.all(spec.threshold_rows == [1, 0], axis=1))[0])
        assert detect_index(np.array([t[m]]), h, spec)[0] == m

    def test_nearest_level_near_delta2(self):
        spec = build_superimposed([4, 2])
        h = np.array([1.0, 0.3])
        y = (h[0] + h[1]) + 0.01
        m = detect_index(np.array([y]), h, spec)[0]
        levels = spec.levels_at(h)
        assert m == np.argmin(np.abs(levels - y))
        assert tuple(spec.amplitudes[m]) == (1, 1)

    def test_batch_shapes(self):
        spec = build_superimposed([4, 2])
        H = np.array([[10.0, 3.0], [9.0, 4.0]])
        Y = np.zeros((2, 5))
        assert detect_index(Y, H, spec).shape == (2, 5)
