
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossing_attn.fusion import THRESHOLD, MaskTable, fuse, select_masks
from crossing_attn.pdv import IntersectionPDV, MotionPDV
from oracles import LITERAL_T, LITERAL_WS, literal_fuse, random_case

class TestMaskTables:
    def test_bit_for_bit(self):
        table = MaskTable()
        for c in range(3):
            assert list(table.w_s[c]) == LITERAL_WS[c]
            assert list(table.t[c]) == LITERAL_T[c]
        assert THRESHOLD == 0.9999 and table.threshold == 0.9999

    def test_json_roundtrip(self, tmp_path):
        MaskTable().save(tmp_path / "m.json")
        assert MaskTable.load(tmp_path / "m.json") == MaskTable()


class TestLiteralOracle:
    def test_randomized_cases(self):
        rng = np.random.default_rng(2024)
        pairs, sides, fallbacks = set(), set(), 0
        for _ in range(3000):
            pm, pt = random_case(rng)
            res = fuse(pm, pt)
            exp, applied, c_minus, c_plus, fb = literal_fuse(pm.p, pt.p)
            assert res.pdv.p.tolist() == exp
            assert (res.applied_t, res.c_minus, res.c_plus, res.fallback) == (applied, c_minus, c_plus, fb)
            pairs.add((c_minus, c_plus))
            sides.add(applied)
            fallbacks += fb
        assert pairs >= {(a, b) for a in range(3) for b in range(3) if a != b}
        assert sides == {True, False}
        assert fallbacks > 0


class TestExamples:
    def test_threshold_applies_t(self):
        res = fuse(MotionPDV([0.9999, 0.00005, 0.00005]), IntersectionPDV(np.full(7, 1 / 7)))
        assert res.applied_t
        # W_S(right) * T(straight) keeps classes 1, 5, 6, 7
        np.testing.assert_array_equal(res.pdv.p > 0, [1, 0, 0, 0, 1, 1, 1])
        np.testing.assert_allclose(res.pdv.p[[0, 4, 5, 6]], 0.25)

    def test_just_below_threshold(self):
        res = fuse(MotionPDV([0.99989, 0.00006, 0.00005]), IntersectionPDV(np.full(7, 1 / 7)))
        assert not res.applied_t
        assert res.c_minus == 2
        np.testing.assert_allclose(res.pdv.p, [1 / 6] * 2 + [0] + [1 / 6] * 4)

    def test_fallback_returns_tpv_unchanged(self):
        tpv = IntersectionPDV([0, 1, 0, 0, 0, 0, 0])
        res = fuse(MotionPDV([0.2, 0.1, 0.7]), tpv)
        assert res.fallback
        assert res.pdv.p.tolist() == tpv.p.tolist()

    def test_tie_breaks_to_lowest_index(self):
        w_s, t_row, c_minus, c_plus = select_masks(MotionPDV([0.4, 0.2, 0.4]))
        assert (c_minus, c_plus, t_row) == (1, 0, None)
        _, _, c_minus, _ = select_masks(MotionPDV([0.25, 0.25, 0.5]))
        assert c_minus == 0

    def test_rejects_bad_scores(self):
        with pytest.raises(ValueError):
            fuse(MotionPDV([1, 0, 0]), np.zeros(7))
        with pytest.raises(ValueError):
            fuse(MotionPDV([1, 0, 0]), np.ones(6))


class TestProperties:
    @given(st.lists(st.floats(0.001, 1), min_size=3, max_size=3),
           st.lists(st.floats(0.0, 1), min_size=7, max_size=7))
    @settings(max_examples=200, deadline=None)
    def test_output_valid_and_support_within_tpv(self, m, t):
        t = np.asarray(t)
        if t.sum() <= 0:
            t[0] = 1.0
        pm = MotionPDV(np.asarray(m) / np.sum(m))
        res = fuse(pm, t)
        assert abs(res.pdv.p.sum() - 1) < 1e-6
        assert np.all(res.pdv.p[t == 0] == 0)
        if not res.fallback:
            assert np.all(res.pdv.p[res.mask == 0] == 0)

    def test_scaling_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            pm, pt = random_case(rng)
            a = fuse(pm, pt.p).pdv.p
            b = fuse(pm, pt.p * rng.choice([0.5, 3.0, 1e-3])).pdv.p
            np.testing.assert_allclose(a, b, rtol=1e-15, atol=1e-300)


class TestWorkedExamples:
    def test_select_turn_left_least_likely(self):
        w_s, t_row, c_minus, c_plus = select_masks(MotionPDV([0.5, 0.3, 0.2]))
        assert w_s.tolist() == [1, 1, 0, 1, 1, 1, 1] and t_row is None and c_minus == 2

    def test_uniform_tie(self):
        _, t_row, c_minus, c_plus = select_masks(MotionPDV([1 / 3, 1 / 3, 1 / 3]))
        assert (c_minus, c_plus, t_row) == (0, 0, None)

    def test_uniform_tpv_single_zero(self):
        res = fuse(MotionPDV([0.5, 0.3, 0.2]), IntersectionPDV(np.full(7, 1 / 7)))
        np.testing.assert_allclose(res.pdv.p, [1 / 6, 1 / 6, 0, 1 / 6, 1 / 6, 1 / 6, 1 / 6], atol=1e-15)

    def test_confident_straight(self):
        res = fuse(MotionPDV([0.99995, 0.00003, 0.00002]), IntersectionPDV([0.4, 0.3, 0.05, 0.05, 0.1, 0.05, 0.05]))
        assert res.applied_t
        np.testing.assert_allclose(res.pdv.p, [0.4 / 0.6, 0, 0, 0, 0.1 / 0.6, 0.05 / 0.6, 0.05 / 0.6], atol=1e-15)

    def test_confident_right_keeps_class_two(self):
        res = fuse(MotionPDV([0.00001, 0.99998, 0.00001]), IntersectionPDV([0, 1, 0, 0, 0, 0, 0]))
        assert res.applied_t and not res.fallback
        assert res.pdv.p.tolist() == [0, 1, 0, 0, 0, 0, 0]
