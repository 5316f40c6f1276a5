import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layered_edit.decomposition import (
    RemovalSchedule,
    a_iou,
    aggregate_attention,
    conflict_mask,
    decompose,
    region_remove,
    removal_rate,
    range_warnings,
)
from layered_edit.grid import ParameterError, SeededRng
from layered_edit.schedule import NoiseSchedule

from .oracles import conflict_cells, random_panoptic, soft_iou


class TestAggregateAttention:
    def test_single_map_normalised(self, rng):
        m = rng.uniform(0, 0.3, size=(4, 4))
        np.testing.assert_allclose(aggregate_attention([m]), m / m.max(), rtol=1e-15)

    def test_constant_maps(self):
        out = aggregate_attention([np.full((3, 3), 0.2), np.full((3, 3), 0.2)])
        np.testing.assert_allclose(out, 1.0, rtol=1e-15)

    def test_two_map_loop_oracle(self):
        a = np.full((4, 4), 0.2)
        b = np.full((4, 4), 0.2)
        b[:2] = 0.6
        mean = np.zeros((4, 4))
        for r in range(4):
            for c in range(4):
                mean[r, c] = (a[r, c] + b[r, c]) / 2
        np.testing.assert_allclose(aggregate_attention([a, b]), mean / mean.max(), rtol=1e-15)
        np.testing.assert_allclose(aggregate_attention([a, b])[:2], 1.0)
        np.testing.assert_allclose(aggregate_attention([a, b])[2:], 0.5)

    def test_token_columns_averaged(self, rng):
        stack = rng.uniform(size=(3, 3, 4))
        out = aggregate_attention([stack], token_cols=[0, 2])
        want = (stack[..., 0] + stack[..., 2]) / 2
        np.testing.assert_allclose(out, want / want.max(), rtol=1e-14)

    def test_zero_maps(self):
        np.testing.assert_array_equal(aggregate_attention([np.zeros((2, 2))]), 0.0)

    def test_empty_list(self):
        with pytest.raises(ParameterError):
            aggregate_attention([])


class TestAIou:
    def test_identical_binary(self):
        m = np.zeros((5, 5))
        m[1:3] = 1
        assert a_iou(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        a[:2], b[2:] = 1, 1
        assert a_iou(a, b) == 0.0

    def test_half_inside(self):
        m = np.zeros((16, 16))
        m[:2] = 1  # 32 of 256 cells
        agg = 0.5 * m
        assert a_iou(agg, m) == pytest.approx(0.5, abs=1e-15)

    def test_degenerate(self):
        assert a_iou(np.zeros((3, 3)), np.zeros((3, 3)), with_flag=True) == (0.0, True)

    @given(arrays(np.float64, (5, 5), elements=st.sampled_from([0.0, 1.0])),
           arrays(np.float64, (5, 5), elements=st.sampled_from([0.0, 1.0])))
    @settings(max_examples=60, deadline=None)
    def test_symmetric_on_binary(self, a, b):
        assert a_iou(a, b) == a_iou(b, a)
        if a.any():
            assert a_iou(a, a) == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_soft_loop_oracle(self, seed):
        g = np.random.default_rng(seed)
        agg = g.uniform(size=(6, 6)) * (g.uniform(size=(6, 6)) > 0.4)
        m = (g.uniform(size=(6, 6)) > 0.5).astype(float)
        assert a_iou(agg, m) == pytest.approx(soft_iou(agg, m), abs=1e-12)


class TestConflictMask:
    def regions(self):
        pan = [np.zeros((6, 6)) for _ in range(3)]
        pan[0][:2], pan[1][2:4], pan[2][4:] = 1, 1, 1
        return pan

    def test_nothing_above_threshold(self):
        pan = self.regions()
        out = conflict_mask([0.1, 0.2, 0.3], 0.3, pan, pan[0])
        np.testing.assert_array_equal(out, 0.0)

    def test_own_region_excluded(self):
        pan = self.regions()
        out = conflict_mask([0.9, 0.0, 0.0], 0.3, pan, pan[0])
        np.testing.assert_array_equal(out, 0.0)

    def test_set_operations(self):
        pan = self.regions()
        out = conflict_mask([0.6, 0.2, 0.4], 0.3, pan, pan[0])
        np.testing.assert_array_equal(out, pan[2])

    def test_overlapping_panoptic_rejected(self):
        pan = self.regions()
        pan[1][1] = 1
        with pytest.raises(ParameterError):
            conflict_mask([0.5, 0.5, 0.5], 0.3, pan, np.zeros((6, 6)))

    @pytest.mark.parametrize("eta", [0.0, 1.0])
    def test_eta_bounds(self, eta):
        with pytest.raises(ParameterError):
            conflict_mask([0.5], eta, [np.ones((2, 2))], np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", range(10))
    def test_loop_oracle(self, seed):
        g = np.random.default_rng(seed)
        pan = random_panoptic(g, 7, 7, 4)
        m_o = (g.uniform(size=(7, 7)) > 0.7).astype(float)
        row = g.uniform(size=4)
        np.testing.assert_array_equal(conflict_mask(row, 0.3, pan, m_o), conflict_cells(row, 0.3, pan, m_o))

    def test_decompose_report(self, rng):
        pan = self.regions()
        agg = [pan[0] + 0.8 * pan[1], pan[2]]  # IoU with region 1 is 9.6 / 24 = 0.4
        report = decompose(agg, pan, [pan[0], pan[2]], 0.3)
        assert report.iou.shape == (2, 3)
        np.testing.assert_allclose(report.iou[0], [soft_iou(agg[0], p) for p in pan])
        np.testing.assert_array_equal(report.masks[0], pan[1])
        np.testing.assert_array_equal(report.masks[1], 0.0)


@st.composite
def conflict_cases(draw):
    h = draw(st.integers(2, 8))
    w = draw(st.integers(2, 8))
    k = draw(st.integers(1, 5))
    seed = draw(st.integers(0, 2**32 - 1))
    g = np.random.default_rng(seed)
    pan = random_panoptic(g, h, w, k)
    m_o = (g.uniform(size=(h, w)) > draw(st.floats(0.0, 1.0))).astype(float)
    row = g.uniform(size=k)
    eta = draw(st.floats(0.01, 0.99))
    return row, eta, pan, m_o


class TestConflictProperties:
    @given(conflict_cases())
    @settings(max_examples=200, deadline=None)
    def test_self_exclusion(self, case):
        row, eta, pan, m_o = case
        out = conflict_mask(row, eta, pan, m_o)
        assert not np.any((out > 0) & (m_o > 0))
        assert set(np.unique(out)) <= {0.0, 1.0}


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.scaled_linear()


class TestRemovalRate:
    def test_half_at_threshold(self, sched):
        assert removal_rate(20, sched, RemovalSchedule(5.0, 20)) == 0.5
        assert removal_rate(40, sched, RemovalSchedule(5.0, 40)) == 0.5

    def test_first_step_high(self, sched):
        assert removal_rate(1, sched, RemovalSchedule(5.0, 20)) > 0.95

    def test_strictly_decreasing(self, sched):
        for k in (3.0, 5.0):
            r = RemovalSchedule(k, 20).rates(sched)
            assert np.all(np.diff(r) < 0)
            assert np.all((r > 0) & (r < 1))

    def test_steep_rate_saturates_in_float64(self, sched):
        # at k=8 the first rate is 1 - 4e-18, which rounds to exactly 1.0
        r = RemovalSchedule(8.0, 20).rates(sched)
        assert r[0] == 1.0 and np.all(np.diff(r[1:]) < 0) and np.all(r > 0)

    def test_endpoint_limits(self, sched):
        for k in (3.0, 5.0, 8.0):
            r = RemovalSchedule(k, 20).rates(sched)
            assert r[0] > 0.9 and r[-1] < 0.1

    def test_closed_form(self, sched):
        from layered_edit.schedule import snr
        for j in (1, 7, 33, 50):
            x = 5.0 * (snr(sched.position(20), sched) / snr(sched.position(j), sched) - 1)
            assert removal_rate(j, sched, RemovalSchedule()) == pytest.approx(1 / (1 + np.exp(-x)), rel=1e-14)


class TestRegionRemove:
    def test_empty_mask(self, rng):
        f = rng.normal(size=(4, 4, 3))
        np.testing.assert_array_equal(region_remove(f, np.zeros((4, 4)), 0.7, SeededRng(0)), f)

    def test_full_rate(self, rng):
        f = rng.normal(size=(4, 4, 3))
        m = np.zeros((4, 4))
        m[1:3, 1:3] = 1
        out = region_remove(f, m, 1.0, SeededRng(0))
        np.testing.assert_array_equal(out[m == 1], 0.0)
        np.testing.assert_array_equal(out[m == 0], f[m == 0])
        np.testing.assert_array_equal(region_remove(out, m, 1.0, SeededRng(5)), out)

    def test_outside_untouched(self, rng):
        f = rng.normal(size=(8, 8, 2))
        m = np.zeros((8, 8))
        m[:4] = 1
        out = region_remove(f, m, 0.5, SeededRng(1))
        np.testing.assert_array_equal(out[4:], f[4:])

    def test_retained_fraction(self):
        f = np.ones((64, 64, 1))
        out = region_remove(f, np.ones((64, 64)), 0.5, SeededRng(8, (2,)))
        assert abs(out.mean() - 0.5) <= 3 * np.sqrt(0.25 / 4096)


class TestRangeWarnings:
    def test_defaults_clean(self):
        assert range_warnings(0.3, 5.0, 20, 40) == []

    def test_out_of_range(self):
        msgs = range_warnings(0.9, 10.0, 30, 20)
        assert len(msgs) == 4 and msgs[0].startswith("eta=0.9")

    def test_thresholds_scale_with_steps(self):
        assert range_warnings(0.3, 5.0, 4, 8, steps=10) == []
        assert range_warnings(0.3, 5.0, 20, 40, steps=10)
