import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morel.errors import InvalidInput
from morel.fhd import (DensifyConfig, accumulate_stats, assign_levels, grow_and_prune, level_weight,
                       levels_from_variance, rank_cutoff)
from morel.scene import init_anchor_space

from oracles import rank_level_counts


def _space_with_variances(var, seed=0):
    """Anchors whose feature vectors have exactly the requested variances."""
    k = len(var)
    pts = np.stack([np.arange(k) * 2.0 + 1.0, np.ones(k)], axis=1)
    sp = init_anchor_space(pts, 2.0, seed=seed, feature_dim=4)
    base = np.array([1.0, -1.0, 1.0, -1.0])  # variance 1
    sp.feature[:] = np.sqrt(np.asarray(var, dtype=np.float64))[:, None] * base
    return sp


def test_hundred_variances_split_60_30_10():
    sp = _space_with_variances(np.arange(1, 101))
    assign_levels(sp, 0.6, 0.9)
    assert np.bincount(sp.level, minlength=3).tolist() == [60, 30, 10]


def test_all_equal_variances_go_to_top_level():
    sp = _space_with_variances(np.full(10, 2.0))
    assign_levels(sp)
    assert np.all(sp.level == 2)


def test_too_few_anchors():
    with pytest.raises(InvalidInput):
        assign_levels(_space_with_variances([1.0, 2.0]))


def test_level_counts_match_sort_oracle_on_1000_multisets():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(3, 200))
        # small integer pools force plenty of ties
        var = rng.integers(0, int(rng.integers(2, 50)), size=n).astype(np.float64)
        q1 = float(rng.uniform(0.05, 0.9))
        q2 = float(rng.uniform(q1 + 0.01, 0.99))
        levels = levels_from_variance(var, rank_cutoff(var, q1), rank_cutoff(var, q2))
        got = tuple(int(c) for c in np.bincount(levels, minlength=3))
        assert got == rank_level_counts(var.tolist(), q1, q2), trial


def test_level_weight_cases():
    assert level_weight(0, 0, 100) == 1.0
    assert level_weight(0, 37, 100) == 1.0
    assert level_weight(1, 0, 100, (1.0, 0.5, 0.25)) == 0.5
    assert level_weight(2, 0, 100, (1.0, 0.5, 0.25)) == 0.25
    assert level_weight(2, 100, 100) == 1.0
    assert level_weight(1, 100, 100) == 1.0
    with pytest.raises(InvalidInput):
        level_weight(1, 5, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000), st.data())
def test_level_weight_monotone(total, data):
    j = data.draw(st.integers(0, total - 1))
    lams = (1.0, data.draw(st.floats(0.01, 1.0)), data.draw(st.floats(0.01, 1.0)))
    lams = (1.0, max(lams[1:]), min(lams[1:]))
    for level in (0, 1, 2):
        assert level_weight(level, j + 1, total, lams) >= level_weight(level, j, total, lams)
    assert level_weight(0, j, total, lams) >= level_weight(1, j, total, lams) >= level_weight(2, j, total, lams)
    assert 0.0 < level_weight(2, j, total, lams) <= 1.0


def _pair():
    sp = init_anchor_space(np.array([[2.0, 2.0], [10.0, 2.0]]), 4.0, n_offsets=2)
    sp.level[:] = [0, 2]
    return sp


def test_level_zero_accumulates_four_times_more_at_start():
    sp = _pair()
    g = np.zeros((2, 2, 2))
    g[:, :, 0] = 3e-4
    vis = np.ones((2, 2), bool)
    accumulate_stats(sp, g, vis, np.full((2, 2), 0.5), 0, 100)
    assert sp.accum_grad[0] == pytest.approx(4 * sp.accum_grad[1], rel=1e-12)
    sp.reset_stats()
    accumulate_stats(sp, g, vis, np.full((2, 2), 0.5), 100, 100)
    assert sp.accum_grad[0] == sp.accum_grad[1]


def test_invisible_anchor_is_untouched():
    sp = _pair()
    vis = np.array([[True, False], [False, False]])
    accumulate_stats(sp, np.ones((2, 2, 2)), vis, np.full((2, 2), 0.7), 3, 10)
    assert sp.accum_grad[1] == 0 and sp.accum_count[1] == 0 and sp.opacity_stat[1] == 0
    assert sp.accum_count[0] == 1 and sp.opacity_stat[0] == 0.7
    assert sp.accum_grad[0] == pytest.approx(np.sqrt(2.0))


def test_flat_mode_ignores_levels():
    sp = _pair()
    accumulate_stats(sp, np.ones((2, 2, 2)), np.ones((2, 2), bool), np.ones((2, 2)), 0, 10,
                     hierarchical=False)
    assert sp.accum_grad[0] == sp.accum_grad[1]


def test_zero_stats_change_nothing():
    sp = init_anchor_space(np.random.default_rng(0).uniform(0, 40, (60, 2)), 8.0)
    sp.level[:] = 0
    before = sp.position.copy()
    rep = grow_and_prune(sp, DensifyConfig(), np.random.default_rng(1))
    assert rep.grown == 0 and rep.pruned == 0
    np.testing.assert_array_equal(sp.position, before)


def test_one_hot_anchor_grows_into_two_cells():
    sp = init_anchor_space(np.array([[4.0, 4.0], [20.0, 20.0]]), 8.0, n_offsets=3)
    sp.level[:] = [1, 0]
    # slot 0 stays in its own cell, slots 1 and 2 reach two distinct empty cells
    sp.log_scaling[:] = 0.0
    sp.offsets[0] = [[0.5, 0.5], [8.0, 0.0], [0.0, 8.0]]
    sp.accum_grad[0], sp.accum_count[0] = 1.0, 10
    sp.slot_grad[0] = 1.0
    parent_feature = sp.feature[0].copy()
    rep = grow_and_prune(sp, DensifyConfig(), np.random.default_rng(2))
    assert rep.grown == 2 and len(sp) == 4
    cells = {tuple(c) for c in sp.cells()}
    assert len(cells) == 4 and {(1, 0), (0, 1)} <= cells
    np.testing.assert_array_equal(sp.level[2:], 1)
    assert np.abs(sp.feature[2:] - parent_feature).max() < 0.1
    assert np.all(np.isfinite(sp.feature)) and np.all(sp.accum_grad == 0)


def test_faint_seen_anchor_is_pruned():
    sp = init_anchor_space(np.array([[4.0, 4.0], [20.0, 20.0]]), 8.0)
    sp.accum_count[:] = 200
    sp.opacity_stat[:] = [0.001, 0.5]
    keep_pos = sp.position[1].copy()
    rep = grow_and_prune(sp, DensifyConfig(opacity_threshold=0.005), np.random.default_rng(0))
    assert rep.pruned == 1 and len(sp) == 1
    np.testing.assert_array_equal(sp.position[0], keep_pos)


def test_rarely_seen_faint_anchor_survives():
    sp = init_anchor_space(np.array([[4.0, 4.0], [20.0, 20.0]]), 8.0)
    sp.accum_count[:] = 10
    sp.opacity_stat[:] = 0.001
    assert grow_and_prune(sp, DensifyConfig(), np.random.default_rng(0)).pruned == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_grow_never_duplicates_cells(seed):
    rng = np.random.default_rng(seed)
    sp = init_anchor_space(rng.uniform(0, 64, (80, 2)), 8.0)
    sp.level[:] = rng.integers(0, 3, len(sp))
    sp.offsets[:] = rng.uniform(-1.5, 1.5, sp.offsets.shape)
    sp.accum_grad[:] = rng.uniform(0, 1e-2, len(sp))
    sp.accum_count[:] = rng.integers(0, 100, len(sp))
    sp.slot_grad[:] = rng.uniform(0, 1, sp.slot_grad.shape) * (rng.uniform(size=sp.slot_grad.shape) > 0.3)
    sp.opacity_stat[:] = rng.uniform(0, 0.02, len(sp))
    grow_and_prune(sp, DensifyConfig(), rng)
    cells = sp.cells()
    assert len({tuple(c) for c in cells}) == len(sp)
    for arr in sp.params().values():
        assert np.all(np.isfinite(arr))
