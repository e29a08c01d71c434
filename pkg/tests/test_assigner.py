from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_cost_matrix
from oracles import brute_matching, cell3x3_count, min_cost_subset, scalar_bce, scalar_iou, corners
from simota_kit.assigner import (
    BACKGROUND,
    AssignerConfig,
    Assignment,
    CenterOutsideImage,
    CostMatrix,
    InfeasibleAssignment,
    TransportPlan,
    center_candidates,
    compare_simota_ot,
    cost_matrix,
    dynamic_k,
    hungarian,
    multi_positive_assign,
    one_to_one_assign,
    plan_to_assignment,
    simota_assign,
    simota_select,
    single_center_assign,
    sinkhorn_ot,
)
from simota_kit.geometry import BBox, LabeledBox
from simota_kit.gridhead import DecodedBatch, DecodedPrediction, FpnSpec, build_anchors

CELL = AssignerConfig(center_mode="cell3x3")


def gt(cx, cy, w=10.0, h=10.0, c=0):
    return LabeledBox(BBox(cx, cy, w, h), c)


# -- center prior ------------------------------------------------------------

def test_cell3x3_interior_single_level():
    anchors = build_anchors(FpnSpec.single_level(8, (64, 64)))
    mask = center_candidates(gt(28, 28), anchors, CELL)
    assert mask.sum() == 9
    cells = {(anchors[i].gx, anchors[i].gy) for i in np.flatnonzero(mask)}
    assert cells == {(x, y) for x in (2, 3, 4) for y in (2, 3, 4)}


def test_cell3x3_corner_cell():
    anchors = build_anchors(FpnSpec.single_level(8, (64, 64)))
    assert center_candidates(gt(3, 3), anchors, CELL).sum() == 4
    assert center_candidates(gt(61, 61), anchors, CELL).sum() == 4
    assert center_candidates(gt(30, 2), anchors, CELL).sum() == 6


def test_radius_mode_matches_distance_scan():
    anchors = build_anchors(FpnSpec(input_size=(64, 96)))
    cfg = AssignerConfig(center_mode="radius", center_radius=2.5)
    g = gt(36, 28)  # a stride-8 cell center
    mask = center_candidates(g, anchors, cfg)
    expect = [math.hypot((a.gx + 0.5) * a.stride - 36, (a.gy + 0.5) * a.stride - 28) < 2.5 * a.stride
              for a in anchors]
    assert mask.tolist() == expect
    lvl0 = anchors.level == 0
    assert mask[lvl0].sum() == sum(1 for dx in range(-3, 4) for dy in range(-3, 4)
                                   if math.hypot(dx * 8, dy * 8) < 20)


def test_center_outside_image_warns_and_is_empty():
    anchors = build_anchors(FpnSpec(input_size=(64, 64)))
    with pytest.warns(CenterOutsideImage):
        mask = center_candidates(gt(-3, 10), anchors, CELL)
    assert not mask.any()


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 128), st.floats(0, 96))
def test_cell3x3_counts_match_scan(cx, cy):
    spec = FpnSpec(input_size=(96, 128))
    anchors = build_anchors(spec)
    mask = center_candidates(gt(cx, cy), anchors, CELL)
    for lvl, s in enumerate(spec.strides):
        gh, gw = spec.grid_shape(lvl)
        assert mask[anchors.level == lvl].sum() == cell3x3_count(cx, cy, s, gw, gh)


# -- cost matrix -------------------------------------------------------------

def _batch(rng, anchors, c):
    raw = rng.normal(size=(len(anchors), 5 + c))
    return raw, DecodedBatch.from_raw(raw, anchors)


def test_cost_matrix_matches_scalar_recomputation():
    rng = np.random.default_rng(0)
    anchors = build_anchors(FpnSpec.single_level(8, (32, 40)))[:5]
    anchors = build_anchors(FpnSpec.single_level(8, (8, 40)))
    assert len(anchors) == 5
    cfg = AssignerConfig(lam=2.5, center_mode="radius", center_radius=2.5, offcenter_penalty=1e4)
    gts = [gt(10, 4, 12, 6, 1), gt(30, 5, 8, 9, 0)]
    _, batch = _batch(rng, anchors, 3)
    cm = cost_matrix(batch, gts, anchors, cfg)
    for i, g in enumerate(gts):
        for j, a in enumerate(anchors):
            joint = [math.sqrt(batch.cls_probs[j, c] * batch.obj_prob[j]) for c in range(3)]
            lcls = sum(scalar_bce(p, 1.0 if c == g.class_id else 0.0) for c, p in enumerate(joint))
            v = scalar_iou(g.box.corners(), corners(*batch.boxes[j]))
            lreg = -math.log(v + 1e-8)
            inside = math.hypot((a.gx + 0.5) * 8 - g.box.cx, (a.gy + 0.5) * 8 - g.box.cy) < 20
            expect = lcls + 2.5 * lreg + (0 if inside else 1e4)
            assert cm.cls_costs[i, j] == pytest.approx(lcls, rel=1e-9)
            assert cm.reg_costs[i, j] == pytest.approx(lreg, rel=1e-9, abs=1e-12)
            assert cm.ious[i, j] == pytest.approx(v, abs=1e-12)
            assert cm.costs[i, j] == pytest.approx(expect, rel=1e-9)
            assert cm.center_mask[i, j] == inside
        bg = sum(scalar_bce(p, 0.0) for p in joint)
    assert cm.bg_costs[-1] == pytest.approx(bg, rel=1e-9)


def test_cost_matrix_perfect_prediction_near_zero():
    anchors = build_anchors(FpnSpec.single_level(8, (32, 32)))
    g = gt(12, 12, 8, 8, 1)
    preds = []
    for a in anchors:
        box = g.box if (a.gx, a.gy) == (1, 1) else BBox(*a.center, 8, 8)
        preds.append(DecodedPrediction(box, 1 - 1e-12, (1e-12, 1 - 1e-12)))
    cm = cost_matrix(preds, [g], anchors, AssignerConfig())
    j = anchors.index_of(0, 1, 1)
    assert cm.reg_costs[0, j] < 1e-7
    assert cm.cls_costs[0, j] < 1e-5  # bce clamps probabilities at 1e-7
    assert cm.costs[0, j] < 1e-5


def test_cost_matrix_lambda_zero_ranks_like_cls():
    rng = np.random.default_rng(3)
    anchors = build_anchors(FpnSpec(input_size=(32, 32)))
    _, batch = _batch(rng, anchors, 2)
    cm = cost_matrix(batch, [gt(14, 15, 9, 7, 1)], anchors, AssignerConfig(lam=0.0))
    expect = cm.cls_costs + 1e5 * (~cm.center_mask)
    assert np.array_equal(np.argsort(cm.costs[0], kind="stable"), np.argsort(expect[0], kind="stable"))


def test_cost_matrix_empty_gts_and_nan():
    rng = np.random.default_rng(4)
    anchors = build_anchors(FpnSpec(input_size=(32, 32)))
    raw, batch = _batch(rng, anchors, 2)
    cm = cost_matrix(batch, [], anchors, AssignerConfig())
    assert cm.costs.shape == (0, len(anchors))
    raw[7, 4] = math.nan
    with pytest.raises(ValueError, match="anchor 7"):
        cost_matrix(DecodedBatch.from_raw(raw, anchors), [gt(5, 5)], anchors, AssignerConfig())


def test_cost_matrix_invariant_holds():
    rng = np.random.default_rng(5)
    anchors = build_anchors(FpnSpec(input_size=(64, 64)))
    _, batch = _batch(rng, anchors, 3)
    cm = cost_matrix(batch, [gt(20, 20, 30, 12, 2), gt(40, 50, 14, 14, 0)], anchors, AssignerConfig())
    assert np.all(np.isfinite(cm.costs))
    assert np.allclose(cm.costs, cm.cls_costs + cm.lam * cm.reg_costs + cm.offcenter_penalty * (~cm.center_mask),
                       rtol=0, atol=0)


# -- dynamic k ---------------------------------------------------------------

def test_dynamic_k_examples():
    cfg = AssignerConfig()
    assert dynamic_k(np.zeros((1, 12)), cfg, np.ones((1, 12), bool)).tolist() == [1]
    assert dynamic_k(np.full((1, 10), 0.5), cfg, np.ones((1, 10), bool)).tolist() == [5]
    ious = np.array([[0.9, 0.8, 0.1, 0.99]])
    mask = np.array([[True, True, True, False]])
    assert dynamic_k(ious, cfg, mask).tolist() == [2]


def test_dynamic_k_rounds_half_up_and_caps():
    cfg = AssignerConfig(q=10, k_cap=4)
    ious = np.array([[0.5, 0.5, 0.5, 0, 0], [1, 1, 1, 1, 1]])
    mask = np.ones((2, 5), bool)
    assert dynamic_k(ious, cfg, mask).tolist() == [2, 4]
    # capped by the candidate count
    assert dynamic_k(np.ones((1, 5)), AssignerConfig(), np.array([[1, 1, 0, 0, 0]], bool)).tolist() == [2]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 30), st.integers(1, 12))
def test_dynamic_k_scalar_oracle(seed, g, a, q):
    rng = np.random.default_rng(seed)
    ious = rng.uniform(0, 1, (g, a))
    mask = rng.uniform(size=(g, a)) < 0.6
    cfg = AssignerConfig(q=q, k_cap=10)
    ks = dynamic_k(ious, cfg, mask)
    for i in range(g):
        vals = sorted((ious[i, j] for j in range(a) if mask[i, j]), reverse=True)
        k = math.floor(sum(vals[:q]) + 0.5)
        assert ks[i] == max(1, min(k, 10, len(vals)))


# -- SimOTA ------------------------------------------------------------------

def test_simota_one_gt_k2_matches_enumeration():
    rng = np.random.default_rng(6)
    costs = rng.uniform(0, 1, (1, 15))
    mask = np.zeros((1, 15), bool)
    mask[0, 3:12] = True
    ious = np.zeros((1, 15))
    ious[0, 3:12] = [0.9, 0.7, 0.2, 0.1, 0.05, 0.05, 0.0, 0.0, 0.0]
    cm = CostMatrix.from_parts(costs, np.zeros((1, 15)), mask, ious, 3.0)
    res = simota_assign(cm, AssignerConfig())
    assert res.k_values == [2]
    assert set(res.per_gt_positives[0]) == min_cost_subset(costs[0], range(3, 12), 2)


def test_simota_disjoint_regions_are_separable():
    rng = np.random.default_rng(7)
    cm = random_cost_matrix(rng, 2, 20)
    cm.center_mask[0, 10:] = False
    cm.center_mask[1, :10] = False
    cm = CostMatrix.from_parts(cm.cls_costs, cm.reg_costs, cm.center_mask, cm.ious, cm.lam)
    res = simota_assign(cm, AssignerConfig())
    for i in range(2):
        alone = CostMatrix.from_parts(cm.cls_costs[i:i + 1], cm.reg_costs[i:i + 1], cm.center_mask[i:i + 1],
                                      cm.ious[i:i + 1], cm.lam)
        assert res.per_gt_positives[i] == simota_assign(alone, AssignerConfig()).per_gt_positives[0]


def test_simota_conflict_goes_to_cheaper_gt():
    mask = np.ones((2, 4), bool)
    ious = np.array([[0.6, 0.6, 0.0, 0.0], [0.0, 0.6, 0.6, 0.0]])  # k = 1 each
    cls = np.array([[5.0, 1.0, 9.0, 9.0], [9.0, 0.5, 2.0, 9.0]])
    cm = CostMatrix.from_parts(cls, np.zeros((2, 4)), mask, ious, 0.0)
    res = simota_assign(cm, AssignerConfig())
    assert res.diagnostics["pre_conflict"] == [[1], [1]]
    assert res.anchor_labels.tolist() == [BACKGROUND, 1, BACKGROUND, BACKGROUND]
    # the loser does not pick a replacement
    assert res.per_gt_positives == [[], [1]]
    assert res.diagnostics["conflicts"] == [{"anchor": 1, "claimants": [0, 1], "winner": 1}]


def test_simota_no_candidates_reported():
    cm = CostMatrix.from_parts(np.ones((2, 5)), np.ones((2, 5)), np.array([[0] * 5, [1] * 5], bool),
                               np.full((2, 5), 0.3), 3.0)
    res = simota_assign(cm, AssignerConfig())
    assert res.per_gt_positives[0] == []
    assert res.diagnostics["no_candidate_gts"] == [0]
    assert len(res.per_gt_positives[1]) == res.k_values[1] == 2


def test_simota_cost_scaling_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        cm = random_cost_matrix(rng, rng.integers(1, 6), rng.integers(5, 60))
        base = simota_assign(cm, AssignerConfig())
        for s in (0.25, 3.0, 17.0):
            scaled = CostMatrix.from_parts(cm.cls_costs * s, cm.reg_costs * s, cm.center_mask, cm.ious, cm.lam,
                                           cm.offcenter_penalty * s)
            assert simota_assign(scaled, AssignerConfig()).per_gt_positives == base.per_gt_positives


def test_simota_structure_random():
    rng = np.random.default_rng(9)
    for _ in range(300):
        g, a = int(rng.integers(0, 9)), int(rng.integers(1, 201))
        cm = random_cost_matrix(rng, g, a)
        res = simota_assign(cm, AssignerConfig())
        res.check()
        for i, pick in enumerate(res.diagnostics["pre_conflict"]):
            ncand = int(cm.center_mask[i].sum())
            assert len(pick) == (min(res.k_values[i], ncand))
            assert all(cm.center_mask[i, j] for j in res.per_gt_positives[i])


def test_simota_deterministic():
    rng = np.random.default_rng(10)
    cm = random_cost_matrix(rng, 5, 150)
    a, b = simota_assign(cm, AssignerConfig()), simota_assign(cm, AssignerConfig())
    assert a.to_json() == b.to_json()


def test_simota_select_ties_prefer_lower_anchor():
    cm = CostMatrix.from_parts(np.ones((1, 6)), np.zeros((1, 6)), np.ones((1, 6), bool), np.zeros((1, 6)), 3.0)
    assert simota_select(cm, [3])[0].tolist() == [0, 1, 2]


# -- Sinkhorn ----------------------------------------------------------------

def _plain_cm(costs, bg=None):
    g, a = costs.shape
    return CostMatrix(costs, costs, np.zeros_like(costs), np.ones((g, a), bool), np.zeros_like(costs),
                      bg if bg is not None else np.zeros(a))


def test_sinkhorn_dominant_cost_limit():
    masses = []
    for eps in (1.0, 0.3, 0.1, 0.03):
        # near-degenerate kernels converge sublinearly, so only the plan is checked here
        plan = sinkhorn_ot(_plain_cm(np.array([[0.0, 50.0]]), bg=np.array([0.0, 0.0])), [1], eps=eps)
        masses.append(plan.plan[0, 0])
    assert all(b >= a - 1e-12 for a, b in zip(masses, masses[1:]))
    assert masses[-1] > 0.999
    res = plan_to_assignment(sinkhorn_ot(_plain_cm(np.array([[0.0, 50.0]])), [1]))
    assert res.anchor_labels.tolist() == [0, BACKGROUND]


def test_sinkhorn_uniform_costs_give_uniform_rows():
    plan = sinkhorn_ot(_plain_cm(np.full((3, 12), 2.0), bg=np.full(12, 2.0)), [2, 3, 1])
    p = plan.plan
    for i, k in enumerate([2, 3, 1, 6]):
        assert np.allclose(p[i], k / 12, atol=1e-12)


def test_sinkhorn_marginals_random():
    rng = np.random.default_rng(11)
    for _ in range(20):
        cm = _plain_cm(rng.uniform(0, 1, (3, 20)), rng.uniform(0, 1, 20))
        k = rng.integers(1, 5, 3)
        plan = sinkhorn_ot(cm, k)
        assert plan.converged
        assert np.max(np.abs(plan.plan.sum(axis=1) - np.append(k, 20 - k.sum()))) < 1e-6
        assert np.max(np.abs(plan.plan.sum(axis=0) - 1)) < 1e-6
        assert np.all(plan.plan >= 0)
        hist = plan.violation_history
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_sinkhorn_non_convergence_flagged():
    rng = np.random.default_rng(12)
    plan = sinkhorn_ot(_plain_cm(rng.uniform(0, 10, (4, 30))), [3, 2, 4, 1], eps=0.01, max_iters=5)
    assert not plan.converged
    assert plan.iterations == 5
    assert plan.violation >= 1e-6


def test_sinkhorn_rejects_oversupply():
    with pytest.raises(InfeasibleAssignment):
        sinkhorn_ot(_plain_cm(np.zeros((2, 3))), [2, 2])
    with pytest.raises(ValueError):
        sinkhorn_ot(_plain_cm(np.zeros((1, 3))), [1], eps=0)


def test_sinkhorn_handles_huge_penalties():
    costs = np.array([[0.2, 1e5 + 0.1, 0.5, 1e5]])
    plan = sinkhorn_ot(_plain_cm(costs), [1])
    assert plan.converged
    assert np.all(np.isfinite(plan.plan))
    assert plan.plan[0, 1] < 1e-100 and plan.plan[0, 3] < 1e-100


def _plan(p, k):
    p = np.asarray(p, dtype=np.float64)
    return TransportPlan(p, np.append(k, p.shape[1] - sum(k)), np.ones(p.shape[1]), True, 0.0, 1)


def test_plan_to_assignment_tie_goes_to_lower_row():
    res = plan_to_assignment(_plan([[0.4, 0.1], [0.4, 0.1], [0.2, 0.8]], [1, 1]))
    assert res.anchor_labels.tolist() == [0, BACKGROUND]


def test_plan_to_assignment_matches_scan():
    rng = np.random.default_rng(13)
    for _ in range(50):
        cm = _plain_cm(rng.uniform(0, 1, (4, 25)), rng.uniform(0, 1, 25))
        plan = sinkhorn_ot(cm, [2, 3, 1, 2])
        res = plan_to_assignment(plan)
        for j in range(25):
            col = plan.plan[:, j]
            best = 0
            for r in range(1, len(col)):
                if col[r] > col[best]:
                    best = r
            assert res.anchor_labels[j] == (BACKGROUND if best == 4 else best)


def test_compare_single_gt_trivial_instance_agrees():
    costs = np.array([[0.1, 8.0, 9.0, 1e5 + 1.0, 7.5]])
    ious = np.array([[0.6, 0.1, 0.1, 0.0, 0.1]])
    mask = np.array([[True, True, True, False, True]])
    cm = CostMatrix(np.where(mask, costs, costs), costs, np.zeros((1, 5)), mask, ious, np.full(5, 0.5))
    rep = compare_simota_ot(cm, AssignerConfig())
    assert rep["k_values"] == [1]
    assert rep["agreement"] == 1.0
    assert isinstance(rep["sinkhorn"]["converged"], bool)
    assert rep["ot_labels"] == rep["simota_labels"]
    assert set(rep["wall_time"]) == {"simota", "sinkhorn"}


# -- one-to-one --------------------------------------------------------------

def test_hungarian_examples():
    assert hungarian(np.array([[1.0, 2.0], [2.0, 1.0]])).tolist() == [0, 1]
    padded = np.array([[1.0, 2.0, 9.0], [2.0, 1.0, 9.0]])
    cm = _plain_cm(padded)
    res = one_to_one_assign(cm)
    assert res.diagnostics["matching"] == [0, 1]
    assert res.diagnostics["total_cost"] == 2.0
    assert res.k_values == [1, 1]


def test_one_gt_takes_global_min():
    rng = np.random.default_rng(14)
    c = rng.uniform(0, 1, (1, 30))
    assert one_to_one_assign(_plain_cm(c)).per_gt_positives == [[int(np.argmin(c))]]


def test_hungarian_infeasible():
    with pytest.raises(InfeasibleAssignment):
        one_to_one_assign(_plain_cm(np.zeros((3, 2))))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(15)
    for _ in range(200):
        g = int(rng.integers(1, 6))
        a = int(rng.integers(g, 9))
        c = rng.uniform(0, 10, (g, a))
        if rng.uniform() < 0.3:
            c = np.round(c)  # plenty of ties
        match = hungarian(c)
        assert len(set(match.tolist())) == g
        assert c[np.arange(g), match].sum() == pytest.approx(brute_matching(c), abs=1e-9)


def test_hungarian_beats_sampled_permutations():
    rng = np.random.default_rng(16)
    c = rng.uniform(0, 1, (8, 40))
    best = c[np.arange(8), hungarian(c)].sum()
    for _ in range(2000):
        cols = rng.permutation(40)[:8]
        assert best <= c[np.arange(8), cols].sum() + 1e-12


def test_hungarian_agrees_with_scipy():
    from scipy.optimize import linear_sum_assignment

    rng = np.random.default_rng(17)
    for _ in range(50):
        c = rng.uniform(0, 1, (int(rng.integers(1, 20)), 40))
        r, cols = linear_sum_assignment(c)
        assert c[np.arange(len(c)), hungarian(c)].sum() == pytest.approx(c[r, cols].sum(), abs=1e-9)


# -- hand-crafted baselines --------------------------------------------------

def test_single_center_one_positive_each():
    spec = FpnSpec(input_size=(128, 128))
    anchors = build_anchors(spec)
    rng = np.random.default_rng(18)
    for _ in range(100):
        g = gt(*rng.uniform(1, 127, 2), *rng.uniform(2, 200, 2))
        res = single_center_assign([g], anchors, spec)
        assert res.num_fg == 1


def test_single_center_floor_rule_and_translation():
    spec = FpnSpec(input_size=(64, 64))
    anchors = build_anchors(spec)
    res = single_center_assign([gt(16.0, 24.0)], anchors, spec)
    j = res.per_gt_positives[0][0]
    # a center exactly on a cell edge belongs to the cell starting at that edge
    assert (anchors[j].gx, anchors[j].gy) == (2, 3)
    moved = single_center_assign([gt(16.0 + 8, 24.0)], anchors, spec).per_gt_positives[0][0]
    assert (anchors[moved].gx, anchors[moved].gy) == (3, 3)


def test_single_center_uses_scale_level():
    spec = FpnSpec(input_size=(128, 128))
    anchors = build_anchors(spec)
    res = single_center_assign([gt(60, 60, 100, 20)], anchors, spec)
    a = anchors[res.per_gt_positives[0][0]]
    assert (a.level, a.gx, a.gy) == (1, 3, 3)


def test_single_center_collision_diagnosed():
    spec = FpnSpec(input_size=(64, 64))
    anchors = build_anchors(spec)
    res = single_center_assign([gt(20, 20), gt(21, 22)], anchors, spec)
    assert res.per_gt_positives[1] == []
    assert res.diagnostics["collisions"][0]["lost"] == 1


def test_multi_positive_has_more_positives():
    spec = FpnSpec(input_size=(128, 128))
    anchors = build_anchors(spec)
    gts = [gt(30, 40, 20, 20), gt(90, 80, 70, 50), gt(64, 64, 140, 100)]
    single = single_center_assign(gts, anchors, spec)
    multi = multi_positive_assign(gts, anchors, spec)
    assert multi.num_fg > single.num_fg
    assert set(np.flatnonzero(single.fg_mask)) <= set(np.flatnonzero(multi.fg_mask))
    multi.check(enforce_k=True)


def test_assignment_json_round_trip_shape():
    a = Assignment.from_labels(np.array([-1, 0, 1, 0]), [2, 1])
    assert a.per_gt_positives == [[1, 3], [2]]
    assert a.to_json()["num_fg"] == 3
