import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frp.errors import ConfigError
from frp.geometry import BoundingBox
from frp.refinement import (FrpThresholds, Proposal, SfrpScores, assign_by_iou, cfrp_filter, nms,
                            nms_indices, sfrp_decide, tfrp_refine, tfrp_training_set)

from conftest import ConstantScorer, TableScorer, boxes
from oracles import random_instance, ref_nms, ref_tfrp_pipeline

IMAGE = np.zeros((100, 100, 1))


def P(*coords, obj=0.5):
    return Proposal(BoundingBox(*coords), obj)


def scored(scores):
    props = [P(i, 0, i + 1, 1) for i in range(len(scores))]
    return props, TableScorer({p.box.as_tuple(): s for p, s in zip(props, scores)})


# --- types ----------------------------------------------------------------------

def test_threshold_defaults():
    t = FrpThresholds()
    assert (t.eps_iou, t.eps_t, t.eps_c, t.eps, t.eps_s) == (0.5, 0.5, 0.3, 0.5, 0.1)


@pytest.mark.parametrize("field", ["eps_iou", "eps_t", "eps_c", "eps", "eps_s"])
def test_thresholds_outside_unit_interval_rejected(field):
    with pytest.raises(ConfigError):
        FrpThresholds(**{field: 1.5})


def test_sfrp_scores_validated():
    with pytest.raises(ConfigError):
        SfrpScores(0.5, 1.2, 0.1)


def test_objectness_validated():
    with pytest.raises(ConfigError):
        P(0, 0, 1, 1, obj=-0.1)


# --- assignment -------------------------------------------------------------------

def test_identical_proposal_is_positive():
    g = BoundingBox(0, 0, 10, 10)
    res = assign_by_iou([Proposal(g)], [g], 0.5)
    assert res.positives == [Proposal(g)] and res.negatives == []


def test_no_gts_all_negative():
    props = [P(0, 0, 1, 1), P(2, 2, 3, 3)]
    res = assign_by_iou(props, [], 0.5)
    assert res.negatives == props and res.best_iou == [0.0, 0.0]


def test_one_third_overlap_is_negative():
    res = assign_by_iou([P(5, 0, 15, 10)], [BoundingBox(0, 0, 10, 10)], 0.5)
    assert res.positives == []
    assert res.best_iou[0] == pytest.approx(1 / 3)


def test_assign_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        assign_by_iou([], [], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_assignment_partitions_input(seed, eps_iou):
    props, gts, _, _ = random_instance(np.random.default_rng(seed))
    res = assign_by_iou(props, gts, eps_iou)
    assert sorted(res.positive_index + res.negative_index) == list(range(len(props)))
    assert all(res.best_iou[i] >= eps_iou for i in res.positive_index)
    assert all(res.best_iou[i] < eps_iou for i in res.negative_index)


# --- negative reselection ----------------------------------------------------------

def test_tfrp_keeps_low_scores_only():
    props, scorer = scored([0.9, 0.3, 0.6])
    assert tfrp_refine(props, scorer, IMAGE, 0.5) == [props[1]]


def test_tfrp_threshold_one_keeps_all():
    props, scorer = scored([0.0, 0.999999, 0.5])
    assert tfrp_refine(props, scorer, IMAGE, 1.0) == props


def test_tfrp_constant_zero_is_identity():
    props, _ = scored([0.1] * 4)
    assert tfrp_refine(props, ConstantScorer(0.0), IMAGE, 0.5) == props


def test_tfrp_keeps_unscored_with_warning(caplog):
    props, _ = scored([0, 0])
    scorer = lambda img, bs: np.array([np.nan, 0.9])  # noqa: E731
    with caplog.at_level(logging.WARNING):
        assert tfrp_refine(props, scorer, IMAGE, 0.5) == [props[0]]
    assert "could not be scored" in caplog.text


def test_tfrp_empty_input_does_not_call_scorer():
    scorer = TableScorer({})
    assert tfrp_refine([], scorer, IMAGE, 0.5) == []
    assert scorer.calls == 0


def test_training_set_union():
    pos = [P(i, 0, i + 1, 1) for i in range(3)]
    neg = [P(i, 5, i + 1, 6) for i in range(5)]
    tr = tfrp_training_set(pos, neg)
    assert len(tr) == 8 and sum(lab for _, lab in tr) == 3
    assert tfrp_training_set(pos, []) == [(p, 1) for p in pos]


def test_training_set_rejects_overlap():
    p = P(0, 0, 1, 1)
    with pytest.raises(ValueError):
        tfrp_training_set([p], [p])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tfrp_pipeline_matches_oracle(seed):
    props, gts, table, scorer = random_instance(np.random.default_rng(seed))
    res = assign_by_iou(props, gts, 0.5)
    got = tfrp_training_set(res.positives, tfrp_refine(res.negatives, scorer, IMAGE, 0.5))
    assert got == ref_tfrp_pipeline(props, gts, table, 0.5, 0.5)


# --- classifier filter ---------------------------------------------------------------

def test_cfrp_zero_threshold_keeps_all():
    props, scorer = scored([0.0, 0.2, 1.0])
    assert cfrp_filter(props, scorer, IMAGE, 0.0) == props


def test_cfrp_example():
    props, scorer = scored([0.1, 0.6, 0.7])
    assert cfrp_filter(props, scorer, IMAGE, 0.5) == props[1:]


def test_cfrp_preserves_order():
    props, scorer = scored([0.9, 0.2, 0.8, 0.95])
    assert cfrp_filter(props, scorer, IMAGE, 0.5) == [props[0], props[2], props[3]]


def test_cfrp_monotone_sweep():
    props, gts, table, scorer = random_instance(np.random.default_rng(3))
    sizes = [len(cfrp_filter(props, scorer, IMAGE, t)) for t in np.linspace(0, 1, 21)]
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))


def test_scorer_wrong_length_rejected():
    props, _ = scored([0.1, 0.2])
    with pytest.raises(ConfigError):
        cfrp_filter(props, lambda img, bs: np.zeros(1), IMAGE, 0.5)


# --- split gate ------------------------------------------------------------------------

def test_sfrp_examples():
    assert not sfrp_decide(SfrpScores(0.9, 0.8, 0.05), 0.5, 0.1)
    assert sfrp_decide(SfrpScores(0.9, 0.8, 0.7), 0.5, 0.1)


unit = st.floats(0.0, 1.0)


@given(unit, unit, unit, unit)
def test_sfrp_zero_half_threshold_reduces_to_whole(w, left, right, eps):
    assert sfrp_decide(SfrpScores(w, left, right), eps, 0.0) == (w >= eps)


@given(unit, unit, unit, unit, unit, unit)
def test_sfrp_monotone_in_scores(w, left, right, bump, eps, eps_s):
    base = sfrp_decide(SfrpScores(w, left, right), eps, eps_s)
    raised = [SfrpScores(min(w + bump, 1.0), left, right),
              SfrpScores(w, min(left + bump, 1.0), right),
              SfrpScores(w, left, min(right + bump, 1.0))]
    if base:
        assert all(sfrp_decide(s, eps, eps_s) for s in raised)


# --- NMS -----------------------------------------------------------------------------------

def test_nms_identical_boxes():
    b = BoundingBox(0, 0, 10, 10)
    assert nms([(b, 0.8), (b, 0.9)], 0.5) == [(b, 0.9)]


def test_nms_disjoint_all_kept():
    dets = [(BoundingBox(i * 10, 0, i * 10 + 5, 5), 0.1 * i) for i in range(5)]
    assert sorted(nms(dets, 0.5), key=lambda d: d[1]) == dets


def test_nms_tie_prefers_smaller_area_then_index():
    small = BoundingBox(0, 0, 10, 10)
    big = BoundingBox(0, 0, 10, 12)
    assert nms([(big, 0.9), (small, 0.9)], 0.5) == [(small, 0.9)]
    twin = BoundingBox(0, 0, 10, 10)
    assert nms_indices(np.array([twin.as_tuple(), small.as_tuple()]), np.array([0.5, 0.5]),
                       0.5).tolist() == [0]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        nms([], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(boxes(), st.sampled_from([0.1, 0.5, 0.9]) | unit), max_size=20),
       st.floats(0.05, 0.95))
def test_nms_matches_oracle_and_is_idempotent(dets, thresh):
    out = nms(dets, thresh)
    assert out == ref_nms(dets, thresh)
    assert nms(out, thresh) == out
