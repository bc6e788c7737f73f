import math

import numpy as np
import pytest

from helpers import missed_gt_fixture, nms_chain
from mapgrad.core import Dataset, ImageRecord, ScoreTable
from mapgrad.evaluation import APVariant, EvalConfig, best_gt, evaluate_class
from mapgrad.nms import NmsConfig
from mapgrad.oracle import gradcheck, oracle_steps, prune_to_chain_free
from mapgrad.steps import ap_delta, find_steps, nms_aware_steps
from mapgrad.synth import SynthConfig, from_labels, generate, random_instance

V12 = APVariant.VOC2012_AREA


def steps_of(d, s, c=0, variant=V12):
    ev = evaluate_class(d, s.values[:, c], c, NmsConfig(), EvalConfig(ap_variant=variant))
    st = nms_aware_steps(ev, s.values[:, c], best_gt(d, c, 0.5), variant)
    return ev, st


def row(st, w):
    k = int(np.flatnonzero(st.windows == w)[0])
    return st.delta_plus[k], st.ap_plus[k], st.delta_minus[k], st.ap_minus[k]


def test_worked_fixture_steps():
    d, s = from_labels("TFT", [0.9, 0.8, 0.7])
    _, st = steps_of(d, s)
    assert st.current_ap == pytest.approx(5 / 6)
    dp, ap_p, dm, ap_m = row(st, 1)
    assert dp == pytest.approx(0.1) and ap_p == pytest.approx(2 / 3)
    assert dm == pytest.approx(0.1) and ap_m == pytest.approx(1.0)


def test_ap_delta_examples():
    assert ap_delta([True, False, True], 2, V12, 2, 1) == pytest.approx(2 / 3)
    assert ap_delta([True, False, True], 2, V12, 2, 3) == pytest.approx(1.0)
    assert ap_delta([True, False, True], 2, V12, 2, 2) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        ap_delta([True], 1, V12, 1, 2)


def test_single_tp_has_no_steps():
    d, s = from_labels("T")
    _, st = steps_of(d, s)
    assert not st.has_plus().any() and not st.has_minus().any()


def test_find_steps_ignores_suppressed():
    d, s = missed_gt_fixture()
    ev = evaluate_class(d, s.values[:, 0], 0, NmsConfig(), EvalConfig())
    assert len(find_steps(ev, s.values[:, 0], V12).windows) == len(ev.detections)


# Perturbations of FP scores along one ranked label sequence, six ground truths.
# ranks 1..6 = T F T F T T; two ground truths are never detected.
PERTURB = "TFTFTT"


def _perturb_case():
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    d, s = from_labels(PERTURB, scores, missed=2)
    return d, s, scores


def test_fp_perturb_a_small_move_keeps_ap():
    d, s, scores = _perturb_case()
    ev, st = steps_of(d, s)
    dp, _, _, _ = row(st, 3)
    assert dp > 0.05
    nudged = s.values.copy()
    nudged[3, 0] += 0.05
    assert evaluate_class(d, nudged[:, 0], 0, NmsConfig(), EvalConfig()).ap == ev.ap


def test_fp_perturb_b_fp_crossing_fp_no_step():
    d, s = from_labels("TFF", [0.9, 0.8, 0.7])
    ev, st = steps_of(d, s)
    dp, ap_p, _, _ = row(st, 2)
    # the nearest step skips the other FP and lies at the TP
    assert dp == pytest.approx(0.2) and ap_p < ev.ap


def test_fp_perturb_c_dominated_tp_no_step():
    d, s, scores = _perturb_case()
    # the FP at rank 4 passes the TP at rank 3 without changing the filled-in curve
    assert ap_delta([c == "T" for c in PERTURB], 6, V12, 4, 3) == pytest.approx(steps_of(d, s)[0].ap)


def test_fp_perturb_d_step_at_curve_tp():
    d, s, scores = _perturb_case()
    ev, st = steps_of(d, s)
    dp, ap_p, _, _ = row(st, 3)
    assert dp == pytest.approx(scores[0] - scores[3])
    assert ap_p < ev.ap


def test_fp_perturb_e_single_tp_crossing():
    d, s = from_labels("TTTFTT", [0.9, 0.8, 0.7, 0.6, 0.5, 0.4], missed=2)
    ev, st = steps_of(d, s)
    dp, ap_p, _, _ = row(st, 3)
    assert dp == pytest.approx(0.1) and ap_p < ev.ap
    # the third recall level drops from precision 1 to the later 5/6, over 7 ground truths
    assert ev.ap - ap_p == pytest.approx((1 - 5 / 6) / 7, abs=1e-12)


def test_missed_gt_rescue():
    d, s = missed_gt_fixture()
    ev, st = steps_of(d, s)
    assert ev.ap == pytest.approx(0.5)
    w_dp, w_ap, _, _ = row(st, 1)
    assert w_dp == pytest.approx(0.2) and w_ap > ev.ap
    _, _, d_dm, d_ap = row(st, 0)
    assert d_dm == pytest.approx(0.2) and d_ap > ev.ap
    for w in (0, 1):
        o = oracle_steps(w, 0, s, d)
        assert (o.right if w == 1 else o.left)[1] > ev.ap


def test_suppressed_background_gets_nothing():
    # w overlaps the TP t but no ground truth of its own
    im = ImageRecord("a", ("t", "w"), np.array([[0, 0, 10, 10], [4, 0, 14, 10]]), np.array([[0, 0, 10, 10]]), np.array([0]))
    d = Dataset((im,), 1)
    s = ScoreTable(np.array([[0.9], [0.5]]))
    _, st = steps_of(d, s)
    assert math.isnan(row(st, 1)[0]) and math.isnan(row(st, 1)[2])


@pytest.mark.parametrize("seed", range(3))
def test_chain_free_agreement(seed):
    rng = np.random.default_rng(seed)
    for _ in range(60):
        d, s = random_instance(rng, n_classes=2)
        d, s = prune_to_chain_free(d, s)
        if d.n_windows == 0:
            continue
        report = gradcheck(d, s, NmsConfig(), EvalConfig(ap_variant=rng.choice(["voc2007", "voc2012"])))
        assert report.passed, report.mismatches[:3]


def test_profile_counter_is_linear():
    d = generate(SynthConfig(n_images=30, seed=4))
    rng = np.random.default_rng(0)
    values = rng.normal(size=(d.n_windows, d.n_classes))
    for c in range(d.n_classes):
        ev = evaluate_class(d, values[:, c], c, NmsConfig(), EvalConfig())
        st = nms_aware_steps(ev, values[:, c], best_gt(d, c, 0.5), V12)
        assert 0 < st.profile_count <= 3 * d.n_windows


def test_nms_chain_is_recorded():
    d, s = nms_chain()
    report = gradcheck(d, s, NmsConfig(), EvalConfig())
    # disagreements on chained windows are documented, never failures
    assert report.passed
    assert all(not e.chain_free for e in report.chain_disagreements)
