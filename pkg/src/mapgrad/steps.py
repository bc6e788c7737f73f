"""Nearest AP steps for every window score of one class.

For each score, holding all other scores fixed, we find the nearest score on
either side at which AP (after NMS) changes, and the AP value beyond it.

Post-NMS detections are handled by two passes over the ranked list (descending
for score increases, ascending for decreases). AP only changes when a detection
crosses one of the other kind, so the candidate crossings are the true
positives (for a false positive) or false positives (for a true positive).
Along those candidates AP is monotone, which lets each search bisect. Every
candidate is evaluated by rebuilding only the true-positive rank list, so one
evaluation costs O(#TP). False positives sharing a gap between two true
positives behave identically and share one search.

A detection may change label while it moves: a false positive mapped to an
already-claimed ground truth takes over the claim once it passes the claimer,
and a true positive hands its claim to the runner-up once it drops below it.

Suppressed windows are handled in a third pass under two approximations:
suppression cascades are ignored, and a suppressed window is assumed to cover
the same ground truth as its suppressor. A suppressed window inherits its
suppressor's upward step; one covering a ground truth that no detection found
instead gets a step at its suppressor's score (it would replace the suppressor
as a new true positive), and the suppressor gets the matching downward step.
A detection cannot usefully drop below the windows it suppresses, since the top
one would take its place, so its ordinary downward search stops there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .evaluation import APVariant, ClassEvaluation
from .nms import class_order

__all__ = ["ScoreSteps", "find_steps", "nms_aware_steps", "ap_delta", "steps_for_class"]


# ---------------------------------------------------------------------------
# numba kernels

# float AP of two rankings with equal exact AP may differ in the last bits
_TOL = 1e-12


@njit(cache=True, nogil=True)
def _ap_from_positions(pos, mm, n_gt, voc07, env):
    """AP from sorted 0-based TP positions ``pos[:mm]``."""
    best = 0.0
    total = 0.0
    for k in range(mm - 1, -1, -1):
        p = (k + 1) / (pos[k] + 1.0)
        if p > best:
            best = p
        env[k] = best
        total += best
    if not voc07:
        return total / n_gt
    total = 0.0
    for i in range(11):
        k = (i * n_gt + 9) // 10
        if k < 1:
            k = 1
        if k <= mm:
            total += env[k - 1]
    return total / 11.0


@njit(cache=True, nogil=True)
def _eval_move(tp_pos, m, rem, rem_is_tp, flip_on, flip_off, q, ins_tp, n_gt, voc07, buf, env):
    """AP after a local edit of the ranked label sequence.

    The element at old position ``rem`` is removed (``-1``: none), the element at
    ``flip_on`` becomes a TP and the one at ``flip_off`` stops being one, then a
    new element is inserted at final position ``q`` (``-1``: none) as a TP when
    ``ins_tp``.
    """
    mm = 0
    inserted = not (q >= 0 and ins_tp)
    j = 0
    pending = flip_on
    while j < m or pending >= 0:
        if pending >= 0 and (j >= m or pending < tp_pos[j]):
            o = pending
            pending = -1
        else:
            o = tp_pos[j]
            j += 1
            if o == flip_off or (o == rem and rem_is_tp):
                continue
        if rem >= 0 and o > rem:
            o -= 1
        if q >= 0 and o >= q:
            o += 1
        if not inserted and o > q:
            buf[mm] = q
            mm += 1
            inserted = True
        buf[mm] = o
        mm += 1
    if not inserted:
        buf[mm] = q
        mm += 1
    return _ap_from_positions(buf, mm, n_gt, voc07, env)


@njit(cache=True, nogil=True)
def _search(cand, qmap, start, step, count, tp_pos, m, rem, rem_is_tp, flip_on, flip_off, ins_tp, cur, n_gt, voc07, buf, env):
    """First candidate (nearest first) whose crossing changes AP; returns (k, ap) or (-1, cur).

    Candidate ``k`` is the element at position ``cand[start + k * step]``; the
    mover lands at ``qmap`` of that position, i.e. past its whole tie group.
    """
    if count <= 0:
        return -1, cur
    last = _eval_move(tp_pos, m, rem, rem_is_tp, flip_on, flip_off, qmap[cand[start + (count - 1) * step]], ins_tp, n_gt, voc07, buf, env)
    if abs(last - cur) <= _TOL:
        return -1, cur
    lo = 0
    hi = count - 1
    ap_hi = last
    while lo < hi:
        mid = (lo + hi) // 2
        v = _eval_move(tp_pos, m, rem, rem_is_tp, flip_on, flip_off, qmap[cand[start + mid * step]], ins_tp, n_gt, voc07, buf, env)
        if abs(v - cur) > _TOL:
            hi = mid
            ap_hi = v
        else:
            lo = mid + 1
    return lo, ap_hi


@njit(cache=True, nogil=True)
def _steps_kernel(det_scores, is_tp, det_gt, barrier, barrier_score, n_gt_total, n_gt, voc07,
                  sup_scores, sup_det, sup_gt, sup_qpos, counter):
    """Step search over one class.

    Detections are given in ranked order. ``det_gt`` is the mapped ground truth
    (dense ``0..n_gt_total-1``) or -1; ``barrier[i]`` is the number of detections
    ranked above the top window that detection ``i`` suppresses and
    ``barrier_score[i]`` that window's score: ordinary downward crossings stop there. Suppressed windows carry their
    suppressor's position, mapped ground truth and rank among detections other
    than the suppressor.

    Returns locations (score of the step) and AP beyond it, for detections and
    suppressed windows, ``nan`` where no step exists, and the current AP.
    """
    n = det_scores.shape[0]
    ns = sup_scores.shape[0]
    nan = np.nan

    tp_pos = np.flatnonzero(is_tp)
    fp_pos = np.flatnonzero(~is_tp)
    m = tp_pos.shape[0]
    buf = np.empty(m + 2, dtype=np.int64)
    env = np.empty(m + 2, dtype=np.float64)

    claimer = np.full(n_gt_total, -1, dtype=np.int64)
    runner = np.full(n_gt_total, -1, dtype=np.int64)
    for i in range(n):
        g = det_gt[i]
        if g >= 0:
            if claimer[g] < 0:
                claimer[g] = i
            elif runner[g] < 0:
                runner[g] = i

    cur = _ap_from_positions(tp_pos, m, n_gt, voc07, env)

    # crossing a score crosses every detection tied at it
    gstart = np.empty(n, dtype=np.int64)
    gend = np.empty(n, dtype=np.int64)
    for i in range(n):
        gstart[i] = gstart[i - 1] if i > 0 and det_scores[i] == det_scores[i - 1] else i
    for i in range(n - 1, -1, -1):
        gend[i] = gend[i + 1] if i < n - 1 and det_scores[i] == det_scores[i + 1] else i

    up_loc = np.full(n, nan)
    up_ap = np.full(n, nan)
    dn_loc = np.full(n, nan)
    dn_ap = np.full(n, nan)

    # per-gap caches for false positives: candidate TP index of the step, or -1
    gap_up = np.full(m + 1, -2, dtype=np.int64)
    gap_up_ap = np.full(m + 1, nan)
    gap_dn = np.full(m + 1, -2, dtype=np.int64)
    gap_dn_ap = np.full(m + 1, nan)

    for i in range(n):
        if is_tp[i]:
            # true positive moving up: crosses false positives above it
            b = np.searchsorted(fp_pos, i)
            counter[0] += 1
            k, ap = _search(fp_pos, gstart, b - 1, -1, b, tp_pos, m, i, True, -1, -1, True, cur, n_gt, voc07, buf, env)
            if k >= 0:
                up_loc[i] = det_scores[fp_pos[b - 1 - k]]
                up_ap[i] = ap
            # moving down: false positives until the runner-up or the barrier
            counter[0] += 1
            rz = runner[det_gt[i]]
            limit = barrier[i]
            if rz >= 0 and rz < limit:
                limit = rz
            b = np.searchsorted(fp_pos, i)
            b_end = np.searchsorted(fp_pos, limit)
            if limit == rz:
                # a tie group reaching the runner-up crosses it too
                while b_end > b and gend[fp_pos[b_end - 1]] >= rz:
                    b_end -= 1
            while b_end > b and det_scores[fp_pos[b_end - 1]] <= barrier_score[i]:
                b_end -= 1
            k, ap = _search(fp_pos, gend, b, 1, b_end - b, tp_pos, m, i, True, -1, -1, True, cur, n_gt, voc07, buf, env)
            if k >= 0:
                dn_loc[i] = det_scores[fp_pos[b + k]]
                dn_ap[i] = ap
            elif rz >= 0 and rz < barrier[i]:
                # past the runner-up: it becomes the TP, this one a plain FP
                ap = _eval_move(tp_pos, m, i, True, rz, -1, gend[rz], False, n_gt, voc07, buf, env)
                if abs(ap - cur) > _TOL:
                    dn_loc[i] = det_scores[rz]
                    dn_ap[i] = ap
                else:
                    c = np.searchsorted(tp_pos, gend[rz] + 1)
                    c_end = np.searchsorted(tp_pos, barrier[i])
                    while c_end > c and det_scores[tp_pos[c_end - 1]] <= barrier_score[i]:
                        c_end -= 1
                    k, ap = _search(tp_pos, gend, c, 1, c_end - c, tp_pos, m, i, True, rz, -1, False, cur, n_gt, voc07, buf, env)
                    if k >= 0:
                        dn_loc[i] = det_scores[tp_pos[c + k]]
                        dn_ap[i] = ap
            continue

        a = np.searchsorted(tp_pos, i)
        # upward, as a plain false positive crossing TPs above it
        counter[0] += 1
        if gap_up[a] == -2:
            k, ap = _search(tp_pos, gstart, a - 1, -1, a, tp_pos, m, i, False, -1, -1, False, cur, n_gt, voc07, buf, env)
            gap_up[a] = k
            gap_up_ap[a] = ap
        k = gap_up[a]
        pz = claimer[det_gt[i]] if det_gt[i] >= 0 else -1
        if k >= 0 and gstart[tp_pos[a - 1 - k]] > pz:
            up_loc[i] = det_scores[tp_pos[a - 1 - k]]
            up_ap[i] = gap_up_ap[a]
        elif pz >= 0:
            # duplicate: past its claimer it becomes the TP and the claimer an FP
            ap = _eval_move(tp_pos, m, i, False, -1, pz, gstart[pz], True, n_gt, voc07, buf, env)
            if abs(ap - cur) > _TOL:
                up_loc[i] = det_scores[pz]
                up_ap[i] = ap
            else:
                b = np.searchsorted(fp_pos, gstart[pz])
                k2, ap = _search(fp_pos, gstart, b - 1, -1, b, tp_pos, m, i, False, -1, pz, True, cur, n_gt, voc07, buf, env)
                if k2 >= 0:
                    up_loc[i] = det_scores[fp_pos[b - 1 - k2]]
                    up_ap[i] = ap
        # downward, crossing TPs below it
        counter[0] += 1
        if gap_dn[a] == -2:
            k, ap = _search(tp_pos, gend, a, 1, m - a, tp_pos, m, i, False, -1, -1, False, cur, n_gt, voc07, buf, env)
            gap_dn[a] = k
            gap_dn_ap[a] = ap
        k = gap_dn[a]
        if k >= 0 and det_scores[tp_pos[a + k]] > barrier_score[i]:
            dn_loc[i] = det_scores[tp_pos[a + k]]
            dn_ap[i] = gap_dn_ap[a]

    # third pass: suppressed windows
    sup_up_loc = np.full(ns, nan)
    sup_up_ap = np.full(ns, nan)
    rescue_ap = np.full(n, nan)
    rescue_loc = np.full(n, nan)
    tried = np.zeros(n, dtype=np.bool_)
    seen = np.zeros(n, dtype=np.bool_)
    for w in range(ns):
        counter[0] += 1
        d = sup_det[w]
        top = not seen[d]
        seen[d] = True
        if not np.isnan(up_loc[d]):
            sup_up_loc[w] = up_loc[d]
            sup_up_ap[w] = up_ap[d]
        g = sup_gt[w]
        if g < 0 or claimer[g] >= 0:
            # lowering the suppressor past it lets it take the suppressor's
            # place with the same label; only tie groups make this change AP
            if np.isnan(dn_loc[d]) and not tried[d] and top:
                rz = runner[det_gt[d]] if is_tp[d] else -1
                keep_tp = is_tp[d] and not (rz >= 0 and rz < barrier[d])
                flip = rz if (is_tp[d] and not keep_tp) else -1
                ap = _eval_move(tp_pos, m, d, is_tp[d], flip, -1, sup_qpos[w], keep_tp, n_gt, voc07, buf, env)
                if abs(ap - cur) > _TOL:
                    tried[d] = True
                    rescue_loc[d] = sup_scores[w]
                    rescue_ap[d] = ap
            continue
        # the window covers a ground truth nobody found: raised past its
        # suppressor it takes the suppressor's slot as a new TP
        flip = d
        if is_tp[d]:
            flip = runner[det_gt[d]]
        if flip >= 0:
            ap = _eval_move(tp_pos, m, -1, False, flip, -1, -1, False, n_gt, voc07, buf, env)
            if abs(ap - cur) > _TOL:
                sup_up_loc[w] = det_scores[d]
                sup_up_ap[w] = ap
        # suppressor lowered past it frees it as a TP at its own rank; windows
        # arrive in ranked order, so the first one found is the nearest
        if np.isnan(dn_loc[d]) and not tried[d]:
            tried[d] = True
            flip = -1
            if is_tp[d]:
                flip = runner[det_gt[d]]
            ap = _eval_move(tp_pos, m, d, is_tp[d], flip, -1, sup_qpos[w], True, n_gt, voc07, buf, env)
            if abs(ap - cur) > _TOL:
                rescue_loc[d] = sup_scores[w]
                rescue_ap[d] = ap
    for i in range(n):
        if np.isnan(dn_loc[i]) and not np.isnan(rescue_loc[i]):
            dn_loc[i] = rescue_loc[i]
            dn_ap[i] = rescue_ap[i]
    return up_loc, up_ap, dn_loc, dn_ap, sup_up_loc, sup_up_ap, cur


# ---------------------------------------------------------------------------
# Python surface


@dataclass
class ScoreSteps:
    """Per-window nearest steps for one class; ``nan`` marks a missing step.

    Arrays are indexed like ``windows`` (dense dataset window indices).
    """

    windows: np.ndarray
    scores: np.ndarray
    delta_plus: np.ndarray
    ap_plus: np.ndarray
    delta_minus: np.ndarray
    ap_minus: np.ndarray
    current_ap: float
    profile_count: int = 0

    def has_plus(self) -> np.ndarray:
        return ~np.isnan(self.delta_plus)

    def has_minus(self) -> np.ndarray:
        return ~np.isnan(self.delta_minus)


def _dense_gt(gt: np.ndarray) -> tuple[np.ndarray, int]:
    uniq, inv = np.unique(gt[gt >= 0], return_inverse=True)
    out = np.full(len(gt), -1, dtype=np.int64)
    out[gt >= 0] = inv
    return out, len(uniq)


def steps_for_class(
    ev: ClassEvaluation, scores: np.ndarray, window_gt: np.ndarray, variant: APVariant, with_nms: bool = True
) -> ScoreSteps:
    """Nearest steps for every window of one evaluated class.

    ``window_gt`` is each window's mapped ground truth (global index or -1), i.e.
    the matching rule applied to every window regardless of NMS.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_all = len(scores)
    dets = ev.detections
    n = len(dets)
    sup = ev.suppressor
    voc07 = APVariant(variant) is APVariant.VOC2007_11POINT
    if ev.n_gt <= 0:
        raise ValueError("steps are undefined for a class without ground truth")

    order = class_order(scores)
    grank = np.empty(n_all, dtype=np.int64)
    grank[order] = np.arange(n_all)
    det_rank = grank[dets]
    det_pos = np.full(n_all, -1, dtype=np.int64)
    det_pos[dets] = np.arange(n)
    if np.any(np.diff(det_rank) <= 0):
        raise RuntimeError("detections are not in ranked order")

    suppressed = order[sup[order] >= 0] if with_nms else np.zeros(0, dtype=np.int64)
    if with_nms and np.any(det_pos[sup[suppressed]] < 0):
        raise RuntimeError("NMS outcome is inconsistent: a suppressor is not retained")
    barrier = np.full(n, n, dtype=np.int64)
    sup_det = det_pos[sup[suppressed]] if len(suppressed) else np.zeros(0, dtype=np.int64)
    above = np.searchsorted(det_rank, grank[suppressed]) if len(suppressed) else np.zeros(0, dtype=np.int64)
    if len(suppressed):
        # barrier: number of detections ranked above the top window each detection suppresses
        np.minimum.at(barrier, sup_det, above)
    barrier_score = np.full(n, -np.inf)
    if len(suppressed):
        np.maximum.at(barrier_score, sup_det, scores[suppressed])

    all_gt, n_dense = _dense_gt(np.concatenate([ev.matched_gt, window_gt[suppressed]]))
    det_gt = all_gt[:n]
    sup_gt = all_gt[n:]
    counter = np.zeros(1, dtype=np.int64)
    up_loc, up_ap, dn_loc, dn_ap, s_up_loc, s_up_ap, cur = _steps_kernel(
        scores[dets],
        ev.is_tp.astype(np.bool_),
        det_gt,
        barrier,
        barrier_score,
        max(n_dense, 1),
        int(ev.n_gt),
        voc07,
        scores[suppressed],
        sup_det.astype(np.int64),
        sup_gt,
        (above - 1).astype(np.int64),
        counter,
    )

    windows = np.concatenate([dets, suppressed]).astype(np.int64)
    own = scores[windows]
    loc_up = np.concatenate([up_loc, s_up_loc])
    loc_dn = np.concatenate([dn_loc, np.full(len(suppressed), np.nan)])
    return ScoreSteps(
        windows=windows,
        scores=own,
        delta_plus=loc_up - own,
        ap_plus=np.concatenate([up_ap, s_up_ap]),
        delta_minus=own - loc_dn,
        ap_minus=np.concatenate([dn_ap, np.full(len(suppressed), np.nan)]),
        current_ap=float(cur),
        profile_count=int(counter[0]),
    )


def find_steps(ev: ClassEvaluation, scores: np.ndarray, variant: APVariant) -> ScoreSteps:
    """Steps of the post-NMS detections only, ignoring suppressed windows."""
    return steps_for_class(ev, scores, np.zeros(0, dtype=np.int64), variant, with_nms=False)


def nms_aware_steps(ev: ClassEvaluation, scores: np.ndarray, window_gt: np.ndarray, variant: APVariant) -> ScoreSteps:
    """Steps for every pre-NMS window of the class, including suppressed ones."""
    return steps_for_class(ev, scores, window_gt, variant, with_nms=True)


def ap_delta(is_tp, n_gt: int, variant: APVariant, from_rank: int, to_rank: int) -> float:
    """AP after moving the detection at 1-based ``from_rank`` to ``to_rank``, labels unchanged."""
    is_tp = np.asarray(is_tp, dtype=bool)
    n = len(is_tp)
    if not (1 <= from_rank <= n and 1 <= to_rank <= n):
        raise ValueError("ranks out of range")
    tp_pos = np.flatnonzero(is_tp)
    m = len(tp_pos)
    buf = np.empty(m + 2, dtype=np.int64)
    env = np.empty(m + 2, dtype=np.float64)
    moved_tp = bool(is_tp[from_rank - 1])
    voc07 = APVariant(variant) is APVariant.VOC2007_11POINT
    return float(
        _eval_move(tp_pos, m, from_rank - 1, moved_tp, -1, -1, to_rank - 1, moved_tp, n_gt, voc07, buf, env)
    )
