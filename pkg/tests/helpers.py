"""Shared fixtures and random-instance builders for the test-suite."""

from __future__ import annotations

import numpy as np

from mapgrad.core import BoundingBox, Dataset, GroundTruthObject, ImageRecord, ScoreTable


def random_detection_instance(rng: np.random.Generator, max_dets: int = 50, max_gts: int = 10):
    """Flat single-class detections and ground truths over a few images.

    Returns ``(dets, gts)`` with ``dets`` as ``(image_id, tie_key, BoundingBox, score)``
    and ``gts`` as :class:`GroundTruthObject`.
    """
    n_img = int(rng.integers(1, 4))
    n_gt = int(rng.integers(1, max_gts + 1))
    n_det = int(rng.integers(0, max_dets + 1))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(10, 40, size=2)
        gts.append(GroundTruthObject(f"i{rng.integers(n_img)}", 0, BoundingBox(x, y, x + w, y + h)))
    dets = []
    for k in range(n_det):
        if gts and rng.random() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            b = g.box
            bw, bh = b.x_max - b.x_min, b.y_max - b.y_min
            j = rng.uniform(-0.3, 0.3, size=4) * np.array([bw, bh, bw, bh])
            box = BoundingBox(b.x_min + j[0], b.y_min + j[1], b.x_max + j[2], b.y_max + j[3])
            if not box.is_valid():
                box = b
            image = g.image_id
        else:
            x, y = rng.uniform(0, 80, size=2)
            w, h = rng.uniform(5, 40, size=2)
            box = BoundingBox(x, y, x + w, y + h)
            image = f"i{rng.integers(n_img)}"
        score = float(rng.integers(0, 6)) / 5 if rng.random() < 0.2 else float(rng.uniform())
        dets.append((image, k, box, score))
    return dets, gts


def ranked(dets):
    """Sort ``(image, tie_key, box, score)`` by decreasing score, then tie key."""
    return sorted(dets, key=lambda d: (-d[3], d[1]))


def oracle_form(dets, gts):
    return [(d[0], d[1], d[2].to_list(), d[3]) for d in dets], [(g.image_id, g.box.to_list()) for g in gts]


def nms_chain() -> tuple[Dataset, ScoreTable]:
    """Red suppresses green, green would suppress blue, red and blue barely overlap."""
    red = [0.0, 0.0, 10.0, 10.0]
    green = [4.0, 0.0, 14.0, 10.0]
    blue = [8.0, 0.0, 18.0, 10.0]
    im = ImageRecord("a", ("r", "g", "b"), np.array([red, green, blue]), np.array([blue]), np.array([0]))
    return Dataset((im,), 1), ScoreTable(np.array([[0.9], [0.8], [0.7]]))


def missed_gt_fixture() -> tuple[Dataset, ScoreTable]:
    """Image ``a`` holds a ground truth whose only covering window ``w`` is suppressed by ``d``.

    ``d`` covers no ground truth (IoU 1/3 with it); image ``b`` holds a found ground
    truth ``t`` and a far background window ``f``. Scores: t .9, f .8, d .7, w .5.
    """
    a = ImageRecord("a", ("d", "w"), np.array([[5, 0, 15, 10], [0, 0, 10, 10]]), np.array([[0, 0, 10, 10]]), np.array([0]))
    b = ImageRecord("b", ("f", "t"), np.array([[50, 50, 60, 60], [0, 0, 10, 10]]), np.array([[0, 0, 10, 10]]), np.array([0]))
    return Dataset((a, b), 1), ScoreTable(np.array([[0.7], [0.5], [0.8], [0.9]]))
