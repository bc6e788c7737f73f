import csv
import math

import numpy as np
import pytest

from mapgrad.core import ScoreTable
from mapgrad.loss import GradientField, LossConfig, compute_loss
from mapgrad.synth import SynthConfig, from_labels, generate
from mapgrad.trainer import TrainConfig, TrainHistory, sample_minibatch, sgd_step, train


@pytest.fixture(scope="module")
def data():
    return generate(SynthConfig(seed=0))


def test_sgd_examples():
    s = np.array([1.0, 2.0])
    out, v = sgd_step(s, np.zeros(2), np.zeros(2), 0.1, 0.9)
    assert np.array_equal(out, s) and np.all(v == 0)
    out, v = sgd_step(s, np.ones(2), None, 0.1, 0.9)
    assert v == pytest.approx([-0.1, -0.1]) and out == pytest.approx(s - 0.1)
    out2, _ = sgd_step(out, np.ones(2), v, 0.1, 0.9)
    assert out2 - out == pytest.approx(-0.1 * 1.9)


def test_sgd_accepts_sparse_and_field_gradients():
    s = ScoreTable(np.zeros((2, 2)))
    out, _ = sgd_step(s, {(1, 0): 2.0}, None, 0.5, 0.0)
    assert isinstance(out, ScoreTable)
    assert out.values.tolist() == [[0.0, 0.0], [-1.0, 0.0]]
    out, _ = sgd_step(s, GradientField(np.ones((2, 2))), None, 1.0, 0.0)
    assert np.all(out.values == -1)
    out, _ = sgd_step(s, None, None, 1.0, 0.0)
    assert np.all(out.values == 0)
    with pytest.raises(ValueError):
        sgd_step(s, np.ones(3), None, 1.0, 0.0)


def test_minibatch_fractions(data):
    rng = np.random.default_rng(0)
    fg = data.foreground_mask(0.5)
    mb, rng = sample_minibatch(data, TrainConfig(fg_fraction=1.0), rng)
    assert len(mb.windows) and fg[mb.windows].all()
    for _ in range(20):
        mb, rng = sample_minibatch(data, TrainConfig(fg_fraction=0.05), rng)
        assert abs(mb.n_foreground - 0.05 * len(mb.windows)) <= 1
        assert mb.n_foreground == int(fg[mb.windows].sum())
        assert mb.dataset.n_windows == len(mb.windows)
        ids = {im.id for im in mb.dataset.images}
        assert mb.dataset.n_ground_truths == sum(len(im.gt_boxes) for im in data.images if im.id in ids)


def test_minibatch_determinism(data):
    a, _ = sample_minibatch(data, TrainConfig(), np.random.default_rng(3))
    b, _ = sample_minibatch(data, TrainConfig(), np.random.default_rng(3))
    assert np.array_equal(a.windows, b.windows)


def test_zero_iterations_keep_params(data):
    init = ScoreTable(np.random.default_rng(0).normal(size=(data.n_windows, data.n_classes)))
    out, hist = train(data, TrainConfig(iterations=0), init)
    assert np.array_equal(out.values, init.values) and len(hist) == 0
    assert hist.final_map == hist.initial_map


def test_training_is_deterministic(data):
    cfg = TrainConfig(iterations=30, eval_every=10)
    a, ha = train(data, cfg)
    b, hb = train(data, cfg)
    assert np.array_equal(a.values, b.values)
    assert ha.loss == hb.loss and ha.full_map == hb.full_map


def test_velocity_bound(data):
    cfg = TrainConfig()
    lc = LossConfig()
    rng = np.random.default_rng(1)
    params = rng.normal(size=(data.n_windows, data.n_classes))
    v = np.zeros_like(params)
    bound = cfg.learning_rate * lc.clip_threshold / (1 - cfg.momentum)
    for _ in range(40):
        mb, rng = sample_minibatch(data, cfg, rng)
        g = np.zeros_like(params)
        g[mb.windows] = compute_loss(params[mb.windows], mb.dataset, lc).grad.values
        params, v = sgd_step(params, g, v, cfg.learning_rate, cfg.momentum)
        assert np.abs(v).max() <= bound + 1e-12


def test_short_run_improves(data):
    _, hist = train(data, TrainConfig(iterations=50, eval_every=25))
    assert hist.healthy()
    assert hist.final_map > hist.initial_map


def test_history_csv(tmp_path, data):
    _, hist = train(data, TrainConfig(iterations=5, eval_every=2))
    path = tmp_path / "h.csv"
    hist.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["iteration"]) for r in rows] == list(range(5))
    assert rows[0]["full_map"] == "" and rows[1]["full_map"] != "" and rows[4]["full_map"] != ""


def test_unhealthy_history():
    h = TrainHistory(loss=[1.0, math.inf], max_abs_score=[0.0, 0.0])
    assert not h.healthy()
    assert not TrainHistory(loss=[1.0], max_abs_score=[2e6]).healthy()


def test_batch_without_ground_truth_is_skipped():
    d, _ = from_labels("FT")
    # one image per batch: the FP-only image yields no loss
    _, hist = train(d, TrainConfig(iterations=6, minibatch_images=1, fg_fraction=0.5))
    assert any(math.isnan(v) for v in hist.loss)
    assert hist.healthy()


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"momentum": 1.0}, {"fg_fraction": 2}, {"minibatch_images": 0}])
def test_config_errors(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
