"""``mapgrad`` command line: gen, eval, gradcheck and train.

Exit status is 0 on success, 1 on malformed input and 2 when gradcheck finds a
mismatch on a window free of NMS chains.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import Dataset, ScoreTable
from .evaluation import APVariant, EvalConfig, UndefinedAPError, evaluate_dataset, mean_over_valid, write_pr_csv
from .loss import LossConfig, compute_loss
from .nms import NmsConfig
from .oracle import gradcheck
from .pseudograd import EstimatorConfig, EstimatorKind
from .synth import SynthConfig, foreground_fraction, generate
from .trainer import TrainConfig, train
from .validation import check_dataset, check_score_table

EXIT_OK, EXIT_INPUT, EXIT_GRADCHECK = 0, 1, 2


class InputError(Exception):
    pass


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def _load_dataset(path: str) -> Dataset:
    try:
        d = Dataset.load(path)
        return check_dataset(d)
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _load_scores(path: str, d: Dataset) -> ScoreTable:
    try:
        with open(path) as fh:
            table = ScoreTable.from_json(json.load(fh), d)
        check_score_table(table, d)
        return table
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ap-variant", choices=[v.value for v in APVariant], default="voc2012")
    p.add_argument("--nms-threshold", type=float, default=0.3)
    p.add_argument("--match-iou", type=float, default=0.5)


def _configs(args) -> tuple[NmsConfig, EvalConfig]:
    try:
        return NmsConfig(args.nms_threshold), EvalConfig(args.match_iou, APVariant(args.ap_variant))
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_pr_curves(out_dir: Path, d: Dataset, scores: ScoreTable, nms_cfg: NmsConfig, eval_cfg: EvalConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    evs = evaluate_dataset(scores, d, nms_cfg, eval_cfg)
    for ev in evs:
        if ev.n_gt > 0:
            write_pr_csv(out_dir / f"pr_class{ev.class_id}.csv", ev.pr_curve(scores.values[:, ev.class_id]))
    return evs


def cmd_gen(args) -> int:
    try:
        cfg = SynthConfig(
            n_images=args.images,
            n_classes=args.classes,
            gts_per_image=(args.gts_min, args.gts_max),
            jittered_per_gt=args.jittered,
            background_per_image=args.background,
            canvas=(args.canvas[0], args.canvas[1]),
            jitter=args.jitter,
            seed=args.seed,
        )
        d = generate(cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    d.save(args.out)
    print(f"images: {len(d.images)}")
    print(f"windows: {d.n_windows}")
    print(f"ground_truths: {d.n_ground_truths}")
    print(f"foreground_fraction: {_fmt(foreground_fraction(d))}")
    return EXIT_OK


def cmd_eval(args) -> int:
    d = _load_dataset(args.dataset)
    scores = _load_scores(args.scores, d)
    nms_cfg, eval_cfg = _configs(args)
    if args.pr_dir:
        evs = _write_pr_curves(Path(args.pr_dir), d, scores, nms_cfg, eval_cfg)
    else:
        evs = evaluate_dataset(scores, d, nms_cfg, eval_cfg)
    per_class = [ev.ap for ev in evs]
    for c, ap in enumerate(per_class):
        print(f"class {c}: {_fmt(ap)}")
    try:
        print(f"mAP: {_fmt(mean_over_valid(per_class))}")
    except UndefinedAPError as exc:
        raise InputError(str(exc)) from exc
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    d = _load_dataset(args.dataset)
    scores = _load_scores(args.scores, d)
    nms_cfg, eval_cfg = _configs(args)
    if d.n_windows > args.max_windows:
        raise InputError(
            f"{d.n_windows} windows exceed --max-windows {args.max_windows}; the oracle scan grows cubically"
        )
    est = EstimatorConfig(EstimatorKind(args.estimator), args.flat_region_delta_min)
    report = gradcheck(d, scores, nms_cfg, eval_cfg, est, args.tol)
    if args.grad_csv:
        cfg = LossConfig(estimator=est, nms_cfg=nms_cfg, eval_cfg=eval_cfg)
        try:
            compute_loss(scores, d, cfg).grad.write_csv(args.grad_csv, d, scores)
        except UndefinedAPError as exc:
            raise InputError(str(exc)) from exc
    n_free = sum(e.chain_free for e in report.entries)
    print(f"checked: {len(report.entries)} (window, class) pairs, {n_free} free of NMS chains")
    print(f"chain disagreements (expected): {len(report.chain_disagreements)}")
    print(f"mismatches: {len(report.mismatches)}")
    for e in report.mismatches[:20]:
        image, window = d.window_key(e.window)
        print(
            f"  {image}/{window} class {e.class_id}: fast {e.fast_left} {e.fast_right} "
            f"oracle {e.oracle_left} {e.oracle_right}"
        )
    print("gradcheck: " + ("PASS" if report.passed else "FAIL"))
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_train(args) -> int:
    d = _load_dataset(args.dataset)
    nms_cfg, eval_cfg = _configs(args)
    try:
        cfg = TrainConfig(
            learning_rate=args.lr,
            momentum=args.momentum,
            iterations=args.iterations,
            minibatch_images=args.minibatch_images,
            fg_fraction=args.fg_fraction,
            seed=args.seed,
            eval_every=args.eval_every,
            loss_cfg=LossConfig(
                epsilon_log=args.epsilon,
                lambda_reg=args.lambda_reg,
                clip_threshold=args.clip if args.clip > 0 else math.inf,
                estimator=EstimatorConfig(EstimatorKind(args.estimator), args.flat_region_delta_min),
                nms_cfg=nms_cfg,
                eval_cfg=eval_cfg,
            ),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not np.any(d.gt_counts() > 0):
        raise InputError("dataset has no ground truth")
    scores, hist = train(d, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "history.csv")
    if np.isfinite(scores.values).all():
        with open(out / "scores.json", "w") as fh:
            json.dump(scores.to_json(d), fh)
        _write_pr_curves(out, d, scores, nms_cfg, eval_cfg)
    print(f"iterations: {len(hist)}")
    print(f"initial mAP: {_fmt(hist.initial_map)}")
    print(f"final mAP: {_fmt(hist.final_map)}")
    print(f"healthy: {'yes' if hist.healthy() else 'no'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapgrad", description="mAP-after-NMS evaluation, pseudogradients and training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset JSON")
    defaults = SynthConfig()
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--images", type=int, default=defaults.n_images)
    p.add_argument("--classes", type=int, default=defaults.n_classes)
    p.add_argument("--gts-min", type=int, default=defaults.gts_per_image[0])
    p.add_argument("--gts-max", type=int, default=defaults.gts_per_image[1])
    p.add_argument("--jittered", type=int, default=defaults.jittered_per_gt)
    p.add_argument("--background", type=int, default=defaults.background_per_image)
    p.add_argument("--canvas", type=float, nargs=2, default=list(defaults.canvas), metavar=("W", "H"))
    p.add_argument("--jitter", type=float, default=defaults.jitter)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="per-class AP and mAP of a score table")
    p.add_argument("dataset")
    p.add_argument("scores")
    p.add_argument("--pr-dir", help="write one PR-curve CSV per class here")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare fast-path steps and gradients with the brute-force oracle")
    p.add_argument("dataset")
    p.add_argument("scores")
    p.add_argument("--estimator", choices=[k.value for k in EstimatorKind], default="mee")
    p.add_argument("--flat-region-delta-min", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--grad-csv", help="also dump the loss gradient CSV here")
    p.add_argument("--max-windows", type=int, default=400, help="refuse larger datasets")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    t = TrainConfig()
    lc = t.loss_cfg
    p = sub.add_parser("train", help="optimise a score table by SGD on the mAP loss")
    p.add_argument("dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iterations", type=int, default=t.iterations)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--momentum", type=float, default=t.momentum)
    p.add_argument("--minibatch-images", type=int, default=t.minibatch_images)
    p.add_argument("--fg-fraction", type=float, default=t.fg_fraction)
    p.add_argument("--eval-every", type=int, default=t.eval_every)
    p.add_argument("--estimator", choices=[k.value for k in EstimatorKind], default="mee")
    p.add_argument("--flat-region-delta-min", type=float, default=lc.estimator.flat_region_delta_min)
    p.add_argument("--epsilon", type=float, default=lc.epsilon_log)
    p.add_argument("--lambda-reg", type=float, default=lc.lambda_reg)
    p.add_argument("--clip", type=float, default=lc.clip_threshold, help="0 disables clipping")
    p.add_argument("--seed", type=int, default=t.seed)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
