"""Command-line entry point: ``metst {synth,train,loso,infer,evaluate,plot}``.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis as an
from .data import (FlowFormatError, SyntheticSpec, ValidationError, generate_synthetic,
                   load_dataset, read_flow, read_labels, write_dataset)
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (analyze_videos, apply_synergy, check_channels, predict_records,
                       read_records, score_records, write_records)
from .plotting import plot_video, write_curves_csv
from .training import TrainConfig, fit, loso_split, read_config_file, split_config

log = logging.getLogger("metst")


class UsageError(ValueError):
    pass


# argument parsing ---------------------------------------------------------------------

def _peak_flags(p):
    g = p.add_argument_group("peak post-processing")
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--half-window", type=int, default=None,
                   help="frames each side of a peak (default: 0.25 s at the video fps)")
    g.add_argument("--min-distance", type=int, default=None)
    g.add_argument("--interval-mode", choices=["fixed", "crossing"], default="fixed")
    g.add_argument("--crossing-level", type=float, default=0.5)
    g.add_argument("--iou", type=float, default=0.5)


def _train_flags(p):
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--variant", choices=["metst", "metst-plus"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--c-main", type=int)
    p.add_argument("--d-state", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--layers-per-block", type=int)
    p.add_argument("--n-emotions", type=int)
    p.add_argument("--class-weight-mode", choices=["inverse_freq", "uniform", "neutral_zero"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metst", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=1024)
    p.add_argument("--n-rois", type=int, default=18)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--emotions", type=int, default=3)
    p.add_argument("--me-rate", type=float, default=0.12)
    p.add_argument("--blink-rate", type=float, default=0.08)
    p.add_argument("--snr", type=float, default=4.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--min-event", type=int, default=9)
    p.add_argument("--max-event", type=int)
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model on a dataset")
    _train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")

    p = sub.add_parser("loso", help="leave-one-subject-out training and evaluation")
    _train_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--synergy", choices=["on", "off"], default="on")
    _peak_flags(p)

    p = sub.add_parser("infer", help="write candidate intervals for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.add_argument("--synergy", choices=["on", "off"], default="off",
                   help="'on' drops neutral-modal candidates before writing")
    _peak_flags(p)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--predictions")
    p.add_argument("--labels", help="labels JSONL or dataset directory")
    p.add_argument("--checkpoint", help="run inference first (end-to-end mode)")
    p.add_argument("--data-dir")
    p.add_argument("--n-emotions", type=int)
    p.add_argument("--synergy", choices=["on", "off"], default="on")
    p.add_argument("--report", help="write the EvalReport JSON here")
    p.add_argument("--counts-only", action="store_true",
                   help="score raw spotting counts given by --tp/--fp/--fn")
    p.add_argument("--tp", type=int)
    p.add_argument("--fp", type=int)
    p.add_argument("--fn", type=int)
    p.add_argument("--recog-f1", type=float, default=None)
    _peak_flags(p)

    p = sub.add_parser("plot", help="SVG of model curves with interval bands")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--predictions")
    p.add_argument("--labels")
    p.add_argument("--out-svg", required=True)
    p.add_argument("--out-csv")
    return ap


# helpers ---------------------------------------------------------------------------------

def _peak_params(args, fps: float) -> an.PeakParams:
    kw = {"threshold": args.threshold, "mode": args.interval_mode,
          "crossing_level": args.crossing_level}
    if args.half_window is not None:
        kw["half_window"] = args.half_window
    if args.min_distance is not None:
        kw["min_distance"] = args.min_distance
    return an.PeakParams.for_fps(fps, **kw)


_TRAIN_FLAGS = ("variant", "epochs", "lr", "c_main", "d_state", "blocks", "layers_per_block",
                "n_emotions", "class_weight_mode", "dtype", "seed")


def _configs(args, flows, labels) -> tuple[ModelConfig, TrainConfig]:
    """Merge the config file with flags; unset shape keys come from the data."""
    values = read_config_file(args.config) if args.config else {}
    for key in _TRAIN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    tvals, mvals = split_config(values)
    if "seed" in tvals:
        mvals["seed"] = tvals["seed"]
    c_in = flows[0].values.shape[1]
    mvals.setdefault("c_in", c_in)
    mvals.setdefault("n_emotions", _n_emotions_from(labels))
    if mvals["c_in"] != c_in:
        raise ValidationError(f"config c_in={mvals['c_in']} but data has {c_in} channels")
    return ModelConfig(**mvals), TrainConfig(**tvals)


def _n_emotions_from(labels) -> int:
    emos = [iv.emotion for ls in labels for iv in ls.intervals if iv.emotion is not None]
    return max(emos) + 1 if emos else 1


def _write_log(path, mcfg: ModelConfig, tcfg: TrainConfig, n_params: int, history):
    with open(path, "w", newline="") as fh:
        fh.write(f"# variant={mcfg.variant} epochs={tcfg.epochs} lr={tcfg.lr!r} "
                 f"seed={tcfg.seed} c_main={mcfg.c_main} d_state={mcfg.d_state}\n")
        fh.write(f"# parameters={n_params}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "spot_loss", "recog_loss", "grad_norm"])
        for s in history:
            w.writerow([s.epoch, f"{s.loss:.8g}", f"{s.spot_loss:.8g}", f"{s.recog_loss:.8g}",
                        f"{s.grad_norm:.8g}"])


def _read_label_source(src) -> dict:
    """Labels from a JSONL file, or from a dataset directory (whose manifest lists
    videos with no intervals too)."""
    if Path(src).is_dir():
        _, labels, _ = load_dataset(src)
        return {ls.video_id: ls for ls in labels}
    return read_labels(src)


def _labels_for(args):
    return _read_label_source(args.labels or args.data_dir)


def _print_report(report: an.EvalReport, counts_only: bool = False):
    s, r = report.spotting, report.recognition
    print(f"spotting  TP={s['TP']} FP={s['FP']} FN={s['FN']} "
          f"P={s['precision']:.4f} R={s['recall']:.4f} F1={s['f1']:.4f}")
    if counts_only:
        print(f"recognition UF1=n/a UAR=n/a F1={r['f1']:.4f}")
    else:
        print(f"recognition UF1={r['uf1']:.4f} UAR={r['uar']:.4f} F1={r['f1']:.4f}")
    print(f"STRS={report.strs:.4f}")


# verbs -------------------------------------------------------------------------------------

def run_synth(args) -> int:
    spec = SyntheticSpec(n_videos=args.n_videos, T=args.frames, n_rois=args.n_rois,
                         me_rate=args.me_rate, emotion_count=args.emotions,
                         blink_rate=args.blink_rate, snr=args.snr, seed=args.seed, fps=args.fps,
                         n_subjects=args.n_subjects, min_event=args.min_event,
                         max_event=args.max_event)
    flows, labels = generate_synthetic(spec)
    extra = {"generator": {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                           for k, v in asdict(spec).items()}}
    write_dataset(args.out, flows, labels, args.format, extra)
    n = sum(len(ls.intervals) for ls in labels)
    print(f"wrote {len(flows)} videos, {n} ME intervals to {args.out}")
    return 0


def run_train(args) -> int:
    flows, labels, _ = load_dataset(args.data_dir)
    mcfg, tcfg = _configs(args, flows, labels)
    result = fit(flows, labels, mcfg, tcfg)
    save_checkpoint(result.model, args.out)
    _write_log(args.log or f"{args.out}.log.csv", mcfg, tcfg, result.model.parameter_count(),
               result.history)
    print(f"saved {args.out} ({result.model.parameter_count()} parameters)")
    return 0


def _run_fold(job):
    fold, data_dir, mcfg, tcfg, out_dir, peak_kw = job
    flows, labels, _ = load_dataset(data_dir)
    by_id = {f.video_id: (f, l) for f, l in zip(flows, labels)}
    tr = [by_id[v] for v in fold.train]
    te = [by_id[v] for v in fold.test]
    result = fit([f for f, _ in tr], [l for _, l in tr], mcfg, tcfg)
    ckpt = Path(out_dir) / f"fold_{fold.subject}.mets"
    save_checkpoint(result.model, ckpt)
    _write_log(f"{ckpt}.log.csv", mcfg, tcfg, result.model.parameter_count(), result.history)
    test_flows = [f for f, _ in te]
    params = an.PeakParams.for_fps(test_flows[0].fps, **peak_kw)
    return predict_records(result.model, test_flows, params)


def _worker_cap(requested: int) -> int:
    env = os.environ.get("ME_TST_THREADS")
    cap = int(env) if env else requested
    return max(1, min(requested, cap))


def run_loso(args) -> int:
    flows, labels, _ = load_dataset(args.data_dir)
    mcfg, tcfg = _configs(args, flows, labels)
    plan = loso_split([(f.video_id, f.subject_id) for f in flows])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    peak_kw = {k: v for k, v in asdict(_peak_params(args, flows[0].fps)).items()}
    jobs = [(fold, args.data_dir, mcfg, tcfg, out_dir, peak_kw) for fold in plan.folds]
    workers = _worker_cap(args.workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    records = [r for recs in results for r in recs]
    write_records(records, out_dir / "predictions.jsonl")
    report = score_records(records, {ls.video_id: ls for ls in labels}, mcfg.n_emotions,
                           args.synergy, args.iou)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    _print_report(report)
    return 0


def run_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    flows, _, _ = load_dataset(args.data_dir)
    for seq in flows:
        check_channels(model, seq)
    records = predict_records(model, flows, _peak_params(args, flows[0].fps))
    if args.synergy == "on":
        records = [r for r in records if r["modal_class"] != model.config.neutral]
    write_records(records, args.out)
    print(f"wrote {len(records)} predicted intervals to {args.out}")
    return 0


def run_evaluate(args) -> int:
    if args.counts_only:
        if None in (args.tp, args.fp, args.fn):
            raise UsageError("--counts-only needs --tp, --fp and --fn")
        report = an.report_from_counts(args.tp, args.fp, args.fn)
        if args.recog_f1 is not None:
            report.recognition["f1"] = args.recog_f1
            report.strs = an.strs(report.spotting["f1"], args.recog_f1)
        _print_report(report, counts_only=True)
        if args.report:
            Path(args.report).write_text(report.to_json() + "\n")
        return 0
    if args.checkpoint:
        if not args.data_dir:
            raise UsageError("end-to-end evaluation needs --data-dir")
        model = load_checkpoint(args.checkpoint)
        flows, labels, _ = load_dataset(args.data_dir)
        records = predict_records(model, flows, _peak_params(args, flows[0].fps))
        gts = {ls.video_id: ls for ls in labels}
        n_emotions = model.config.n_emotions
    else:
        if not args.predictions or not (args.labels or args.data_dir):
            raise UsageError("need --predictions and --labels (or --checkpoint and --data-dir)")
        records = read_records(args.predictions)
        gts = _labels_for(args)
        n_emotions = args.n_emotions or _n_emotions_from(gts.values())
    report = score_records(records, gts, n_emotions, args.synergy, args.iou)
    _print_report(report)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    return 0


def run_plot(args) -> int:
    model = load_checkpoint(args.checkpoint)
    seq = read_flow(args.flow)
    check_channels(model, seq)
    out = analyze_videos(model, [seq])[seq.video_id]
    preds = []
    if args.predictions:
        recs = [r for r in read_records(args.predictions) if r["video_id"] == seq.video_id]
        preds = apply_synergy(recs, "off", model.config.neutral).get(seq.video_id, [])
    gts = []
    if args.labels:
        ls = _read_label_source(args.labels).get(seq.video_id)
        gts = ls.intervals if ls else []
    plot_video(out, args.out_svg, seq.video_id, gts, preds)
    csv_path = args.out_csv or str(Path(args.out_svg).with_suffix(".csv"))
    write_curves_csv(out, csv_path)
    print(f"wrote {args.out_svg} and {csv_path}")
    return 0


VERBS = {"synth": run_synth, "train": run_train, "loso": run_loso, "infer": run_infer,
         "evaluate": run_evaluate, "plot": run_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return VERBS[args.verb](args)
    except (UsageError, ValidationError, FlowFormatError, CheckpointError, ValueError) as exc:
        print(f"metst {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"metst {args.verb}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
