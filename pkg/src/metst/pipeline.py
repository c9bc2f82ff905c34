"""Glue between trained models, post-processing and prediction files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .analysis import (Candidate, PeakParams, PredictedInterval, evaluate, fallback_class,
                       make_candidates)
from .data import ExpressionInterval, FlowSequence, LabelSet, ValidationError, label_record
from .model import AnalysisOutput


def check_channels(model, seq: FlowSequence):
    c_model = model.config.c_in
    c_data = seq.values.shape[1]
    if c_model != c_data:
        raise ValidationError(
            f"channel mismatch: checkpoint expects c_in={c_model}, {seq.video_id} has {c_data}")


def analyze_videos(model, flows: Sequence[FlowSequence]) -> dict[str, AnalysisOutput]:
    out = {}
    for seq in flows:
        check_channels(model, seq)
        out[seq.video_id] = model.analyze(seq.channels_first())
    return out


def candidate_records(seq: FlowSequence, cands: Iterable[Candidate]) -> list[dict]:
    """JSONL records in the label schema plus ``peak_score`` and ``modal_class``.

    ``emotion`` is always a non-neutral class (the fallback when the modal
    class is neutral), so the records can be scored with result-level synergy
    either on or off.
    """
    recs = []
    for c in cands:
        emo = c.modal_class if c.modal_class != c.neutral else fallback_class(c)
        iv = c.interval
        recs.append(label_record(seq.video_id, seq.subject_id,
                                 ExpressionInterval(iv.onset, iv.apex, iv.offset, int(emo), "ME"),
                                 peak_score=float(c.peak_score), modal_class=int(c.modal_class)))
    return recs


def predict_records(model, flows: Sequence[FlowSequence], params: PeakParams,
                    outputs: dict[str, AnalysisOutput] | None = None) -> list[dict]:
    outputs = outputs or analyze_videos(model, flows)
    recs = []
    for seq in flows:
        out = outputs[seq.video_id]
        recs.extend(candidate_records(seq, make_candidates(out.spot, out.recog, params)))
    return recs


def apply_synergy(records: Iterable[dict], mode: str, neutral: int) -> dict[str, list[PredictedInterval]]:
    """Group records by video; with ``mode == "on"`` drop neutral-modal ones."""
    if mode not in ("on", "off"):
        raise ValueError("synergy mode must be 'on' or 'off'")
    out: dict[str, list[PredictedInterval]] = {}
    for r in records:
        preds = out.setdefault(r["video_id"], [])
        if mode == "on" and r.get("modal_class", r["emotion"]) == neutral:
            continue
        preds.append(PredictedInterval(int(r["onset"]), int(r["apex"]), int(r["offset"]),
                                       int(r["emotion"]), "ME", float(r.get("peak_score", 1.0))))
    return out


def write_records(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def score_records(records, labels: dict[str, LabelSet], n_emotions: int, synergy: str = "on",
                  iou_thr: float = 0.5):
    preds = apply_synergy(records, synergy, n_emotions)
    report = evaluate(preds, labels, n_emotions, iou_thr)
    report.options["synergy"] = synergy
    return report
