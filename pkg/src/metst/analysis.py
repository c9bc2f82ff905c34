"""Post-processing of network outputs and spotting/recognition metrics.

Intervals are inclusive frame spans, so ``[a, b]`` covers ``b - a + 1`` frames.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ExpressionInterval, LabelSet, ValidationError


@dataclass
class PeakParams:
    threshold: float = 0.5
    min_distance: int = 8
    half_window: int = 8
    mode: str = "fixed"
    crossing_level: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.min_distance < 1 or self.half_window < 1:
            raise ValueError("min_distance and half_window must be >= 1")
        if self.mode not in ("fixed", "crossing"):
            raise ValueError(f"unknown interval mode {self.mode!r}")

    @classmethod
    def for_fps(cls, fps: float, **kw) -> "PeakParams":
        hw = max(1, int(round(0.25 * fps)))
        kw.setdefault("half_window", hw)
        kw.setdefault("min_distance", kw["half_window"])
        return cls(**kw)


@dataclass
class Candidate:
    """A predicted interval with its peak score and recognition summary.

    ``class_hist`` counts per-frame argmax classes inside the interval and
    ``class_mass`` sums the per-frame probabilities; both include neutral as
    the last entry.
    """

    interval: ExpressionInterval
    peak_score: float
    modal_class: int
    class_hist: np.ndarray
    class_mass: np.ndarray

    @property
    def neutral(self) -> int:
        return len(self.class_hist) - 1


# peaks and intervals --------------------------------------------------------------

def detect_peaks(curve, params: PeakParams) -> list[int]:
    """Local maxima at or above ``threshold``, thinned greedily by height.

    A plateau counts once, at its leftmost frame. Peaks closer than
    ``min_distance`` to an already kept, higher peak are discarded.
    """
    x = np.asarray(curve, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("spotting curve has non-finite values")
    T = len(x)
    maxima = []
    i = 0
    while i < T:
        j = i
        while j + 1 < T and x[j + 1] == x[i]:
            j += 1
        left_ok = i == 0 or x[i - 1] < x[i]
        right_ok = j == T - 1 or x[j + 1] < x[i]
        if left_ok and right_ok and x[i] >= params.threshold:
            maxima.append(i)
        i = j + 1
    order = sorted(maxima, key=lambda p: (-x[p], p))
    kept: list[int] = []
    for p in order:
        if all(abs(p - q) >= params.min_distance for q in kept):
            kept.append(p)
    return sorted(kept)


def peaks_to_intervals(peaks, curve, params: PeakParams) -> list[ExpressionInterval]:
    """Expand each peak into an interval whose apex is the peak.

    ``fixed`` mode spans ``[p - half_window, p + half_window]``; ``crossing``
    mode walks outwards while the curve stays at or above
    ``crossing_level * curve[p]``, capped at ``2 * half_window`` per side.
    Intervals are clipped to ``[0, T)``.
    """
    x = np.asarray(curve, dtype=np.float64)
    T = len(x)
    hw = params.half_window
    out = []
    for p in peaks:
        if params.mode == "fixed":
            lo, hi = p - hw, p + hw
        else:
            level = params.crossing_level * x[p]
            lo = p
            while lo > 0 and p - lo < 2 * hw and x[lo - 1] >= level:
                lo -= 1
            hi = p
            while hi < T - 1 and hi - p < 2 * hw and x[hi + 1] >= level:
                hi += 1
        out.append(ExpressionInterval(max(lo, 0), p, min(hi, T - 1)))
    return out


def class_summary(interval: ExpressionInterval, recog) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(recog)[interval.onset:interval.offset + 1]
    K = probs.shape[1]
    hist = np.bincount(probs.argmax(axis=1), minlength=K)
    return hist, probs.sum(axis=0)


def _mode(hist: np.ndarray, mass: np.ndarray, classes) -> int:
    classes = list(classes)
    return max(classes, key=lambda c: (hist[c], mass[c], -c))


def assign_emotion(interval: ExpressionInterval, recog) -> int:
    """Most frequent per-frame argmax class; ties go to the larger summed probability."""
    recog = np.asarray(recog)
    if not 0 <= interval.onset <= interval.offset < len(recog):
        raise ValidationError(f"interval {interval} outside recognition output of length {len(recog)}")
    hist, mass = class_summary(interval, recog)
    return _mode(hist, mass, range(len(hist)))


def make_candidates(spot, recog, params: PeakParams) -> list[Candidate]:
    spot = np.asarray(spot)
    peaks = detect_peaks(spot, params)
    cands = []
    for iv in peaks_to_intervals(peaks, spot, params):
        hist, mass = class_summary(iv, recog)
        modal = _mode(hist, mass, range(len(hist)))
        cands.append(Candidate(iv, float(spot[iv.apex]), modal, hist, mass))
    return cands


def fallback_class(cand: Candidate) -> int:
    """Most frequent non-neutral class, by summed probability if none was argmax."""
    return _mode(cand.class_hist, cand.class_mass, range(cand.neutral))


@dataclass
class PredictedInterval(ExpressionInterval):
    peak_score: float = 1.0


def synergy_filter(candidates: Sequence[Candidate], mode: str = "on") -> list[ExpressionInterval]:
    """Turn candidates into final predictions.

    ``on`` drops candidates whose modal class is neutral. ``off`` keeps them
    with their most frequent non-neutral class instead.
    """
    if mode not in ("on", "off"):
        raise ValueError("synergy mode must be 'on' or 'off'")
    out = []
    for c in candidates:
        emo = c.modal_class
        if emo == c.neutral:
            if mode == "on":
                continue
            emo = fallback_class(c)
        iv = c.interval
        out.append(PredictedInterval(iv.onset, iv.apex, iv.offset, emo, "ME", c.peak_score))
    return out


# matching ----------------------------------------------------------------------------

def interval_iou(pred: ExpressionInterval, gt: ExpressionInterval) -> float:
    inter = min(pred.offset, gt.offset) - max(pred.onset, gt.onset) + 1
    if inter <= 0:
        return 0.0
    union = pred.length + gt.length - inter
    return inter / union


def match_intervals(preds: Sequence[ExpressionInterval], gts: Sequence[ExpressionInterval],
                    iou_thr: float = 0.5):
    """One-to-one matching of predictions to ground truth at IoU > ``iou_thr``.

    Predictions are admitted greedily in descending ``peak_score``. A
    prediction is accepted if some assignment of the accepted set to distinct
    ground truths exists (found by an augmenting path), so earlier picks may
    move to another overlapping ground truth. This keeps the score priority
    and yields the maximum possible TP count; where ground truths do not
    overlap it is plain first-come greedy. Returns ``(tp_pairs, fp_preds,
    fn_gts)`` with pairs as ``(pred_index, gt_index)``.
    """
    order = sorted(range(len(preds)), key=lambda i: (-getattr(preds[i], "peak_score", 1.0), i))
    adj = {}
    for i in order:
        ious = [(interval_iou(preds[i], g), j) for j, g in enumerate(gts)]
        adj[i] = [j for v, j in sorted(ious, key=lambda t: (-t[0], t[1])) if v > iou_thr]
    owner: dict[int, int] = {}

    def augment(i, seen):
        for j in adj[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    fp = [i for i in order if not augment(i, set())]
    tp = sorted((i, j) for j, i in owner.items())
    fn = sorted(set(range(len(gts))) - set(owner))
    return tp, sorted(fp), fn


# metrics ------------------------------------------------------------------------------

def _ratio(num, den) -> float:
    return num / den if den else 0.0


def spotting_prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn)


def recognition_scores(tp, fp, fn) -> dict:
    """Macro scores from per-class counts.

    ``uar`` and ``uf1`` are unweighted means of per-class recall and F1;
    ``f1`` is the harmonic mean of macro precision and macro recall. Classes
    with no support contribute 0 to every mean.
    """
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    C = len(tp)
    if C < 1:
        raise ValueError("need at least one class")
    prec = [_ratio(a, a + b) for a, b in zip(tp, fp)]
    rec = [_ratio(a, a + b) for a, b in zip(tp, fn)]
    f1 = [_ratio(2 * a, 2 * a + b + c) for a, b, c in zip(tp, fp, fn)]
    P, R = float(np.mean(prec)), float(np.mean(rec))
    return {"uar": R, "uf1": float(np.mean(f1)), "precision": P, "recall": R,
            "f1": _ratio(2 * P * R, P + R)}


def strs(f1_spot: float, f1_recog: float) -> float:
    return f1_spot * f1_recog


@dataclass
class EvalReport:
    spotting: dict
    recognition: dict
    strs: float
    options: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def report_from_counts(tp: int, fp: int, fn: int, recog_tp=(), recog_fp=(), recog_fn=(),
                       options: dict | None = None) -> EvalReport:
    p, r, f1 = spotting_prf(tp, fp, fn)
    spotting = {"TP": int(tp), "FP": int(fp), "FN": int(fn), "precision": p, "recall": r, "f1": f1}
    if len(recog_tp):
        rs = recognition_scores(recog_tp, recog_fp, recog_fn)
    else:
        rs = {"uar": 0.0, "uf1": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    recognition = {"TP": [int(v) for v in recog_tp], "FP": [int(v) for v in recog_fp],
                   "FN": [int(v) for v in recog_fn], **rs}
    return EvalReport(spotting, recognition, strs(f1, rs["f1"]), options or {})


def evaluate(preds: Mapping[str, Sequence[ExpressionInterval]],
             gts: Mapping[str, LabelSet | Sequence[ExpressionInterval]],
             n_emotions: int, iou_thr: float = 0.5) -> EvalReport:
    """Pool spotting counts over videos and score recognition on matched pairs.

    Only ``kind == "ME"`` ground truth takes part. For every true-positive
    pair the predicted emotion is compared with the annotated one.
    """
    unknown = set(preds) - set(gts)
    if unknown:
        raise ValidationError(f"predictions for unknown videos: {sorted(unknown)[:5]}")
    TP = FP = FN = 0
    ctp = np.zeros(n_emotions, dtype=int)
    cfp = np.zeros(n_emotions, dtype=int)
    cfn = np.zeros(n_emotions, dtype=int)
    for vid in sorted(gts):
        g = gts[vid]
        gt_list = [iv for iv in (g.intervals if isinstance(g, LabelSet) else g) if iv.kind == "ME"]
        p_list = list(preds.get(vid, []))
        pairs, fps, fns = match_intervals(p_list, gt_list, iou_thr)
        TP += len(pairs)
        FP += len(fps)
        FN += len(fns)
        for i, j in pairs:
            pe, ge = p_list[i].emotion, gt_list[j].emotion
            if pe == ge:
                ctp[ge] += 1
            else:
                cfn[ge] += 1
                if pe is not None and 0 <= pe < n_emotions:
                    cfp[pe] += 1
    return report_from_counts(TP, FP, FN, ctp, cfp, cfn,
                              {"iou_thr": iou_thr, "n_emotions": n_emotions})
