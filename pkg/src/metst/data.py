"""Flow sequences, expression labels, training targets and synthetic data.

Binary flow files (``.mefl``)::

    b"MEFL"  u32 version=1  u32 T  u32 C1  f64 fps  T*C1 float32 (LE, row-major)

CSV flow files carry a ``frame,roi0_x,roi0_y,...`` header and one row per
frame. Labels are JSON lines with ``video_id, subject_id, onset, apex, offset,
emotion, kind``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import DimensionError

FLOW_MAGIC = b"MEFL"
FLOW_VERSION = 1
_HEADER = struct.Struct("<4sIIId")

EMOTION_NAMES = ("negative", "positive", "surprise", "others")


class ValidationError(ValueError):
    """Input that is well-formed but semantically invalid."""


class FlowFormatError(ValueError):
    """A flow file that cannot be decoded; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FlowSequence:
    """Per-frame ROI optical flow, ``values`` is ``(T, 2 * n_rois)``."""

    video_id: str
    subject_id: str
    fps: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] % 2:
            raise ValidationError(f"flow values must be (T, 2*n_rois), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"{self.video_id}: flow contains non-finite values")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n_rois(self) -> int:
        return self.values.shape[1] // 2

    def channels_first(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.T)


@dataclass
class ExpressionInterval:
    onset: int
    apex: int
    offset: int
    emotion: int | None = None
    kind: str = "ME"

    def __post_init__(self):
        if not self.onset <= self.apex <= self.offset:
            raise ValidationError(
                f"interval needs onset <= apex <= offset, got {self.onset}, {self.apex}, {self.offset}")

    @property
    def length(self) -> int:
        return self.offset - self.onset + 1


@dataclass
class LabelSet:
    video_id: str
    subject_id: str = ""
    intervals: list[ExpressionInterval] = field(default_factory=list)
    distractors: list[ExpressionInterval] = field(default_factory=list)

    def __post_init__(self):
        self.intervals = sorted(self.intervals, key=lambda iv: (iv.onset, iv.offset))


# codec ---------------------------------------------------------------------------

def write_flow(seq: FlowSequence, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or _format_from_suffix(path)
    if fmt == "binary":
        T, C = seq.values.shape
        payload = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
        path.write_bytes(_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, T, C, float(seq.fps)) + payload)
    elif fmt == "csv":
        header = ["frame"] + [f"roi{i}_{ax}" for i in range(seq.n_rois) for ax in "xy"]
        with open(path, "w") as fh:
            fh.write(f"# fps={seq.fps!r}\n")
            fh.write(",".join(header) + "\n")
            for t, row in enumerate(seq.values):
                fh.write(f"{t}," + ",".join(f"{v:.9g}" for v in row) + "\n")
    else:
        raise ValueError(f"unknown flow format {fmt!r}")
    return path


def read_flow(path, fmt: str | None = None, video_id: str | None = None,
              subject_id: str = "") -> FlowSequence:
    path = Path(path)
    fmt = fmt or _format_from_suffix(path)
    vid = video_id or path.stem
    if fmt == "binary":
        values, fps = _decode_binary(path.read_bytes())
    elif fmt == "csv":
        values, fps = _decode_csv(path)
    else:
        raise ValueError(f"unknown flow format {fmt!r}")
    return FlowSequence(vid, subject_id, fps, values)


def _format_from_suffix(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def _decode_binary(buf: bytes):
    if len(buf) < 4 or buf[:4] != FLOW_MAGIC:
        raise FlowFormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < _HEADER.size:
        raise FlowFormatError("truncated header", len(buf))
    _, version, T, C, fps = _HEADER.unpack_from(buf)
    if version != FLOW_VERSION:
        raise FlowFormatError(f"unsupported version {version}", 4)
    need = _HEADER.size + 4 * T * C
    if len(buf) < need:
        raise FlowFormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
    values = np.frombuffer(buf, dtype="<f4", count=T * C, offset=_HEADER.size).reshape(T, C)
    bad = np.flatnonzero(~np.isfinite(values.reshape(-1)))
    if bad.size:
        raise FlowFormatError("non-finite flow value", _HEADER.size + 4 * int(bad[0]))
    return values.astype(np.float32), fps


def _decode_csv(path: Path):
    fps = 30.0
    rows = []
    offset = 0
    with open(path, "rb") as fh:
        lines = fh.read().split(b"\n")
    header_seen = False
    for line in lines:
        text = line.decode()
        if text.startswith("#"):
            if text.startswith("# fps="):
                fps = float(text[6:])
        elif not header_seen:
            if not text.startswith("frame,"):
                raise FlowFormatError("missing 'frame,...' header row", offset)
            header_seen = True
            n_cols = len(text.split(",")) - 1
        elif text.strip():
            parts = text.split(",")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise FlowFormatError("unparseable number", offset) from None
            if len(vals) != n_cols or not all(math.isfinite(v) for v in vals):
                raise FlowFormatError("bad row (wrong width or non-finite value)", offset)
            rows.append(vals)
        offset += len(line) + 1
    if not header_seen or not rows:
        raise FlowFormatError("no data rows", offset)
    return np.asarray(rows, dtype=np.float32), fps


def write_labels(labelsets: Iterable[LabelSet], path) -> None:
    with open(path, "w") as fh:
        for ls in labelsets:
            for iv in ls.intervals:
                fh.write(json.dumps(label_record(ls.video_id, ls.subject_id, iv)) + "\n")


def label_record(video_id: str, subject_id: str, iv: ExpressionInterval, **extra) -> dict:
    rec = {"video_id": video_id, "subject_id": subject_id, **asdict(iv)}
    rec.update(extra)
    return rec


def read_labels(path) -> dict[str, LabelSet]:
    """Group a JSON-lines label file by ``video_id``."""
    out: dict[str, LabelSet] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                iv = ExpressionInterval(int(rec["onset"]), int(rec["apex"]), int(rec["offset"]),
                                        rec.get("emotion"), rec.get("kind", "ME"))
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from None
            vid = rec["video_id"]
            ls = out.setdefault(vid, LabelSet(vid, rec.get("subject_id", "")))
            ls.intervals.append(iv)
    for ls in out.values():
        ls.intervals.sort(key=lambda iv: (iv.onset, iv.offset))
    return out


# preprocessing -------------------------------------------------------------------

def align_global_flow(seq: FlowSequence, global_flow) -> FlowSequence:
    """Subtract the whole-face ``(T, 2)`` flow from every ROI's (x, y) pair."""
    g = np.asarray(global_flow, dtype=np.float64)
    if g.shape != (seq.T, 2):
        raise DimensionError(f"global flow must be ({seq.T}, 2), got {g.shape}")
    aligned = seq.values - np.tile(g, seq.n_rois)
    return FlowSequence(seq.video_id, seq.subject_id, seq.fps, aligned.astype(seq.values.dtype))


def encode_targets(labels: LabelSet, T: int, n_emotions: int):
    """Per-frame spotting ramp and recognition class ids.

    The spotting target rises linearly from 0 at onset to 1 at apex and falls
    back to 0 at offset; overlapping intervals combine by pointwise max.
    Recognition ids are the interval emotion inside ME intervals (later onset
    wins on overlap) and ``n_emotions`` (neutral) elsewhere.
    """
    spot = np.zeros(T)
    recog = np.full(T, n_emotions, dtype=np.int64)
    for iv in sorted(labels.intervals, key=lambda iv: iv.onset):
        if not 0 <= iv.onset <= iv.apex <= iv.offset < T:
            raise ValidationError(f"{labels.video_id}: interval {iv} outside [0, {T})")
        if iv.kind != "ME":
            continue
        t = np.arange(iv.onset, iv.offset + 1)
        ramp = np.ones(len(t))
        rise = t < iv.apex
        ramp[rise] = (t[rise] - iv.onset) / (iv.apex - iv.onset)
        fall = t > iv.apex
        ramp[fall] = (iv.offset - t[fall]) / (iv.offset - iv.apex)
        spot[t] = np.maximum(spot[t], ramp)
        if iv.emotion is None or not 0 <= iv.emotion < n_emotions:
            raise ValidationError(f"{labels.video_id}: ME interval needs an emotion in [0, {n_emotions})")
        recog[t] = iv.emotion
    return spot, recog


# synthetic data ------------------------------------------------------------------

EYE_ROIS = (0, 1, 2, 3)


@dataclass
class SyntheticSpec:
    """Settings for :func:`generate_synthetic`.

    ``me_rate`` and ``blink_rate`` are expected events per second; ``snr`` is
    the ratio of a nominal ME peak displacement to the noise standard
    deviation (``inf`` disables noise). Event durations are in frames.
    """

    n_videos: int = 8
    T: int = 1024
    n_rois: int = 18
    me_rate: float = 0.12
    emotion_count: int = 3
    blink_rate: float = 0.08
    snr: float = 4.0
    seed: int = 0
    fps: float = 30.0
    n_subjects: int | None = None
    min_event: int = 9
    max_event: int | None = None
    rois_per_emotion: int = 4

    def __post_init__(self):
        if self.max_event is None:
            self.max_event = max(self.min_event, int(round(0.5 * self.fps)))
        if self.min_event < 3 or self.max_event < self.min_event:
            raise ValidationError("need 3 <= min_event <= max_event")
        if self.min_event > self.T:
            raise ValidationError(f"events of {self.min_event} frames cannot fit in T={self.T}")
        if self.n_rois < len(EYE_ROIS) + self.rois_per_emotion:
            raise ValidationError("too few ROIs for eye and expression groups")
        if self.n_videos < 1 or self.emotion_count < 1:
            raise ValidationError("need at least one video and one emotion")
        if self.snr <= 0:
            raise ValidationError("snr must be positive")


def emotion_templates(n_rois: int, emotion_count: int, rois_per_emotion: int = 4):
    """Fixed per-emotion motion patterns: ``(roi indices, unit (dx, dy) per roi)``.

    Templates never touch the eye ROIs, which are reserved for blinks.
    """
    rng = np.random.default_rng(9173)
    pool = np.arange(len(EYE_ROIS), n_rois)
    out = []
    for _ in range(emotion_count):
        rois = np.sort(rng.choice(pool, rois_per_emotion, replace=False))
        ang = rng.uniform(0, 2 * np.pi, rois_per_emotion)
        out.append((rois, np.stack([np.cos(ang), np.sin(ang)], axis=1)))
    return out


def _bump(T: int, onset: int, apex: int, offset: int) -> np.ndarray:
    """Asymmetric Gaussian peaking at ``apex`` and confined to ``[onset, offset]``."""
    t = np.arange(onset, offset + 1)
    sl = max(apex - onset, 1) / 2.5
    sr = max(offset - apex, 1) / 2.5
    sig = np.where(t <= apex, sl, sr)
    out = np.zeros(T)
    out[onset:offset + 1] = np.exp(-0.5 * ((t - apex) / sig) ** 2)
    return out


def _place_events(rng, T: int, count: int, lo: int, hi: int, gap: int, taken: list):
    placed = []
    for _ in range(count):
        for _attempt in range(50):
            d = int(rng.integers(lo, hi + 1))
            if d > T:
                break
            on = int(rng.integers(0, T - d + 1))
            off = on + d - 1
            if all(off + gap < a or on > b + gap for a, b in taken):
                taken.append((on, off))
                placed.append((on, off))
                break
    return placed


def generate_synthetic(spec: SyntheticSpec):
    """Synthetic ROI flow with labelled micro-expressions and blink distractors.

    Returns ``(flows, labels)`` as parallel lists. ME events are Poisson in
    number, placed without overlap, and move an emotion-specific ROI subset;
    blinks are short, strong bumps on the eye ROIs, recorded as
    ``LabelSet.distractors`` and never as expressions.
    """
    rng = np.random.default_rng(spec.seed)
    templates = emotion_templates(spec.n_rois, spec.emotion_count, spec.rois_per_emotion)
    n_subjects = spec.n_subjects or max(2, min(spec.n_videos, math.ceil(spec.n_videos / 4)))
    subj_gain = rng.uniform(0.75, 1.25, n_subjects)
    noise_sd = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr
    seconds = spec.T / spec.fps
    flows, labels = [], []
    for v in range(spec.n_videos):
        s = v % n_subjects
        vid, sid = f"v{v:04d}", f"s{s:03d}"
        X = np.zeros((spec.T, 2 * spec.n_rois))
        taken: list = []
        ivs = []
        n_me = int(rng.poisson(spec.me_rate * seconds))
        for on, off in _place_events(rng, spec.T, n_me, spec.min_event, spec.max_event, 4, taken):
            span = off - on
            apex = on + int(round(rng.uniform(0.35, 0.65) * span))
            emo = int(rng.integers(spec.emotion_count))
            rois, dirs = templates[emo]
            amp = subj_gain[s] * rng.uniform(0.8, 1.2)
            bump = _bump(spec.T, on, apex, off) * amp
            for r, (dx, dy) in zip(rois, dirs):
                X[:, 2 * r] += bump * dx
                X[:, 2 * r + 1] += bump * dy
            ivs.append(ExpressionInterval(on, apex, off, emo, "ME"))
        blinks = []
        n_blink = int(rng.poisson(spec.blink_rate * seconds))
        for _ in range(n_blink):
            d = int(rng.integers(3, 7))
            on = int(rng.integers(0, spec.T - d + 1))
            off = on + d - 1
            apex = (on + off) // 2
            amp = rng.uniform(2.5, 4.0)
            bump = _bump(spec.T, on, apex, off) * amp
            for r in EYE_ROIS:
                X[:, 2 * r + 1] += bump
            blinks.append(ExpressionInterval(on, apex, off, None, "blink"))
        if noise_sd:
            X += rng.normal(0.0, noise_sd, X.shape)
        flows.append(FlowSequence(vid, sid, spec.fps, X.astype(np.float32)))
        labels.append(LabelSet(vid, sid, ivs, sorted(blinks, key=lambda b: b.onset)))
    return flows, labels


def write_dataset(out_dir, flows: list[FlowSequence], labels: list[LabelSet],
                  fmt: str = "binary", extra: dict | None = None) -> Path:
    """Write flow files, ``labels.jsonl`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".csv" if fmt == "csv" else ".mefl"
    videos = []
    for seq, ls in zip(flows, labels):
        fname = seq.video_id + suffix
        write_flow(seq, out / fname, fmt)
        videos.append({"video_id": seq.video_id, "subject_id": seq.subject_id, "file": fname,
                       "frames": seq.T, "fps": seq.fps,
                       "distractors": [asdict(b) for b in ls.distractors]})
    write_labels(labels, out / "labels.jsonl")
    manifest = {"videos": videos, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir) -> tuple[list[FlowSequence], list[LabelSet], dict]:
    """Read a directory written by :func:`write_dataset`.

    The manifest declares which videos are labelled (a listed video may have
    no intervals). Without a manifest every flow file must have at least one
    label record. Flow files that nothing accounts for are rejected.
    """
    d = Path(data_dir)
    lpath = d / "labels.jsonl"
    if not lpath.exists():
        raise ValidationError(f"{d}: missing labels.jsonl")
    by_vid = read_labels(lpath)
    on_disk = {f.name for f in list(d.glob("*.mefl")) + list(d.glob("*.csv"))}
    mpath = d / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    entries = manifest.get("videos")
    if entries is None:
        entries = []
        for name in sorted(on_disk):
            stem = Path(name).stem
            if stem not in by_vid:
                raise ValidationError(f"{d / name}: no labels for this flow file")
            entries.append({"video_id": stem, "subject_id": by_vid[stem].subject_id, "file": name})
    stray = on_disk - {e["file"] for e in entries}
    if stray:
        raise ValidationError(f"flow files without labels: {sorted(stray)[:5]}")
    flows, labels = [], []
    for e in entries:
        seq = read_flow(d / e["file"], video_id=e["video_id"], subject_id=e["subject_id"])
        flows.append(seq)
        ls = by_vid.get(e["video_id"], LabelSet(e["video_id"], e["subject_id"]))
        ls.subject_id = e["subject_id"]
        ls.distractors = [ExpressionInterval(**b) for b in e.get("distractors", [])]
        labels.append(ls)
    unknown = set(by_vid) - {e["video_id"] for e in entries}
    if unknown:
        raise ValidationError(f"labels reference unknown videos: {sorted(unknown)[:5]}")
    return flows, labels, manifest
