"""Optimisation loop, loss assembly, class weighting and LOSO splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import FlowSequence, LabelSet, ValidationError, encode_targets
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 50
    lambda_spot: float = 1.0
    lambda_recog: float = 1.0
    class_weight_mode: str = "inverse_freq"
    class_weights: list[float] | None = None
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_spot < 0 or self.lambda_recog < 0:
            raise ValueError("loss weights must be >= 0")
        if self.class_weights is not None and min(self.class_weights) < 0:
            raise ValueError("class weights must be >= 0")


# config files ------------------------------------------------------------------------

def _coerce(text: str):
    low = text.strip().lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return [float(v) for v in text.split(",")]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(val)
    return out


def split_config(values: dict) -> tuple[dict, dict]:
    """Route flat keys to ``TrainConfig`` and ``ModelConfig`` fields."""
    tkeys = {f.name for f in fields(TrainConfig)}
    mkeys = {f.name for f in fields(ModelConfig)}
    unknown = set(values) - tkeys - mkeys
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    train = {k: v for k, v in values.items() if k in tkeys}
    model = {k: v for k, v in values.items() if k in mkeys and k not in tkeys}
    return train, model


# optimiser --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[tn.Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise tn.DimensionError(f"grad {g.shape} vs param {p.data.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)
    return state


def compute_class_weights(label_counts, mode: str = "inverse_freq") -> np.ndarray:
    """Per-class loss weights; the last class is neutral.

    ``inverse_freq`` gives ``1 / max(count, 1)`` scaled to mean 1;
    ``neutral_zero`` does the same and then zeroes the neutral weight;
    ``uniform`` is all ones.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be >= 0")
    if counts.sum() == 0:
        raise ValueError("all class counts are zero")
    if mode == "uniform":
        return np.ones_like(counts)
    if mode not in ("inverse_freq", "neutral_zero"):
        raise ValueError(f"unknown class weight mode {mode!r}")
    w = 1.0 / np.maximum(counts, 1.0)
    w = w / w.mean()
    if mode == "neutral_zero":
        w[-1] = 0.0
    return w


# training ---------------------------------------------------------------------------

@dataclass
class Sample:
    x: np.ndarray
    spot: np.ndarray
    recog: np.ndarray
    video_id: str = ""


def make_samples(flows: Sequence[FlowSequence], labels: Sequence[LabelSet], n_emotions: int,
                 dtype="float64") -> list[Sample]:
    out = []
    for seq, ls in zip(flows, labels):
        if seq.video_id != ls.video_id:
            raise ValidationError(f"flow {seq.video_id} paired with labels {ls.video_id}")
        spot, recog = encode_targets(ls, seq.T, n_emotions)
        out.append(Sample(seq.channels_first().astype(dtype), spot, recog, seq.video_id))
    return out


def class_counts(samples: Sequence[Sample], n_classes: int) -> np.ndarray:
    return sum(np.bincount(s.recog, minlength=n_classes) for s in samples)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    spot_loss: float
    recog_loss: float
    grad_norm: float


def sample_loss(model, sample: Sample, weights, cfg: TrainConfig):
    spot, recog = model(sample.x)
    ls = tn.mse_loss(spot, sample.spot)
    lr_ = tn.weighted_ce_loss(recog, sample.recog, weights)
    total = tn.add(tn.mul(ls, cfg.lambda_spot), tn.mul(lr_, cfg.lambda_recog))
    return total, ls.item(), lr_.item()


def _first_nan(named) -> str | None:
    for name, p in named:
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name
    return None


def train_epoch(model, samples: Sequence[Sample], cfg: TrainConfig, weights, state: AdamState,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    """One pass over ``samples`` in a seeded random order, one video per step."""
    model.train()
    named = list(model.named_parameters())
    params = [p for _, p in named]
    totals = np.zeros(3)
    norms = []
    for k in rng.permutation(len(samples)):
        model.zero_grad()
        loss, ls, lr_ = sample_loss(model, samples[k], weights, cfg)
        if not np.isfinite(loss.item()):
            bad = _first_nan(named) or "<loss>"
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss on {samples[k].video_id}; "
                                   f"first non-finite parameter: {bad}")
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        gn = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
        if not np.isfinite(gn):
            raise TrainingDiverged(f"epoch {epoch}: non-finite gradient in {_first_nan(named)}")
        if cfg.grad_clip and gn > cfg.grad_clip:
            grads = [g * (cfg.grad_clip / gn) for g in grads]
        adam_step(params, grads, state, cfg.lr)
        totals += (loss.item(), ls, lr_)
        norms.append(gn)
    totals /= len(samples)
    return EpochStats(epoch, *totals, float(np.mean(norms)))


@dataclass
class FitResult:
    model: object
    history: list[EpochStats]
    weights: np.ndarray


def fit(flows, labels, model_cfg: ModelConfig, cfg: TrainConfig, callback=None) -> FitResult:
    """Build and train a model; ``callback(stats)`` runs after each epoch."""
    model = build_model(model_cfg)
    samples = make_samples(flows, labels, model_cfg.n_emotions, model_cfg.dtype)
    if samples and samples[0].x.shape[0] != model_cfg.c_in:
        raise ValidationError(
            f"data has {samples[0].x.shape[0]} channels but the model expects c_in={model_cfg.c_in}")
    if cfg.class_weights is not None:
        weights = np.asarray(cfg.class_weights, dtype=np.float64)
        if weights.shape != (model_cfg.n_classes,):
            raise ValidationError(f"class_weights needs {model_cfg.n_classes} entries")
    else:
        weights = compute_class_weights(class_counts(samples, model_cfg.n_classes),
                                        cfg.class_weight_mode)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, samples, cfg, weights, state, rng, epoch)
        history.append(stats)
        log.info("epoch %d loss %.5f spot %.5f recog %.5f |g| %.3f", epoch, stats.loss,
                 stats.spot_loss, stats.recog_loss, stats.grad_norm)
        if callback:
            callback(stats)
    model.eval()
    return FitResult(model, history, weights)


# LOSO -----------------------------------------------------------------------------------

@dataclass
class Fold:
    subject: str
    train: list[str]
    test: list[str]


@dataclass
class LosoPlan:
    folds: list[Fold]


def loso_split(videos: Sequence[tuple[str, str]]) -> LosoPlan:
    """One fold per subject from ``(video_id, subject_id)`` pairs."""
    subjects = sorted({s for _, s in videos})
    if len(subjects) < 2:
        raise ValidationError("leave-one-subject-out needs at least two subjects")
    folds = []
    for s in subjects:
        test = [v for v, sv in videos if sv == s]
        train = [v for v, sv in videos if sv != s]
        folds.append(Fold(s, train, test))
    return LosoPlan(folds)
