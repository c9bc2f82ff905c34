"""Fixtures shared by the CLI and acceptance tests."""
import numpy as np

from metst import tensor as tn
from metst.data import SyntheticSpec, generate_synthetic, label_record
from metst.tensor import Tensor


def synergy_fixture(n_videos=12, T=768, seed=5, miss_every=40):
    """Prediction records that mimic a spotter which also fires on eye blinks.

    Every ground-truth ME becomes a prediction with its true class. Every
    blink distractor becomes a prediction whose modal class is neutral, as a
    recognizer that learned blinks are not expressions would report. In
    addition every ``miss_every``-th true ME is also called neutral, so the
    synergy filter costs a little recall as well as saving precision.

    Returns ``(records, labels, n_emotions)``.
    """
    spec = SyntheticSpec(n_videos=n_videos, T=T, seed=seed, blink_rate=0.15)
    flows, labels = generate_synthetic(spec)
    neutral = spec.emotion_count
    records, k = [], 0
    for ls in labels:
        for iv in ls.intervals:
            modal = neutral if k % miss_every == 0 else iv.emotion
            k += 1
            records.append(label_record(ls.video_id, ls.subject_id, iv, peak_score=0.9,
                                        modal_class=modal))
        for b in ls.distractors:
            rec = label_record(ls.video_id, ls.subject_id, b, peak_score=0.7,
                               modal_class=neutral)
            rec.update(kind="ME", emotion=0)
            records.append(rec)
    return records, {ls.video_id: ls for ls in labels}, neutral


def P(a):
    return tn.parameter(np.asarray(a, dtype=np.float64))


def proj_loss(y, r):
    """Scalar random projection of ``y`` so every output entry gets a distinct adjoint."""
    return tn.tsum(tn.mul(y, Tensor(r)))


def op_cases(rng, C, T):
    """Closures covering every differentiable op, with their parameters."""
    x = P(rng.normal(size=(C, T)))
    y = P(rng.normal(size=(C, T)))
    pos = P(rng.uniform(0.5, 2.0, size=(C, T)))
    W, b = P(rng.normal(size=(3, C))), P(rng.normal(size=3))
    K, kb = P(rng.normal(size=(2, C, 3))), P(rng.normal(size=2))
    dw, db = P(rng.normal(size=(C, 4))), P(rng.normal(size=C))
    gam, bet = P(rng.uniform(0.5, 1.5, size=C)), P(rng.normal(size=C))
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    rCT, r3T, r2T = r(C, T), r(3, T), r(2, T)
    rTC, rC2T = r(T, C), r(C, 2 * T)
    rpad = r(C, T + 1)
    rstride = r(2, (T + 2 - 3) // 2 + 1)
    labels = rng.integers(0, C, size=T)
    wts = rng.uniform(0.2, 2.0, size=C)
    tgt = rng.uniform(0, 1, size=T)
    return {
        "add": (lambda: proj_loss(tn.add(x, y), rCT), [x, y]),
        "sub": (lambda: proj_loss(tn.sub(x, y), rCT), [x, y]),
        "mul": (lambda: proj_loss(tn.mul(x, y), rCT), [x, y]),
        "scale": (lambda: proj_loss(tn.mul(x, -1.7), rCT), [x]),
        "exp": (lambda: proj_loss(tn.exp(tn.mul(x, 0.5)), rCT), [x]),
        "relu": (lambda: proj_loss(tn.relu(x), rCT), [x]),
        "silu": (lambda: proj_loss(tn.silu(x), rCT), [x]),
        "sigmoid": (lambda: proj_loss(tn.sigmoid(x), rCT), [x]),
        "softplus": (lambda: proj_loss(tn.softplus(x), rCT), [x]),
        "softmax": (lambda: proj_loss(tn.softmax(x, axis=0), rCT), [x]),
        "index": (lambda: proj_loss(x[:, 1:], rCT[:, 1:]), [x]),
        "concat": (lambda: proj_loss(tn.concat([x, y], axis=1), rC2T), [x, y]),
        "transpose": (lambda: proj_loss(tn.transpose(x), rTC), [x]),
        "reshape": (lambda: proj_loss(tn.reshape(x, (T, C)), rTC), [x]),
        "pad_edge": (lambda: proj_loss(tn.pad_edge(x, 1), rpad), [x]),
        "upsample": (lambda: proj_loss(tn.upsample_nearest(x, 2), rC2T), [x]),
        "linear": (lambda: proj_loss(tn.linear(x, W, b), r3T), [x, W, b]),
        "conv1d": (lambda: proj_loss(tn.conv1d(x, K, kb), r2T), [x, K, kb]),
        "conv1d_stride": (lambda: proj_loss(tn.conv1d(x, K, kb, stride=2, padding=1), rstride), [x, K, kb]),
        "causal_dw": (lambda: proj_loss(tn.causal_depthwise_conv1d(x, dw, db), rCT), [x, dw, db]),
        "batchnorm": (lambda: proj_loss(tn.batchnorm1d(x, gam, bet), rCT), [x, gam, bet]),
        "rms_norm": (lambda: proj_loss(tn.rms_norm(x, gam), rCT), [x, gam]),
        "mse": (lambda: tn.mse_loss(tn.sigmoid(x[0]), tgt), [x]),
        "weighted_ce": (lambda: tn.weighted_ce_loss(tn.transpose(tn.softmax(x, axis=0)), labels, wts), [x]),
        "log_free_ce": (lambda: tn.weighted_ce_loss(tn.transpose(tn.mul(pos, 1.0 / (C * 2.0))),
                                                   labels, wts), [pos]),
    }


# acceptance bookkeeping: one line per criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok
