"""
From score curves to scores
===========================

The networks emit a per-frame spotting score and per-frame class
probabilities. This demo follows one hand-made curve through peak picking,
interval matching and the final metrics, then reproduces a pair of published
count-level results and shows what result-level synergy does to blinks.

Run with ``python demos/02_spotting_metrics.py``.
"""
import numpy as np

from metst import analysis as an
from metst.data import ExpressionInterval

# A spotting curve with three bumps. The first two are real expressions,
# the third is an eye blink the spotter also reacts to.
T = 200
t = np.arange(T)
spot = (0.9 * np.exp(-0.5 * ((t - 40) / 3) ** 2) + 0.8 * np.exp(-0.5 * ((t - 110) / 4) ** 2)
        + 0.7 * np.exp(-0.5 * ((t - 165) / 3) ** 2))

# Class probabilities (negative, positive, surprise, neutral): the recognizer
# is confident about the two expressions and calls the blink neutral.
recog = np.tile([0.1, 0.1, 0.1, 0.7], (T, 1))
recog[30:50] = [0.7, 0.1, 0.1, 0.1]
recog[100:120] = [0.1, 0.1, 0.7, 0.1]

params = an.PeakParams.for_fps(30)
print("peak picking:", params)
cands = an.make_candidates(spot, recog, params)
for c in cands:
    iv = c.interval
    print(f"  apex {iv.apex:3d}  interval [{iv.onset}, {iv.offset}]  score {c.peak_score:.2f}"
          f"  modal class {c.modal_class}")

gts = [ExpressionInterval(34, 40, 47, emotion=0), ExpressionInterval(103, 110, 118, emotion=2)]

# Without synergy every candidate counts; with it, neutral-modal ones are dropped.
for mode in ("off", "on"):
    preds = an.synergy_filter(cands, mode)
    rep = an.evaluate({"clip": preds}, {"clip": gts}, n_emotions=3)
    s = rep.spotting
    print(f"synergy {mode:3s}: TP={s['TP']} FP={s['FP']} FN={s['FN']}  P={s['precision']:.3f} "
          f"R={s['recall']:.3f} F1={s['f1']:.3f}  STRS={rep.strs:.3f}")

# Matching is one-to-one at IoU > 0.5. Two predictions covering the same
# expression yield one hit and one false positive.
g = [ExpressionInterval(10, 15, 20)]
p = [an.PredictedInterval(10, 15, 20, peak_score=0.9), an.PredictedInterval(11, 15, 21, peak_score=0.8)]
tp, fp, fn = an.match_intervals(p, g)
print(f"duplicate detections: {len(tp)} TP, {len(fp)} FP, {len(fn)} FN "
      f"(IoU of the second = {an.interval_iou(p[1], g[0]):.3f})")

# Count-level arithmetic from two published rows: pooled counts to P, R, F1,
# then the combined spotting-then-recognition score.
for (tp_, fp_, fn_), f1_recog in [((76, 733, 782), 0.5338), ((52, 171, 107), 0.6787)]:
    s = an.report_from_counts(tp_, fp_, fn_).spotting
    print(f"TP={tp_:3d} FP={fp_:3d} FN={fn_:3d} -> P={s['precision']:.4f} R={s['recall']:.4f} "
          f"F1={s['f1']:.4f}, STRS={an.strs(round(s['f1'], 4), f1_recog):.4f}")
