"""
Why plain accuracy misleads on imbalanced engagement data
=========================================================

With class proportions like 346 : 2208 : 8469 : 1170, a model that always
answers "engaged" is right 69% of the time while understanding nothing.
This script contrasts accuracy with average per-class recall on exactly
that failure, then measures scorer-vs-scorer consistency with the
intraclass correlation used for inter-rater agreement.
"""

import numpy as np

from engagerank import metrics

rng = np.random.default_rng(11)

# ---------------------------------------------------------------------------
# 1. The majority-class trap
# ---------------------------------------------------------------------------
proportions = np.array([346, 2208, 8469, 1170], dtype=float)
n = 2000
labels = rng.choice(4, size=n, p=proportions / proportions.sum())

always_eg = np.full(n, 2)
report = metrics.accuracy_metrics(metrics.confusion_matrix(always_eg, labels))
print("always-predict-EG   acc={:.3f}  avg_acc={:.3f}  recall={}".format(
    report.acc, report.avg_acc, np.round(report.recall, 2)))
# Three of the four recalls are zero, so average recall exposes the trick.
np.testing.assert_allclose(report.avg_acc, report.recall.mean())
assert report.avg_acc == 0.25

# A deliberately crude model: right half the time on every class, wrong
# answers spread uniformly.  Lower accuracy than the trap, far higher
# average recall.
crude = np.where(rng.random(n) < 0.5, labels, rng.choice(4, size=n))
report2 = metrics.accuracy_metrics(metrics.confusion_matrix(crude, labels))
print("uniform-50% model   acc={:.3f}  avg_acc={:.3f}  recall={}".format(
    report2.acc, report2.avg_acc, np.round(report2.recall, 2)))
assert report2.acc < report.acc and report2.avg_acc > report.avg_acc

# ---------------------------------------------------------------------------
# 2. Reading a report
# ---------------------------------------------------------------------------
# avg_acc is the mean of per-class recalls over populated classes only, so
# a test split that happens to miss a class does not poison the metric.
conf = metrics.confusion_matrix([0, 0, 1, 2], [0, 0, 1, 1])
part = metrics.accuracy_metrics(conf)
print("\ntwo absent classes: recalls =", part.recall, "avg_acc =", part.avg_acc)
assert np.isnan(part.recall[2]) and np.isnan(part.recall[3])
np.testing.assert_allclose(part.avg_acc, (1.0 + 0.5) / 2)

# ---------------------------------------------------------------------------
# 3. Agreement between scorers: ICC(2,1)
# ---------------------------------------------------------------------------
# Each row is one clip, each column one rater (or one model).  Perfect
# agreement scores 1; independent answers score near 0.
truth = rng.integers(0, 4, size=40)
raters = np.stack([
    truth,
    np.clip(truth + (rng.random(40) < 0.25) * rng.choice([-1, 1], 40), 0, 3),
    np.clip(truth + (rng.random(40) < 0.25) * rng.choice([-1, 1], 40), 0, 3),
], axis=1)
print("\nthree raters, ~25% one-step disagreement: ICC(2,1) = "
      f"{metrics.icc_2_1(raters):.3f}")

noise_raters = rng.integers(0, 4, size=(40, 3))
print(f"three unrelated raters:                    ICC(2,1) = "
      f"{metrics.icc_2_1(noise_raters):.3f}")

identical = np.tile(truth[:, None], (1, 3))
np.testing.assert_allclose(metrics.icc_2_1(identical), 1.0)
print("identical raters:                          ICC(2,1) = 1.000")

# The same statistic accepts a RatingMatrix wrapper, which validates shape.
wrapped = metrics.RatingMatrix(raters.astype(float))
np.testing.assert_allclose(metrics.icc_2_1(wrapped), metrics.icc_2_1(raters))
