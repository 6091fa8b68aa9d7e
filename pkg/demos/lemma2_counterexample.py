"""A two-cell distribution where the MSE transfer bound fails.

There is one object value, so P(y | obj) is trivially shared. Within it, the
background decides the label, and the two domains swap which background
goes with which label. A predictor that reads the background is perfect in
the source and always wrong in the target, while every quantity on the
right-hand side of the bound is zero.
"""

import numpy as np

from align.theory import ToyDistribution, check_lemma2, run_lemma2

source = np.zeros((1, 2, 2))
source[0, 0, 1] = source[0, 1, 0] = 0.5   # bg 0 -> y=+1, bg 1 -> y=-1
target = np.zeros((1, 2, 2))
target[0, 0, 0] = target[0, 1, 1] = 0.5   # roles swapped

dist = ToyDistribution([-1.0, 1.0], source, target)
report = check_lemma2(dist, np.array([[1.0, -1.0]]))
print("conditional gap P(y|obj):", dist.conditional_gap())
print("delta MSE:", report.details["delta_mse"], " bound:", report.details["bound"])
print("violation:", bool(report.violations))

batch = run_lemma2(200, seed=0)
print(f"\nrandom constructions: {batch.violations}/{batch.trials} outside the bound, "
      f"max excess {batch.details['max_excess_over_bound']:.3f}")
