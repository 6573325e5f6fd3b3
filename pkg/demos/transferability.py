"""
When does MME beat WE?
======================

Uniform true-class confidences, statistical margins and the
lambda1/lambda2 transferability ratio.
"""

import numpy as np

from robust_ensembles import statsim

cfg = statsim.SimulationConfig(n=10, trials=300, inner_draws=5000, seed=0)
result = statsim.simulate_transferability(cfg)
d = result.diffs
print(f"spearman(lambda ratio, radius_MME - radius_WE) = {result.spearman():.3f}")
print(f"share of trials with identical radii: {np.mean(d == 0):.2f}")

# closed-form bounds and the ratio thresholds between them
mm = statsim.MarginModel(statsim.Uniform(0.6, 1.0), lambda1=0.6, lambda2=1.0, n=10)
print("WE bound", statsim.bound_we(mm).best.value, " MME bound", statsim.bound_mme(mm).value)
th = statsim.comparison_thresholds(mm)
print(f"WE higher below ratio {th.we_higher_threshold:.3f}, MME higher above {th.mme_higher_threshold:.3f}")
print(f"ensemble size above which MME always wins: {statsim.n_threshold(0.8, 1.0):.2f}")

for row in statsim.bound_sweep(0.6, 1.0, 1.0, [0.2, 0.6, 1.0], [3, 41]):
    print({k: round(row[k], 4) for k in ("n", "lambda1", "bound_we", "bound_mme")})
