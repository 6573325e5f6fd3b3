"""
Smoothing before or after ensembling
====================================
"""

import math

import numpy as np

from robust_ensembles import model, smoothing as sm
from robust_ensembles.numstats import RngStream

sigma = 1.0
# two members correct with prob 0.85 and 0.80, both correct with prob 0.70
for p in (0.3, 0.5, 0.6, 0.9):
    c = sm.compare_smoothing_strategies(0.85, 0.80, 0.70, p, sigma)
    print(f"p={p}: {c.verdict:<17} r_EBS={c.r_ebs:.3f} r_EAS={c.r_eas:.3f} threshold={c.threshold:.3f}")

# certify one point both ways
rng = RngStream(0)
members = [model.init_random(2, [16], 2, rng.fork(i)) for i in range(2)]
x = np.array([0.5, 0.5])
spec = sm.SmoothingSpec(0.5, n0=100, n=5000)
y = int(np.argmax(sum(m.confidences(x) for m in members)))
print(sm.certify_eas(members, spec, x, y, RngStream(1)))

# the smoothed step Phi(x/sigma) bends most at x = sigma, by 1/(sqrt(2 pi e) sigma^2)
step = lambda pts: (pts[:, 0] > 0).astype(float)
res = sm.smoothness_probe(step, np.array([sigma]), np.array([1.0]), sigma / 10, 2_000_000, sigma, RngStream(2))
print(f"{res.estimate:.3f} +- {res.standard_error:.3f}  vs  {-1 / (math.sqrt(2 * math.pi * math.e) * sigma ** 2):.3f}")
