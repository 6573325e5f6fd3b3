"""
Deterministic robustness conditions for ensembles
=================================================

For a beta-smooth ensemble, gradient norms and margins at x0 decide whether
the prediction is constant on a ball of radius r.
"""

import numpy as np

from robust_ensembles import ensemble as ens, model
from robust_ensembles.numstats import RngStream

rng = RngStream(3)
members = [model.init_random(2, [16], 3, rng.fork(i)) for i in range(2)]
weights = [0.5, 0.5]
x0 = np.array([0.3, -0.2])
y0 = int(ens.we_predict(ens.EnsembleSpec.weighted(members, weights), x0))

# beta is an assumption about the members; smoothed members satisfy 2/sigma^2
beta = 2 / 0.5 ** 2
for r in (0.001, 0.01, 0.05, 0.2):
    verdict = ens.check_we_robustness(members, weights, x0, y0, r, beta)
    print(f"r={r:<6} WE {verdict.status:<16} MME {ens.check_mme_robustness(members, x0, y0, r, beta).status}")

print("largest WE radius the condition certifies:", ens.max_certified_radius_we(members, weights, x0, y0, beta))
print(ens.eri_we(members, weights, x0, y0, 0.01))

# closed-form lower bound on the ensemble radius for two members
bound = ens.ensemble_radius_bound(members, weights, x0, y0, 0.01, delta=0.1, cos_theta=0.0, protocol=ens.WE)
print(bound)

# best weights on a coarse simplex grid
xs = RngStream(4).standard_normal((50, 2))
ys = np.array([ens.we_predict(ens.EnsembleSpec.weighted(members, weights), x) for x in xs])
print("grid weights:", ens.optimal_weights_grid(members, xs, ys, step=0.25))
