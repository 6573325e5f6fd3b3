"""
Certifying a small ensemble on two moons
========================================

Train three MLPs with and without the diversity regularizer, then certify
both ensemble protocols with randomized smoothing.
"""

import numpy as np

from robust_ensembles import data, ensemble as ens, model, smoothing as sm, training as tr
from robust_ensembles.numstats import RngStream

full = data.gen_two_moons(400, noise_std=0.1, seed=0)
train_set, test = data.split_and_subsample(full, 0.75, seed=0)
print(len(train_set), "train points,", len(test), "test points")

sigma = 0.5
spec = sm.SmoothingSpec(sigma, n0=100, n=2000, alpha=0.001)
radii = [0.0, 0.25, 0.5, 0.75, 1.0]

for variant, rho1, rho2 in [("none", 0.0, 0.0), ("drt_pairwise", 0.5, 2.0)]:
    root = RngStream(0)
    members = [model.init_random(2, [32, 32], 2, root.fork(1000 + i)) for i in range(3)]
    cfg = tr.TrainingConfig(variant=variant, rho1=rho1, rho2=rho2, sigma=sigma, epochs=40, lr=0.05)
    trained = tr.train(members, train_set, cfg).members

    for name, target in [("WE", ens.EnsembleSpec.weighted(trained)),
                         ("MME", ens.EnsembleSpec.max_margin(trained))]:
        records = sm.certify_many(target, spec, test.features, test.labels, seed=0)
        curve = sm.certified_accuracy_curve(records, radii)
        acc = " ".join(f"{a:.2f}" for a in curve.accuracy)
        print(f"{variant:>13} {name:>3}  acc@{radii}: {acc}  ACR {curve.acr:.3f}")

# a single certificate, unpacked
rec = sm.certify_ebs(ens.EnsembleSpec.weighted(trained), spec, test.features[0], int(test.labels[0]),
                     RngStream(1))
print(rec)
print("radius is sigma * Phi^-1(p_lower):", np.isclose(rec.radius, sm.radius_from_lower_bound(rec.p_lower, sigma)))
