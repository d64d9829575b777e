"""Starman(G) end to end at a reduced size.

Generates a small population, fits the field and the encoder, then estimates
intrinsic time, compares the model's temporal uncertainty against the
generator, forecasts one subject and scores synthetic anomalies.
Takes a few minutes on one core:  python3 demos/starman_walkthrough.py [out_dir]
"""
import sys

import numpy as np

from shapetime import analysis as an, fisher, plots, starman
from shapetime.gaussian_field import TrainConfig, train
from shapetime.inverse_encoder import InverseConfig, train_inverse

out = sys.argv[1] if len(sys.argv) > 1 else "."

# %% data: 300 subjects per split, 1 to 9 observations each
cfg = starman.StarmanConfig("G", n_train_subjects=300, n_test_subjects=300)
data = starman.generate(cfg)
print(f"train {data.train.n_shapes} shapes, test {data.test.n_shapes} shapes")

# %% field: L1 warm-up then Gaussian NLL
params, log = train(data.train, TrainConfig(epochs=30, warm_epochs=5))
print("last epoch", log.rows[-1])

# %% encoder g(p, d) -> tau from noiseless triplets of the mean field
inv, _ = train_inverse(params, starman.template(cfg), InverseConfig(steps=2000))

# %% global intrinsic time per shape
times = an.evaluate_time_estimation(data.test, params, inv)
print("mean estimate    ", an.scalar_metrics(times.tau_mean, times.tau_gt))
print("weighted estimate", an.scalar_metrics(times.tau_weighted, times.tau_gt))

# %% temporal uncertainty at the right arm tip vs the generator
tip = starman.control_points(cfg)[0]
grid = np.linspace(0.0, 1.0, 41)
I_mu, _, _ = fisher.fisher_terms(params, np.tile(tip, (len(grid), 1)), grid)
est = 1 / np.sqrt(I_mu)
true = starman.sigma_tau(grid, cfg.sigma_params_global)
for k in range(0, 41, 8):
    print(f"t {grid[k]:.2f}  true {true[k]:.4f}  model {est[k]:.4f}")
plots.sigma_bands(f"{out}/demo_sigma.svg", grid, {"right arm tip": (true, est)},
                  title="temporal uncertainty")

# %% forecast one subject from its first observation
lr = an.evaluate_longitudinal(data.test, params, times)
print(f"{len(lr.pairs)} forecast pairs, mean Chamfer x100 {100 * lr.CD.mean():.3f}")

# %% one limb lagging by 0.3 should look anomalous
ood = starman.make_synthetic_ood(cfg, 0.3)
times_ood = an.evaluate_time_estimation(ood, params, inv)
auc = an.ood_auc(an.shape_ood_scores(times), an.shape_ood_scores(times_ood))
print(f"OOD AUC {auc:.3f}")
