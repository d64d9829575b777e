"""Fisher information on small hand-checkable cases.

Runs in a few seconds:  python3 demos/fisher_oracles.py
"""
import numpy as np

from shapetime import fisher, network as nw
from shapetime.network import NetArch, init_params

# %% Isserlis: Var(r^T A r) for r ~ N(0, S) is 2 tr((A S)^2)
S = np.array([[1.0, 0.3], [0.3, 0.5]])
A = np.array([[2.0, -0.4], [-0.4, 1.0]])
analytic, mc, se = fisher.isserlis_check(S, A, 10**6, seed=0)
print(f"Isserlis  analytic {analytic:.4f}  MC {mc:.4f} +- {se:.4f}")

# %% a small random field (untrained weights, random covariance head)
arch = NetArch("field", hidden_layers=2, hidden_width=16, num_frequencies=2,
               cov_hidden_layers=1, cov_hidden_width=8)
params = init_params(arch, seed=1)
rng = np.random.default_rng(1)
params.weights[:] += rng.normal(scale=0.3, size=arch.n_weights)

p, t = np.array([0.3, -0.2]), 0.6
rep = fisher.fisher_full(params, p, t)
print(f"closed form  I_mu {rep.I_mu:.4f}  I_Sigma {rep.I_sigma:.4f}  I {rep.I_full:.4f}")

# %% the same quantity as the variance of a Monte Carlo score
mc = fisher.mc_fisher(params, p, t, 10**6, seed=2)
print(f"Monte Carlo  I {mc.mc_I:.4f} +- {mc.mc_I_se:.4f}")
print(f"score mean {mc.score_mean:.2e} (SE {mc.score_mean_se:.1e}), "
      f"linear/quadratic covariance {mc.cross_cov:.2e} (SE {mc.cross_cov_se:.1e})")

# %% temporal uncertainty along t at one point
for tt in np.linspace(0, 1, 6):
    s = np.sqrt(fisher.temporal_uncertainty(params, p, tt))
    mu, _ = nw.forward_field(params, p, tt)
    print(f"t {tt:.1f}  mu {mu.round(3)}  sigma_tau {s:.4f}")
