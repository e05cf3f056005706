"""
Likelihood against closed forms
===============================

With a single type the non-observation probability and the density of a
sampled lineage have closed forms. Here we solve the ODE route, evaluate
both likelihood routes on a multitype tree, and watch the approximate
likelihood drift away from the exact one as type changes speed up.
"""

import math

import numpy as np

from gcfit import model as m
from gcfit.likelihood import log_density, solve_px

# single type: lambda = 1.8, mu = 1, rho = 1
lam, mu, rho = 1.8, 1.0, 1.0
params, space = m.single_type(lam, mu, rho)
sol = solve_px(params, space, 15.0)

r = lam - mu
t = np.linspace(0, 15, 7)
closed = 1 - rho * r / (rho * lam + (lam * (1 - rho) - mu) * np.exp(-r * t))
print("t      ODE p(t)        closed form")
for ti, a, b in zip(t, sol.p(t, 0), closed):
    print(f"{ti:5.1f}  {a:.12f}  {b:.12f}")

# multitype: the two exact routes and the approximation on a simulated tree
from gcfit.simulate import SimOptions, simulate_conditioned

space = m.load_type_space()
truth = m.Params(m.SigmoidParams(1.3, 1.0, -1.1, 0.5), 0.5, 20.0, m.load_gamma(), rho=(0.1,))
tree, _ = simulate_conditioned(truth, space, SimOptions(t_total=15.0, root_state=4), rng=np.random.default_rng(1))
print(f"\ntree with {len(tree.leaves('sampled_leaf'))} sampled leaves and {len(tree)} nodes")
for mode in ("loglinear", "direct", "approx"):
    res = log_density(tree, truth, space, mode)
    print(f"{mode:10s} log q = {res.log_q_root:.8f}  conditioned = {res.log_conditional:.8f}")

# the approximation ignores unobserved type changes, so its error grows with delta
print("\ndelta  |approx - exact|")
for delta in (0.1, 1.0, 5.0, 20.0):
    p = truth.with_values(delta=delta)
    gap = abs(log_density(tree, p, space, "approx").log_conditional - log_density(tree, p, space).log_conditional)
    print(f"{delta:5.1f}  {gap:.4f}")
