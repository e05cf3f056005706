"""
Posterior predictive check on leaf affinities
=============================================

Each posterior draw simulates a replicate tree set; the proportion of
sampled leaves in each affinity bin is compared with the observed set. On
well-specified data the observed proportions should look like a typical
replicate.
"""

import argparse

import numpy as np

from gcfit import model as m
from gcfit import studies
from gcfit.infer import run_chain
from gcfit.ppc import posterior_predictive

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=6000)
ap.add_argument("--draws", type=int, default=100)
args = ap.parse_args()

cfg = studies.get_study("nm", iterations=args.iterations, burn_in=args.iterations // 4)
space = m.load_type_space()
observed, _ = studies.simulate_set(cfg, 7, space)
chain = run_chain(observed, m.PriorSpec.default(), cfg.chain_config(7), base=cfg.inference_base(), space=space)

report = posterior_predictive(chain, cfg.inference_base(), observed, cfg.sim_options(space), space, n_draws=args.draws, seed=8)
lo, hi = np.quantile(report.replicate_props, [0.05, 0.95], axis=0)
print(" bin   observed    5%      95%    quantile")
for k in range(len(space)):
    print(f"{k:4d}   {report.observed_props[k]:.4f}   {lo[k]:.4f}  {hi[k]:.4f}   {report.quantiles[k]:.2f}")
print("inside the central 90%:", int(report.within_central(0.9).sum()), "of", len(space))
