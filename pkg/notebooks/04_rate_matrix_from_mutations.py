"""
Type-change rates from sequence mutations
=========================================

Affinity bins change because the underlying sequence mutates. We run the
context-dependent mutation process on the (synthetic) naive sequence with
no births or deaths, map every visited sequence to its affinity bin, and
estimate the bin-to-bin rates by transitions over dwell time. The bundled
matrix is printed alongside for comparison of magnitudes.
"""

import numpy as np

from gcfit import model as m
from gcfit import seqmut as sm

naive, affinity, context = sm.load_synthetic_models(convention="sequence", overall_rate=1.0)
space = m.load_type_space()
rng = np.random.default_rng(2024)

chains = [sm.mutate_chain(naive, context, 200.0, rng) for _ in range(100)]
print("mutations per chain:", np.mean([len(c.mutations) for c in chains]))

paths = [sm.chain_bin_path(c, affinity, space) for c in chains]
gamma, counts, dwell = sm.gamma_mle(paths, len(space), allow_unvisited=True)

np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("\ndwell time per bin:", dwell)
print("\nestimated rates x 1000:\n", gamma * 1000)
print("\nbundled rates x 1000:\n", m.load_gamma() * 1000)
