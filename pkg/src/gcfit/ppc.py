"""Posterior predictive replication, leaf-affinity diagnostics, and the
sampling distribution of posterior medians across repeated simulate/infer
runs."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .infer import ChainConfig, Chain, run_chain
from .model import Params, PriorSpec, TypeSpace, single_type
from .simulate import SimOptions, simulate_conditioned
from .tree import Tree

log = logging.getLogger(__name__)


def child_seeds(master: int, n: int) -> list[int]:
    """Independent task seeds derived from a master seed by counter."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


def replicate_dataset(
    draw: Params,
    n_trees: int,
    opts: SimOptions,
    space: TypeSpace,
    rng: np.random.Generator,
    rho_indices: Sequence[int] | None = None,
) -> list[Tree]:
    """``n_trees`` survival-conditioned observed trees under ``draw``. Tree
    ``i`` uses ``draw.rho[rho_indices[i]]`` (default: the first ρ)."""
    if rho_indices is None:
        rho_indices = [0] * n_trees
    if len(rho_indices) != n_trees:
        raise ValueError("need one rho index per tree")
    return [
        simulate_conditioned(draw, space, opts, rng=rng, rho_index=r)[0] for r in rho_indices
    ]


def leaf_proportions(trees: Sequence[Tree], n_types: int) -> np.ndarray:
    """Fraction of sampled leaves in each type, pooled over trees."""
    counts = np.zeros(n_types)
    for t in trees:
        for leaf in t.leaves("sampled_leaf"):
            counts[leaf.state] += 1
    total = counts.sum()
    return counts / total if total else counts


@dataclass
class PpcReport:
    """Replicate leaf proportions (``replicates x types``) with the observed
    proportions and each observation's quantile within its replicate
    distribution (mid-rank for ties)."""

    replicate_props: np.ndarray
    observed_props: np.ndarray
    quantiles: np.ndarray
    tree_sizes: np.ndarray  # (replicates, trees) sampled-leaf counts

    @property
    def n_types(self) -> int:
        return self.observed_props.size

    def within_central(self, level: float = 0.9) -> np.ndarray:
        """Whether each observed proportion lies in the central ``level``
        interval of its replicate distribution."""
        lo, hi = np.quantile(self.replicate_props, [(1 - level) / 2, (1 + level) / 2], axis=0)
        return (self.observed_props >= lo) & (self.observed_props <= hi)

    def histograms(self, bins: int = 20) -> list[dict]:
        edges = np.linspace(0.0, 1.0, bins + 1)
        return [
            {
                "type": k,
                "edges": edges.tolist(),
                "counts": np.histogram(self.replicate_props[:, k], edges)[0].tolist(),
                "observed": float(self.observed_props[k]),
            }
            for k in range(self.n_types)
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replicate", *(f"type_{k}" for k in range(self.n_types))])
            w.writerow(["observed", *(repr(float(v)) for v in self.observed_props)])
            for r, row in enumerate(self.replicate_props):
                w.writerow([r, *(repr(float(v)) for v in row)])

    def to_json(self) -> str:
        return json.dumps(
            {
                "observed": self.observed_props.tolist(),
                "quantiles": self.quantiles.tolist(),
                "within_central_90": self.within_central(0.9).tolist(),
                "mean_tree_size": float(self.tree_sizes.mean()) if self.tree_sizes.size else None,
                "histograms": self.histograms(),
            },
            indent=2,
        )


def ppc_stats(
    replicates: Sequence[Sequence[Tree]], observed: Sequence[Tree], n_types: int
) -> PpcReport:
    """Pool leaf proportions per replicate and locate the observed values."""
    if not replicates:
        raise ValueError("need at least one replicate")
    reps = np.array([leaf_proportions(r, n_types) for r in replicates])
    obs = leaf_proportions(observed, n_types)
    below = (reps < obs).sum(axis=0)
    ties = (reps == obs).sum(axis=0)
    q = (below + 0.5 * ties) / reps.shape[0]
    sizes = np.array(
        [[len(t.leaves("sampled_leaf")) for t in r] for r in replicates], dtype=object
    )
    try:
        sizes = sizes.astype(int)
    except (TypeError, ValueError):
        pass
    return PpcReport(reps, obs, q, sizes)


def posterior_predictive(
    chain: Chain,
    base: Params,
    observed: Sequence[Tree],
    opts: SimOptions,
    space: TypeSpace,
    n_draws: int | None = None,
    n_trees: int | None = None,
    seed: int = 0,
) -> PpcReport:
    """One replicate set per (evenly thinned) posterior draw."""
    idx = np.arange(len(chain))
    if n_draws is not None and n_draws < idx.size:
        idx = np.unique(np.linspace(0, idx.size - 1, n_draws).round().astype(int))
    n_trees = len(observed) if n_trees is None else n_trees
    rho_idx = [t.rho_index for t in observed] if n_trees == len(observed) else None
    seeds = child_seeds(seed, idx.size)
    reps = [
        replicate_dataset(
            chain.params(i, base), n_trees, opts, space, np.random.default_rng(s), rho_idx
        )
        for i, s in zip(idx, seeds)
    ]
    return ppc_stats(reps, observed, len(space))


# -- sampling distribution of posterior medians ---------------------------------


@dataclass(frozen=True)
class MedianStudy:
    """Repeated simulate-then-infer runs of the two-parameter constant-rate
    model under conditioned and unconditioned likelihoods."""

    lam: float = 1.8
    mu: float = 1.0
    rho: float = 1.0
    t_total: float = 5.0
    ladder: tuple[int, ...] = (1, 5, 25)
    replicates: int = 20
    iterations: int = 3000
    burn_in: int = 1000
    thin: int = 2
    seed: int = 0
    mode: str = "approx"
    threads: int = 1
    priors: PriorSpec = field(default_factory=PriorSpec.constant_rate)


def _median_task(args):
    study, n, rep, seed = args
    base, space = single_type(study.lam, study.mu, study.rho)
    rng = np.random.default_rng(seed)
    opts = SimOptions(t_total=study.t_total, root_state=0)
    rows = []
    try:
        trees = [simulate_conditioned(base, space, opts, rng=rng)[0] for _ in range(n)]
        for conditional in (True, False):
            cfg = ChainConfig(
                iterations=study.iterations,
                burn_in=study.burn_in,
                thin=study.thin,
                seed=seed + int(conditional),
                mode=study.mode,
                conditional=conditional,
            )
            chain = run_chain(trees, study.priors, cfg, base=base, space=space)
            rows.append(
                {
                    "n": n,
                    "replicate": rep,
                    "conditioning": "conditional" if conditional else "unconditional",
                    **{f"median_{k}": float(np.median(chain.column(k))) for k in chain.names},
                    "seed": seed,
                    "status": "ok",
                }
            )
    except Exception as e:  # the study keeps going; failures are recorded
        log.warning("replicate %d at n=%d failed: %s", rep, n, e)
        rows.append(
            {"n": n, "replicate": rep, "conditioning": "", "seed": seed, "status": f"error: {e}"}
        )
    return rows


def median_sampling_distribution(study: MedianStudy = MedianStudy()) -> list[dict]:
    """Per-replicate posterior medians of ``lam`` and ``mu`` for both
    conditioning choices at each tree-set size. Results do not depend on
    ``study.threads``."""
    tasks = []
    seeds = child_seeds(study.seed, len(study.ladder) * study.replicates)
    for i, n in enumerate(study.ladder):
        for rep in range(study.replicates):
            tasks.append((study, n, rep, seeds[i * study.replicates + rep]))
    if study.threads > 1:
        with ProcessPoolExecutor(study.threads) as ex:
            results = list(ex.map(_median_task, tasks))
    else:
        results = [_median_task(t) for t in tasks]
    return [row for rows in results for row in rows]


def median_table_by(rows: Sequence[dict], param: str = "mu") -> dict:
    """``{(n, conditioning): array of per-replicate medians}``, rows in
    replicate order."""
    out: dict = {}
    for r in sorted(rows, key=lambda r: (r["n"], r["replicate"])):
        if r.get("status") != "ok":
            continue
        out.setdefault((r["n"], r["conditioning"]), []).append(r[f"median_{param}"])
    return {k: np.array(v) for k, v in out.items()}


def write_rows(rows: Sequence[dict], path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) and math.isfinite(v) else v) for k, v in r.items()})
