"""Named simulation studies with their ground-truth settings.

Each multitype study simulates ``n_sets`` sets of ``n_trees`` survival
conditioned trees for ``t_total`` time units from the naive-affinity bin,
then samples the posterior of (phi, mu, delta) for every set.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seqmut
from .infer import JOINT_MOVES, Chain, ChainConfig, chain_summary, run_chain
from .model import Params, PriorSpec, SigmoidParams, TypeSpace, bin_index, load_gamma, load_type_space
from .ppc import MedianStudy, child_seeds, median_sampling_distribution, write_rows
from .simulate import Capacity, SimOptions, simulate_conditioned
from .tree import save_trees

log = logging.getLogger(__name__)

NM_PHI = (1.3, 1.0, -1.1, 0.5)
CC_PHI = (2.5, 1.5, -0.1, 0.6)
NAIVE_AFFINITY = 0.0


@dataclass(frozen=True)
class StudyConfig:
    name: str
    phi: tuple[float, float, float, float]
    mu: float
    delta: float | None
    rho: float
    rho_infer: float
    mode: str = "exact"
    capacity: tuple[str, int] | None = None
    generator: str = "multitype"  # or "sequence"
    t_total: float = 15.0
    n_sets: int = 5
    n_trees: int = 58
    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    joint_moves: int = JOINT_MOVES
    seed: int = 0
    threads: int = 1
    mutation_rate: float = 1.0
    rate_convention: str = "sequence"

    def truth(self, space: TypeSpace | None = None) -> Params:
        return Params(
            SigmoidParams(*self.phi),
            self.mu,
            1.0 if self.delta is None else self.delta,
            load_gamma(),
            rho=(self.rho,),
        )

    def sim_options(self, space: TypeSpace) -> SimOptions:
        cap = None if self.capacity is None else Capacity(*self.capacity)
        return SimOptions(
            t_total=self.t_total, root_state=bin_index(space, NAIVE_AFFINITY), capacity=cap
        )

    def chain_config(self, seed: int) -> ChainConfig:
        return ChainConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            joint_moves=self.joint_moves,
            seed=seed,
            mode=self.mode,
        )

    def inference_base(self) -> Params:
        return self.truth().with_values(rho=(self.rho_infer,))


STUDIES: dict[str, StudyConfig] = {
    "nm": StudyConfig("nm", NM_PHI, 0.5, 20.0, 0.1, 0.1),
    "al": StudyConfig("al", NM_PHI, 0.5, 20.0, 0.1, 0.1, mode="approx"),
    "isp": StudyConfig("isp", NM_PHI, 0.5, 20.0, 0.1, 0.2),
    "cc": StudyConfig("cc", CC_PHI, 1.0, 1.0, 0.1, 0.1, capacity=("hard", 1000)),
    "cc-soft": StudyConfig("cc-soft", CC_PHI, 1.0, 1.0, 0.1, 0.1, capacity=("soft", 1000)),
    "cc-slm": StudyConfig(
        "cc-slm", CC_PHI, 1.0, None, 0.1, 0.1, capacity=("hard", 1000), generator="sequence"
    ),
}
CONDITIONING = MedianStudy()


def get_study(name: str, **overrides) -> StudyConfig | MedianStudy:
    if name == "conditioning":
        return replace(CONDITIONING, **overrides)
    if name not in STUDIES:
        raise KeyError(f"unknown study {name!r}; choose from {sorted([*STUDIES, 'conditioning'])}")
    return replace(STUDIES[name], **overrides)


def simulate_set(cfg: StudyConfig, seed: int, space: TypeSpace | None = None):
    """One tree set. Returns the trees and the rejection counts."""
    space = load_type_space() if space is None else space
    rng = np.random.default_rng(seed)
    truth = cfg.truth()
    opts = cfg.sim_options(space)
    trees, rejections = [], []
    if cfg.generator == "sequence":
        _, aff, ctx = seqmut.load_synthetic_models(cfg.rate_convention, cfg.mutation_rate)
        for _ in range(cfg.n_trees):
            t, r = seqmut.simulate_with_sequences_conditioned(truth, aff, ctx, space, opts, rng)
            trees.append(t)
            rejections.append(r)
    else:
        for _ in range(cfg.n_trees):
            t, r = simulate_conditioned(truth, space, opts, rng=rng)
            trees.append(t)
            rejections.append(r)
    return trees, rejections


def truth_curve(cfg: StudyConfig, space: TypeSpace) -> np.ndarray:
    return cfg.truth().birth_rates(space)


def _set_task(args):
    cfg, k, seed, out_dir = args
    space = load_type_space()
    sim_seed, chain_seed = child_seeds(seed, 2)
    trees, rejections = simulate_set(cfg, sim_seed, space)
    chain = run_chain(
        trees, PriorSpec.default(), cfg.chain_config(chain_seed), base=cfg.inference_base(), space=space
    )
    summ = chain_summary(chain, space)
    lam_true = truth_curve(cfg, space)
    result = {
        "set": k,
        "seed": seed,
        "simulation_seed": sim_seed,
        "chain_seed": chain_seed,
        "rejections": rejections,
        "mean_leaves": float(np.mean([len(t.leaves("sampled_leaf")) for t in trees])),
        "lam_true": lam_true.tolist(),
        "lam_covered_90": summ.covers(lam_true).tolist(),
        "net_true": (lam_true - cfg.mu).tolist(),
        "net_covered_90": summ.covers(lam_true - cfg.mu, net=True).tolist(),
        "acceptance": chain.acceptance,
        "ess": chain.ess(),
        "summary": summ.as_dict(),
    }
    if out_dir is not None:
        d = Path(out_dir) / f"set_{k}"
        d.mkdir(parents=True, exist_ok=True)
        save_trees(trees, d / "trees.json")
        chain.write(d)
        (d / "summary.json").write_text(json.dumps(result, indent=2))
    return result


def run_study(cfg: StudyConfig, out_dir=None) -> list[dict]:
    """Simulate every tree set and sample its posterior. Seeds are derived
    from ``cfg.seed`` by set index, so results do not depend on threads."""
    seeds = child_seeds(cfg.seed, cfg.n_sets)
    tasks = [(cfg, k, s, out_dir) for k, s in enumerate(seeds)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(_set_task, tasks))
    else:
        results = [_set_task(t) for t in tasks]
    if out_dir is not None:
        (Path(out_dir) / "study.json").write_text(
            json.dumps({"config": asdict(cfg), "sets": [
                {k: r[k] for k in ("set", "seed", "lam_covered_90", "net_covered_90", "ess")}
                for r in results
            ]}, indent=2)
        )
    return results


def run_conditioning(study: MedianStudy, out_dir=None) -> list[dict]:
    rows = median_sampling_distribution(study)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_rows(rows, Path(out_dir) / "medians.csv")
    return rows
