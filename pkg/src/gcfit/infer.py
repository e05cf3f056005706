"""Adaptive component-wise Metropolis-within-Gibbs sampling of the birth,
death and type-change parameters given a set of observed trees.

Positive parameters are updated by multiplicative log-normal proposals
(``x' = x exp(s z)``), whose Hastings correction is ``log(x'/x)``; the
sigmoid midpoint ``phi3`` by an additive normal proposal. During burn-in the
log proposal scales follow a Robbins-Monro recursion towards a per-component
acceptance rate of 0.44.

With ``ChainConfig(joint_moves=k)`` each sweep is followed by ``k`` joint
random walk moves on the unconstrained scale (log for positive parameters), whose
covariance is learned from the burn-in draws and frozen afterwards. It is an
extra Metropolis kernel with the same target, added because single-component
moves travel slowly along the ridges of the sigmoid posterior.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .likelihood import (
    CompiledTrees,
    LikelihoodError,
    compile_trees,
    per_tree_log_densities,
)
from .model import POSITIVE_PARAMS, ModelError, Params, PriorSpec, TypeSpace, log_prior
from .tree import Tree, to_json

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.44
DEFAULT_SCALE = 0.2
ADAPT_EXPONENT = 0.6
JOINT_TARGET_ACCEPT = 0.234
JOINT_MIN_SAMPLES = 200
JOINT_MOVES = 1  # per sweep, used by the studies and the CLI
MODES = ("exact", "loglinear", "direct", "approx")


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    """Sampler settings. ``iterations`` counts sweeps including burn-in; a
    sweep updates every free parameter once."""

    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    scales: Mapping[str, float] = field(default_factory=dict)
    adapt: bool = True
    target_accept: float = TARGET_ACCEPT
    seed: int = 0
    mode: str = "exact"
    conditional: bool = True
    init: Mapping[str, float] | None = None
    joint_moves: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if any(not s > 0 for s in self.scales.values()):
            raise ValueError("proposal scales must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown likelihood mode {self.mode!r}")
        if self.joint_moves < 0:
            raise ValueError("joint_moves must be non-negative")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")

    def scale(self, name: str) -> float:
        return float(self.scales.get(name, DEFAULT_SCALE))

    @property
    def n_draws(self) -> int:
        return -(-(self.iterations - self.burn_in) // self.thin)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = dict(self.scales)
        d["init"] = None if self.init is None else dict(self.init)
        return d


class Posterior:
    """Unnormalised log posterior over the parameters named in ``priors``.

    Args:
        trees: observed trees (or an already compiled set).
        priors: one prior per free parameter.
        base: parameter set supplying the fixed quantities (``gamma_star``,
            ``rho``, and any parameter without a prior).
        space: type space.
        mode: ``exact`` (log-linear route), ``direct`` or ``approx``.
        conditional: condition each tree on survival.
    """

    def __init__(
        self,
        trees: Sequence[Tree] | CompiledTrees,
        priors: PriorSpec,
        base: Params,
        space: TypeSpace,
        mode: str = "exact",
        conditional: bool = True,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown likelihood mode {mode!r}")
        self.trees = None if isinstance(trees, CompiledTrees) else list(trees)
        if mode == "direct":
            if self.trees is None:
                raise ValueError("direct mode needs tree objects")
            self.data = self.trees
        else:
            self.data = trees if isinstance(trees, CompiledTrees) else compile_trees(trees, len(space))
        self.priors = priors
        self.base = base
        self.space = space
        self.mode = mode
        self.conditional = conditional
        self.n_evals = 0

    @property
    def names(self) -> tuple[str, ...]:
        return self.priors.names

    def params(self, theta: Mapping[str, float]) -> Params:
        return self.base.with_values(**theta)

    def log_likelihood(self, theta: Mapping[str, float]) -> float:
        self.n_evals += 1
        try:
            params = self.params(theta)
        except ModelError:
            return -math.inf
        try:
            vals = per_tree_log_densities(
                self.data, params, self.space, self.mode, self.conditional
            )
        except LikelihoodError as e:
            log.debug("likelihood failure at %s: %s", dict(theta), e)
            return -math.inf
        total = float(np.sum(vals))
        return total if not math.isnan(total) else -math.inf

    def __call__(self, theta: Mapping[str, float]) -> float:
        lp = log_prior(theta, self.priors)
        if not math.isfinite(lp):
            return -math.inf
        return lp + self.log_likelihood(theta)


def log_posterior(
    theta: Mapping[str, float],
    trees,
    priors: PriorSpec,
    config: ChainConfig,
    base: Params,
    space: TypeSpace,
) -> float:
    """Log prior plus tree-set log density under ``config``'s likelihood mode
    and conditioning."""
    return Posterior(trees, priors, base, space, config.mode, config.conditional)(theta)


# -- Metropolis-within-Gibbs ---------------------------------------------------


def is_positive(name: str) -> bool:
    return name in POSITIVE_PARAMS


def propose(name: str, value: float, scale: float, z: float) -> float:
    return value * math.exp(scale * z) if is_positive(name) else value + scale * z


def proposal_log_correction(name: str, current: float, proposed: float) -> float:
    """``log q(current | proposed) - log q(proposed | current)``."""
    if is_positive(name):
        return math.log(proposed) - math.log(current)
    return 0.0


def mh_update(
    theta: dict,
    lp: float,
    name: str,
    target: Callable[[Mapping[str, float]], float],
    scale: float,
    rng: np.random.Generator,
) -> tuple[dict, float, bool]:
    """One Metropolis-Hastings update of component ``name``."""
    z = rng.standard_normal()
    log_u = math.log(1.0 - rng.random())
    cur = theta[name]
    new = propose(name, cur, scale, z)
    cand = dict(theta)
    cand[name] = new
    lp_new = target(cand)
    if not math.isfinite(lp_new):
        return theta, lp, False
    log_alpha = lp_new - lp + proposal_log_correction(name, cur, new)
    if log_alpha >= 0 or log_u < log_alpha:
        return cand, lp_new, True
    return theta, lp, False


def mh_step(
    theta: dict,
    lp: float,
    target: Callable[[Mapping[str, float]], float],
    scales: Mapping[str, float],
    rng: np.random.Generator,
    names: Sequence[str] | None = None,
) -> tuple[dict, float, dict[str, bool]]:
    """A Gibbs sweep of single-component updates in ``names`` order."""
    accepted = {}
    for name in names or list(theta):
        theta, lp, accepted[name] = mh_update(theta, lp, name, target, scales[name], rng)
    return theta, lp, accepted


def to_unconstrained(names: Sequence[str], theta: Mapping[str, float]) -> np.ndarray:
    return np.array([math.log(theta[n]) if is_positive(n) else theta[n] for n in names])


def from_unconstrained(names: Sequence[str], u: np.ndarray) -> dict[str, float]:
    return {n: math.exp(v) if is_positive(n) else float(v) for n, v in zip(names, u)}


def joint_update(
    theta: dict,
    lp: float,
    names: Sequence[str],
    target: Callable[[Mapping[str, float]], float],
    chol: np.ndarray,
    rng: np.random.Generator,
) -> tuple[dict, float, bool]:
    """Random walk ``u' = u + chol @ z`` on the unconstrained scale.

    The walk is symmetric in ``u``, so the Hastings term is the log Jacobian
    of the map back to the positive parameters.
    """
    z = rng.standard_normal(len(names))
    log_u = math.log(1.0 - rng.random())
    u = to_unconstrained(names, theta)
    u_new = u + chol @ z
    if not np.all(np.isfinite(u_new)) or np.any(u_new[[is_positive(n) for n in names]] > 700):
        return theta, lp, False
    cand = from_unconstrained(names, u_new)
    lp_new = target(cand)
    if not math.isfinite(lp_new):
        return theta, lp, False
    pos = np.array([is_positive(n) for n in names])
    log_alpha = lp_new - lp + float(np.sum(u_new[pos] - u[pos]))
    if log_alpha >= 0 or log_u < log_alpha:
        return cand, lp_new, True
    return theta, lp, False


class _RunningCov:
    """Welford accumulator for the joint proposal covariance."""

    def __init__(self, d: int):
        self.n = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))

    def add(self, u: np.ndarray) -> None:
        self.n += 1
        delta = u - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, u - self.mean)

    def chol(self, log_factor: float) -> np.ndarray:
        d = len(self.mean)
        cov = self.m2 / (self.n - 1) + 1e-8 * np.eye(d)
        return np.linalg.cholesky(math.exp(2 * log_factor) * 2.38**2 / d * cov)


# -- chains --------------------------------------------------------------------


@dataclass
class Chain:
    names: tuple[str, ...]
    draws: np.ndarray  # (n_draws, n_params)
    log_post: np.ndarray
    iters: np.ndarray
    accepted: np.ndarray  # (n_draws, n_params) acceptance at the stored sweep
    acceptance: dict[str, float]  # post burn-in acceptance rates
    scales: dict[str, float]  # proposal scales after adaptation
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def theta(self, i: int) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.draws[i])}

    def params(self, i: int, base: Params) -> Params:
        return base.with_values(**self.theta(i))

    def ess(self) -> dict[str, float]:
        return {n: effective_sample_size(self.column(n)) for n in self.names}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["iter", *self.names, "log_post", *(f"accepted_{n}" for n in self.names)]
            )
            for k in range(len(self)):
                w.writerow(
                    [
                        int(self.iters[k]),
                        *(repr(float(v)) for v in self.draws[k]),
                        repr(float(self.log_post[k])),
                        *(int(a) for a in self.accepted[k]),
                    ]
                )

    @classmethod
    def from_csv(cls, path, metadata: dict | None = None) -> "Chain":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        names = tuple(h for h in header[1:] if h != "log_post" and not h.startswith("accepted_"))
        k = len(names)
        data = np.array([[float(v) for v in r] for r in body]).reshape(-1, len(header))
        acc = data[:, 2 + k :].astype(bool)
        return cls(
            names,
            data[:, 1 : 1 + k],
            data[:, 1 + k],
            data[:, 0].astype(int),
            acc,
            {n: float(a) for n, a in zip(names, acc.mean(axis=0))} if len(data) else {},
            {},
            metadata or {},
        )

    def write(self, out_dir, stem: str = "chain") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, meta_path = out / f"{stem}.csv", out / f"{stem}.json"
        self.to_csv(csv_path)
        meta = {
            **self.metadata,
            "acceptance": self.acceptance,
            "scales": self.scales,
            "ess": self.ess(),
        }
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
        return csv_path, meta_path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def data_digest(trees: Sequence[Tree]) -> str:
    h = hashlib.sha256()
    for t in trees:
        h.update(to_json(t))
    return h.hexdigest()


def run_chain(
    trees,
    priors: PriorSpec,
    config: ChainConfig,
    rng: np.random.Generator | None = None,
    *,
    base: Params,
    space: TypeSpace,
    target: Posterior | None = None,
) -> Chain:
    """Sample the posterior of the parameters named in ``priors``.

    The chain starts at the prior medians (or ``config.init``) and is fully
    determined by ``config.seed`` unless an explicit ``rng`` is passed.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if target is None:
        target = Posterior(trees, priors, base, space, config.mode, config.conditional)
    names = priors.names
    theta = {n: float(v) for n, v in priors.medians().items()}
    if config.init:
        theta.update({k: float(v) for k, v in config.init.items() if k in theta})
    lp = target(theta)
    if not math.isfinite(lp):
        raise InferenceError(
            f"non-finite log posterior at the initial point {theta}; "
            "re-initialise with ChainConfig(init=...)"
        )
    log_scale = {n: math.log(config.scale(n)) for n in names}
    n_keep = config.n_draws
    draws = np.empty((n_keep, len(names)))
    lps = np.empty(n_keep)
    iters = np.empty(n_keep, dtype=int)
    acc_rows = np.zeros((n_keep, len(names)), dtype=bool)
    acc_count = dict.fromkeys(names, 0)
    # the joint covariance ignores the first quarter of burn-in, which is
    # mostly the walk in from the prior medians
    cov = _RunningCov(len(names))
    cov_start = config.burn_in // 4
    log_factor = 0.0
    chol = None
    joint_tries = joint_acc = adapt_n = 0
    k = 0
    t0 = time.perf_counter()
    for it in range(config.iterations):
        scales = {n: math.exp(v) for n, v in log_scale.items()}
        theta, lp, acc = mh_step(theta, lp, target, scales, rng, names)
        if config.joint_moves:
            if it < config.burn_in and cov.n >= JOINT_MIN_SAMPLES:
                chol = cov.chol(log_factor)
            for _ in range(config.joint_moves if chol is not None else 0):
                theta, lp, ok = joint_update(theta, lp, names, target, chol, rng)
                if it < config.burn_in:
                    adapt_n += 1
                    log_factor += adapt_n**-ADAPT_EXPONENT * (float(ok) - JOINT_TARGET_ACCEPT)
                else:
                    joint_tries += 1
                    joint_acc += ok
            if cov_start <= it < config.burn_in:
                cov.add(to_unconstrained(names, theta))
        if it < config.burn_in:
            if config.adapt:
                step = (it + 1) ** -ADAPT_EXPONENT
                for n in names:
                    log_scale[n] += step * (float(acc[n]) - config.target_accept)
            continue
        for n in names:
            acc_count[n] += acc[n]
        if (it - config.burn_in) % config.thin == 0:
            draws[k] = [theta[n] for n in names]
            lps[k] = lp
            iters[k] = it
            acc_rows[k] = [acc[n] for n in names]
            k += 1
    elapsed = time.perf_counter() - t0
    n_post = config.iterations - config.burn_in
    from . import __version__

    meta = {
        "config": config.as_dict(),
        "priors": {n: asdict(p) for n, p in priors.priors.items()},
        "fixed": {
            k: v for k, v in base.values().items() if k not in names
        },
        "rho": list(base.rho),
        "mode": config.mode,
        "conditional": config.conditional,
        "data_digest": data_digest(target.trees) if target.trees is not None else None,
        "n_trees": len(target.trees) if target.trees is not None else target.data.n_trees,
        "adaptation": {
            "target_accept": config.target_accept,
            "step": f"(iteration + 1) ** -{ADAPT_EXPONENT}",
            "burn_in_only": True,
            "joint_moves": config.joint_moves,
            "joint_target_accept": JOINT_TARGET_ACCEPT if config.joint_moves else None,
            "joint_acceptance": joint_acc / joint_tries if joint_tries else None,
        },
        "elapsed_seconds": elapsed,
        "iterations_per_second": config.iterations / elapsed if elapsed > 0 else None,
        "software_version": __version__,
    }
    return Chain(
        tuple(names),
        draws[:k],
        lps[:k],
        iters[:k],
        acc_rows[:k],
        {n: acc_count[n] / n_post for n in names},
        {n: math.exp(v) for n, v in log_scale.items()},
        meta,
    )


# -- diagnostics and summaries -------------------------------------------------


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    f = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] <= 0:
        return np.ones(1)
    return acov / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """Geyer's initial positive sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    rho = autocorrelation(x)
    if rho.size == 1:  # constant chain
        return float(n)
    tau = -1.0
    for m in range(0, n - 1, 2):
        pair = rho[m] + rho[m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def birth_rate_draws(chain: Chain, x: np.ndarray) -> np.ndarray:
    """Birth rate of every draw at every point of ``x``, shape ``(n, len(x))``."""
    x = np.asarray(x, dtype=float)[None, :]
    if "lam" in chain.names:
        return np.repeat(chain.column("lam")[:, None], x.shape[1], axis=1)
    p1, p2, p3, p4 = (chain.column(n)[:, None] for n in ("phi1", "phi2", "phi3", "phi4"))
    return p1 * expit(p2 * (x - p3)) + p4


@dataclass
class ChainSummary:
    medians: dict[str, float]
    intervals: dict[str, dict[int, tuple[float, float]]]
    grid: np.ndarray
    points: np.ndarray
    quantiles: tuple[float, ...]
    lam_grid: np.ndarray  # (len(quantiles), len(grid))
    net_grid: np.ndarray
    lam_points: np.ndarray
    net_points: np.ndarray

    def band(self, level: int, net: bool = False, at_points: bool = True):
        """Lower and upper edge of the central ``level``% band."""
        arr = {
            (False, True): self.lam_points,
            (True, True): self.net_points,
            (False, False): self.lam_grid,
            (True, False): self.net_grid,
        }[(net, at_points)]
        lo_q, hi_q = (100 - level) / 200, 1 - (100 - level) / 200
        return arr[self.quantiles.index(round(lo_q, 6))], arr[self.quantiles.index(round(hi_q, 6))]

    def covers(self, truth, level: int = 90, net: bool = False) -> np.ndarray:
        """Which type-space points have ``truth`` inside the band."""
        lo, hi = self.band(level, net)
        truth = np.asarray(truth, dtype=float)
        return (lo <= truth) & (truth <= hi)

    def as_dict(self) -> dict:
        return {
            "medians": self.medians,
            "intervals": {
                n: {str(k): list(v) for k, v in iv.items()} for n, iv in self.intervals.items()
            },
            "quantiles": list(self.quantiles),
            "grid": self.grid.tolist(),
            "points": self.points.tolist(),
            "lam_grid": self.lam_grid.tolist(),
            "net_grid": self.net_grid.tolist(),
            "lam_points": self.lam_points.tolist(),
            "net_points": self.net_points.tolist(),
        }


SUMMARY_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def chain_summary(chain: Chain, space: TypeSpace, grid=None) -> ChainSummary:
    """Posterior medians, central 50%/90% intervals, and pointwise bands of
    the birth rate and of birth minus death rate."""
    if len(chain) == 0:
        raise InferenceError("empty chain")
    if grid is None:
        lo, hi = space.values[0], space.values[-1]
        pad = 0.5 * (hi - lo)
        grid = np.linspace(lo - pad, hi + pad, 101)
    grid = np.asarray(grid, dtype=float)
    points = space.array
    q = np.array(SUMMARY_QUANTILES)
    medians = {n: float(np.median(chain.column(n))) for n in chain.names}
    intervals = {
        n: {
            50: tuple(float(v) for v in np.quantile(chain.column(n), [0.25, 0.75])),
            90: tuple(float(v) for v in np.quantile(chain.column(n), [0.05, 0.95])),
        }
        for n in chain.names
    }
    mu = chain.column("mu")[:, None]
    lam_g = birth_rate_draws(chain, grid)
    lam_p = birth_rate_draws(chain, points)
    return ChainSummary(
        medians,
        intervals,
        grid,
        points,
        SUMMARY_QUANTILES,
        np.quantile(lam_g, q, axis=0),
        np.quantile(lam_g - mu, q, axis=0),
        np.quantile(lam_p, q, axis=0),
        np.quantile(lam_p - mu, q, axis=0),
    )
