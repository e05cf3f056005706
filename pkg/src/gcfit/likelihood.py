"""Tree densities under the multitype birth-death-mutation process.

The non-observation probabilities ``p_x(t)`` are solved once per parameter
set on ``[0, t_max]`` and reused for every segment of every tree. Densities
are accumulated in log space.

Three evaluation routes are provided:

``loglinear`` (default)
    ``q`` is linear along a segment, so ``log q(t_s) - log q(t_e)`` is the
    integral of ``-(lam_x + mu + G_x) + 2 lam_x p_x(s)``. The integral of
    ``p`` is carried alongside ``p`` by the ODE solver, which makes the whole
    tree set a handful of vectorized array operations.
``direct``
    Integrates the segment ODE for ``q`` numerically (scipy), segment by
    segment in postorder. Slow; kept as a cross-check.
``approx``
    Replaces ``p_x`` by the single-type closed form with rates
    ``(lam_x, mu)``, i.e. assumes unobserved lineages never change type.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import _ode
from .model import Params, TypeSpace
from .tree import ObservedTree, Tree, postorder_segments

log = logging.getLogger(__name__)

RTOL = 1e-8
ATOL = 1e-10
# The solver integrates survival s = 1 - p. Its default absolute tolerance on
# s is negligible, so the error control is relative in s: this keeps log s
# accurate for strongly subcritical parameters while being at least as tight
# as ATOL on p.
ATOL_SURVIVAL = 1e-300
# Below this the survival probability is no longer resolved.
SURVIVAL_FLOOR = 1e-250
RANGE_TOL = 1e-6
MAX_STEPS = 200_000


class LikelihoodError(RuntimeError):
    """Numerical failure while evaluating a density."""


class SurvivalUnderflowError(LikelihoodError):
    """The probability of observing at least one lineage is numerically 0."""


@dataclass(frozen=True)
class PExtinct:
    """Dense solution of the non-observation probabilities on ``[0, t_max]``."""

    t_max: float
    rho: float
    n_types: int
    t_old: np.ndarray
    h: np.ndarray
    y_old: np.ndarray
    q: np.ndarray
    n_steps: int
    n_rejected: int

    def _eval(self, t, comp):
        t, comp = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(comp, dtype=np.intp))
        if np.any(t < 0) or np.any(t > self.t_max * (1 + 1e-12)):
            raise LikelihoodError(
                f"time outside solved interval [0, {self.t_max}]"
            )
        if self.n_steps == 0:
            init = np.where(comp < self.n_types, self.rho, 0.0)
            return init
        k = np.clip(np.searchsorted(self.t_old, t, side="right") - 1, 0, self.n_steps - 1)
        hk = self.h[k]
        x = (t - self.t_old[k]) / hk
        qc = self.q[k, comp]
        poly = x * (qc[..., 0] + x * (qc[..., 1] + x * (qc[..., 2] + x * qc[..., 3])))
        return self.y_old[k, comp] + hk * poly

    def survival(self, t, x):
        """Probability that a type-``x`` lineage at ``t`` is observed."""
        out = np.clip(self._eval(t, x), 0.0, 1.0)
        if np.ndim(t) == 0 and np.ndim(x) == 0:
            return float(out) if np.asarray(t) != 0 else self.rho
        return np.where(np.asarray(t) == 0, self.rho, out)

    def p(self, t, x):
        """Probability that a type-``x`` lineage at ``t`` is not observed."""
        s = self.survival(t, x)
        return 1.0 - s

    def integral_p(self, t, x):
        """``int_0^t p_x(s) ds``."""
        t = np.asarray(t, dtype=float)
        S = self._eval(t, np.asarray(x) + self.n_types)
        out = t - S
        return float(out) if out.ndim == 0 else out

    def integral_survival(self, t, x):
        """``int_0^t (1 - p_x(s)) ds``."""
        out = self._eval(t, np.asarray(x) + self.n_types)
        return float(out) if np.ndim(out) == 0 else out


def solve_px(
    params: Params,
    space: TypeSpace,
    t_max: float,
    rho: float | None = None,
    rtol: float = RTOL,
    atol: float = ATOL_SURVIVAL,
) -> PExtinct:
    """Solve the non-observation system forward from ``p_x(0) = 1 - rho``."""
    rho = params.rho[0] if rho is None else float(rho)
    lam = params.birth_rates(space).astype(float)
    off = params.gamma.copy()
    np.fill_diagonal(off, 0.0)
    t_old, h, y_old, q, n_acc, n_rej, status = _ode.solve_survival(
        lam, float(params.mu), off, rho, float(t_max), rtol, atol, MAX_STEPS, RANGE_TOL
    )
    if status == _ode.STEP_FAILURE:
        raise LikelihoodError("ODE step size underflow while solving p")
    if status == _ode.TOO_MANY_STEPS:
        raise LikelihoodError(f"ODE solver exceeded {MAX_STEPS} steps")
    if status == _ode.OUT_OF_RANGE:
        raise LikelihoodError(
            f"p left [-{RANGE_TOL}, 1+{RANGE_TOL}] (solver instability)"
        )
    return PExtinct(
        t_max=float(t_max),
        rho=rho,
        n_types=lam.size,
        t_old=t_old,
        h=h,
        y_old=y_old,
        q=q,
        n_steps=n_acc,
        n_rejected=n_rej,
    )


class _SolveCache:
    """Small LRU of p-solves keyed by (parameters, rho); a cached solve is
    reused for any ``t_max`` it covers."""

    def __init__(self, maxsize=32):
        self.maxsize = maxsize
        self._d: OrderedDict = OrderedDict()

    def get(self, params, space, rho, t_max) -> PExtinct:
        key = (params.key(), space, rho)
        hit = self._d.get(key)
        if hit is not None and hit.t_max >= t_max:
            self._d.move_to_end(key)
            return hit
        sol = solve_px(params, space, t_max, rho)
        self._d[key] = sol
        self._d.move_to_end(key)
        while len(self._d) > self.maxsize:
            self._d.popitem(last=False)
        return sol

    def clear(self):
        self._d.clear()


_cache = _SolveCache()


def clear_cache():
    _cache.clear()


# -- single-type closed forms -------------------------------------------------


def _log_den(lam, mu, rho, t):
    """``log(1 + rho lam (e^{rt} - 1) / r)`` with ``r = lam - mu``, stable in
    ``r -> 0`` and for large ``r t``."""
    lam, mu, t = np.broadcast_arrays(
        np.asarray(lam, float), np.asarray(mu, float), np.asarray(t, float)
    )
    r = lam - mu
    rt = r * t
    small = np.abs(rt) < 1e-8
    big = rt > 600
    safe_r = np.where(small | (r == 0), 1.0, r)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        h = np.where(small, t * (1 + 0.5 * rt), np.expm1(np.minimum(rt, 600)) / safe_r)
        out = np.log1p(rho * lam * h)
        # e^{rt} rho lam / r * (1 + (r / (rho lam) - 1) e^{-rt})
        big_val = (
            np.log(rho * lam / safe_r)
            + rt
            + np.log1p((safe_r / (rho * lam) - 1) * np.exp(-np.minimum(rt, 700)))
        )
    return np.where(big, big_val, out)


def bd_log_survival(lam, mu, rho, t):
    """Log of the single-type probability of at least one sampled descendant."""
    r = np.asarray(lam, float) - np.asarray(mu, float)
    return np.log(rho) + r * np.asarray(t, float) - _log_den(lam, mu, rho, t)


def bd_survival(lam, mu, rho, t):
    """Single-type probability of at least one sampled descendant."""
    return np.exp(bd_log_survival(lam, mu, rho, t))


def bd_p(lam, mu, rho, t):
    """Single-type non-observation probability (closed form)."""
    return 1.0 - bd_survival(lam, mu, rho, t)


def bd_log_g(lam, mu, rho, t):
    """Log of the single-type segment propagator: ``log q(t) - log q(0)``
    for a lineage with no events on ``[0, t]``."""
    r = np.asarray(lam, float) - np.asarray(mu, float)
    return r * np.asarray(t, float) - 2.0 * _log_den(lam, mu, rho, t)


# -- compiled tree sets -------------------------------------------------------


@dataclass
class CompiledTrees:
    """Array form of a list of observed trees, for vectorized evaluation."""

    n_trees: int
    n_types: int
    seg_tree: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    seg_state: np.ndarray
    n_leaves: np.ndarray
    births: np.ndarray  # (n_trees, n_types)
    tc_tree: np.ndarray
    tc_from: np.ndarray
    tc_to: np.ndarray
    root_state: np.ndarray
    root_time: np.ndarray
    rho_index: np.ndarray
    _groups: dict = field(default_factory=dict, repr=False)

    def group(self, r):
        """Segment mask for trees using ``rho[r]``."""
        if r not in self._groups:
            tree_mask = self.rho_index == r
            self._groups[r] = (tree_mask, tree_mask[self.seg_tree])
        return self._groups[r]


def compile_trees(trees: Sequence[Tree], n_types: int) -> CompiledTrees:
    seg_tree, seg_start, seg_end, seg_state = [], [], [], []
    n_leaves = np.zeros(len(trees), dtype=int)
    births = np.zeros((len(trees), n_types), dtype=int)
    tc_tree, tc_from, tc_to = [], [], []
    root_state, root_time, rho_index = [], [], []
    for i, tree in enumerate(trees):
        for n in tree.nodes:
            if not 0 <= n.state < n_types:
                raise LikelihoodError(
                    f"tree {i}: node {n.id} state {n.state} outside type space"
                )
            if n.event in ("death_leaf", "unsampled_leaf"):
                raise LikelihoodError(
                    f"tree {i}: node {n.id} is a {n.event}; densities need observed trees"
                )
            if n.parent is None:
                root_state.append(n.state)
                root_time.append(n.time)
                continue
            parent = tree[n.parent]
            seg_tree.append(i)
            seg_start.append(parent.time)
            seg_end.append(n.time)
            seg_state.append(parent.state)
            if n.event == "sampled_leaf":
                n_leaves[i] += 1
            elif n.event == "birth":
                births[i, n.state] += 1
            elif n.event == "type_change":
                tc_tree.append(i)
                tc_from.append(parent.state)
                tc_to.append(n.state)
        rho_index.append(tree.rho_index)
    as_int = lambda v: np.asarray(v, dtype=np.intp)
    return CompiledTrees(
        n_trees=len(trees),
        n_types=n_types,
        seg_tree=as_int(seg_tree),
        seg_start=np.asarray(seg_start, dtype=float),
        seg_end=np.asarray(seg_end, dtype=float),
        seg_state=as_int(seg_state),
        n_leaves=n_leaves,
        births=births,
        tc_tree=as_int(tc_tree),
        tc_from=as_int(tc_from),
        tc_to=as_int(tc_to),
        root_state=as_int(root_state),
        root_time=np.asarray(root_time, dtype=float),
        rho_index=as_int(rho_index),
    )


@dataclass(frozen=True)
class LogDensityResult:
    log_q_root: float
    log_survival: float
    mode: str
    n_steps: int = 0
    n_rejected: int = 0
    diagnostics: tuple[str, ...] = ()

    @property
    def log_conditional(self) -> float:
        if self.log_q_root == -math.inf:
            return -math.inf
        return self.log_q_root - self.log_survival


def _event_terms(ct: CompiledTrees, params: Params, lam: np.ndarray):
    """Per-tree log contributions of sampling, births and type changes, plus
    diagnostics for impossible type changes."""
    rho = np.asarray(params.rho)[ct.rho_index]
    with np.errstate(divide="ignore"):
        total = ct.n_leaves * np.log(rho) + ct.births @ np.log(lam)
        tc_rates = params.gamma[ct.tc_from, ct.tc_to]
        tc_log = np.log(tc_rates)
    total = total + np.bincount(ct.tc_tree, weights=tc_log, minlength=ct.n_trees)
    diags = [
        f"tree {t}: type change {a}->{b} has zero rate"
        for t, a, b, r in zip(ct.tc_tree, ct.tc_from, ct.tc_to, tc_rates)
        if r <= 0
    ]
    return total, diags


def _check_rho(ct: CompiledTrees, params: Params):
    if ct.n_trees and ct.rho_index.max() >= len(params.rho):
        raise LikelihoodError(
            f"tree refers to rho index {int(ct.rho_index.max())} but only "
            f"{len(params.rho)} sampling probabilities are set"
        )


def _log_resolved(surv):
    """``log`` of survival probabilities, ``-inf`` where they are below the
    resolution of the solver."""
    surv = np.asarray(surv, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(surv < SURVIVAL_FLOOR, -np.inf, np.log(np.maximum(surv, SURVIVAL_FLOOR)))


def _loglinear(ct: CompiledTrees, params: Params, space: TypeSpace, cache=True):
    _check_rho(ct, params)
    lam = params.birth_rates(space)
    gamma = params.gamma
    gx = gamma.sum(axis=1) - np.diag(gamma)
    log_q, diags = _event_terms(ct, params, lam)
    log_surv = np.zeros(ct.n_trees)
    steps = rej = 0
    for r in np.unique(ct.rho_index):
        tmask, smask = ct.group(int(r))
        t_max = float(ct.root_time[tmask].max())
        rho = params.rho[int(r)]
        sol = _cache.get(params, space, rho, t_max) if cache else solve_px(params, space, t_max, rho)
        steps += sol.n_steps
        rej += sol.n_rejected
        x = ct.seg_state[smask]
        ts, te = ct.seg_start[smask], ct.seg_end[smask]
        dS = sol.integral_survival(ts, x) - sol.integral_survival(te, x)
        seg = (lam[x] - params.mu - gx[x]) * (ts - te) - 2.0 * lam[x] * dS
        log_q += np.bincount(ct.seg_tree[smask], weights=seg, minlength=ct.n_trees)
        surv = sol.survival(ct.root_time[tmask], ct.root_state[tmask])
        log_surv[tmask] = _log_resolved(surv)
    return log_q, log_surv, steps, rej, diags


def _approx(ct: CompiledTrees, params: Params, space: TypeSpace):
    _check_rho(ct, params)
    lam = params.birth_rates(space)
    gamma = params.gamma
    gx = gamma.sum(axis=1) - np.diag(gamma)
    log_q, diags = _event_terms(ct, params, lam)
    rho = np.asarray(params.rho)[ct.rho_index]
    x = ct.seg_state
    seg_rho = rho[ct.seg_tree]
    seg = -gx[x] * (ct.seg_start - ct.seg_end) + (
        bd_log_g(lam[x], params.mu, seg_rho, ct.seg_start)
        - bd_log_g(lam[x], params.mu, seg_rho, ct.seg_end)
    )
    log_q = log_q + np.bincount(ct.seg_tree, weights=seg, minlength=ct.n_trees)
    log_surv = bd_log_survival(lam[ct.root_state], params.mu, rho, ct.root_time)
    return log_q, log_surv, 0, 0, diags


def _direct(tree: Tree, params: Params, space: TypeSpace, sol: PExtinct):
    lam = params.birth_rates(space)
    gamma = params.gamma
    gx = gamma.sum(axis=1) - np.diag(gamma)
    mu = params.mu
    rho = params.rho[tree.rho_index]
    log_q = {}
    diags = []
    for seg in postorder_segments(tree):
        x = seg.state
        node = tree[seg.node]
        if seg.end_event == "sampled_leaf":
            init = math.log(rho)
        elif seg.end_event == "birth":
            a, b = seg.children
            init = math.log(lam[x]) + log_q[a] + log_q[b]
        elif seg.end_event == "type_change":
            rate = gamma[x, node.state]
            if rate <= 0:
                diags.append(f"type change {x}->{node.state} has zero rate")
                init = -math.inf
            else:
                init = math.log(rate) + log_q[seg.children[0]]
        else:
            raise LikelihoodError(f"segment ends in unsupported event {seg.end_event}")

        # q is linear, so integrate from q(t_e) = 1 and rescale
        def rhs(t, q, x=x):
            return (-(lam[x] + mu + gx[x]) + 2.0 * lam[x] * sol.p(t, x)) * q

        res = solve_ivp(
            rhs,
            (seg.end_time, seg.start_time),
            [1.0],
            method="RK45",
            rtol=1e-11,
            atol=1e-300,
        )
        if not res.success:
            raise LikelihoodError(f"direct integration failed: {res.message}")
        log_q[seg.node] = init + math.log(res.y[0, -1])
    return log_q[tree.children(tree.root.id)[0]], diags



def log_density(
    tree: Tree,
    params: Params,
    space: TypeSpace,
    mode: str = "loglinear",
    pext: PExtinct | None = None,
) -> LogDensityResult:
    """Density of one observed tree, unconditioned and conditioned on
    observing at least one lineage."""
    if mode in ("loglinear", "approx"):
        ct = compile_trees([tree], len(space))
        fn = _loglinear if mode == "loglinear" else _approx
        log_q, log_surv, steps, rej, diags = fn(ct, params, space)
        lq, ls = float(log_q[0]), float(log_surv[0])
    elif mode == "direct":
        if tree.rho_index >= len(params.rho):
            raise LikelihoodError(f"no rho for index {tree.rho_index}")
        if pext is None:
            pext = _cache.get(params, space, params.rho[tree.rho_index], tree.root_time)
        elif pext.t_max < tree.root_time:
            raise LikelihoodError(
                f"tree root time {tree.root_time} beyond solved t_max {pext.t_max}"
            )
        lq, diags = _direct(tree, params, space, pext)
        ls = float(_log_resolved(pext.survival(tree.root_time, tree.root.state)))
        steps, rej = pext.n_steps, pext.n_rejected
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for d in diags:
        log.debug("log density is -inf: %s", d)
    return LogDensityResult(lq, ls, mode, steps, rej, tuple(diags))


def _conditional(log_q, log_surv):
    out = log_q - log_surv
    bad = np.isneginf(log_surv) & np.isfinite(log_q)
    if np.any(bad):
        raise SurvivalUnderflowError(
            f"survival probability underflows to 0 for trees {np.flatnonzero(bad).tolist()}"
        )
    return np.where(np.isneginf(log_q), -np.inf, out)


def log_density_conditional(
    tree: Tree, params: Params, space: TypeSpace, mode: str = "loglinear"
) -> float:
    res = log_density(tree, params, space, mode)
    return float(_conditional(np.array([res.log_q_root]), np.array([res.log_survival]))[0])


def per_tree_log_densities(
    trees: Sequence[Tree] | CompiledTrees,
    params: Params,
    space: TypeSpace,
    mode: str = "loglinear",
    conditional: bool = True,
) -> np.ndarray:
    """Per-tree log densities. ``mode`` is ``loglinear``, ``direct`` or
    ``approx`` (``exact`` is an alias of ``loglinear``)."""
    if mode == "exact":
        mode = "loglinear"
    if mode == "direct":
        if isinstance(trees, CompiledTrees):
            raise ValueError("direct mode needs tree objects")
        res = [log_density(t, params, space, "direct") for t in trees]
        lq = np.array([r.log_q_root for r in res])
        ls = np.array([r.log_survival for r in res])
    else:
        ct = trees if isinstance(trees, CompiledTrees) else compile_trees(trees, len(space))
        fn = {"loglinear": _loglinear, "approx": _approx}.get(mode)
        if fn is None:
            raise ValueError(f"unknown mode {mode!r}")
        lq, ls, *_ = fn(ct, params, space)
    if not conditional:
        return lq
    return _conditional(lq, ls)


def log_density_set(
    trees: Sequence[Tree] | CompiledTrees,
    params: Params,
    space: TypeSpace,
    mode: str = "loglinear",
    conditional: bool = True,
) -> float:
    """Joint log density of independent trees (sum of per-tree terms)."""
    try:
        vals = per_tree_log_densities(trees, params, space, mode, conditional)
    except LikelihoodError as e:
        raise type(e)(f"in tree set: {e}") from e
    return float(np.sum(vals))


def log_density_approx(tree: Tree, params: Params, space: TypeSpace) -> float:
    """Conditioned log density under the no-unobserved-type-change
    approximation."""
    return log_density_conditional(tree, params, space, mode="approx")
