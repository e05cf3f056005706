"""Forward simulation of the multitype birth-death-mutation process.

The simulator is an exact Gillespie scheme aggregated by type: the next
event time is exponential with the total rate, the acting type is drawn in
proportion to ``n_x * (lam_x + mu + G_x)``, the event kind in proportion to
its rate, and the acting lineage uniformly among lineages of that type.
Trees are returned in backward time (collection at 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Params, TypeSpace
from .tree import FullTree, Node, ObservedTree, Tree

ROOT, BIRTH, TYPE_CHANGE, SURVIVOR, DEATH, UNSAMPLED = range(6)
_EVENT_NAMES = {
    ROOT: "root",
    BIRTH: "birth",
    TYPE_CHANGE: "type_change",
    SURVIVOR: "sampled_leaf",
    DEATH: "death_leaf",
    UNSAMPLED: "unsampled_leaf",
}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Capacity:
    """Population ceiling. ``hard``: a uniformly chosen lineage dies whenever
    a birth pushes the population above ``K``. ``soft``: birth rates are
    multiplied by ``1 / (1 + exp(sharpness * (n - K)))``."""

    mode: str
    K: int
    sharpness: float = 0.1

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown capacity mode {self.mode!r}")
        if self.K < 1:
            raise ValueError("capacity K must be at least 1")


@dataclass(frozen=True)
class SimOptions:
    t_total: float = 15.0
    root_state: int = 0
    capacity: Capacity | None = None
    max_events: int = 10**6
    seed: int | None = None
    max_rejections: int = 10**6

    def __post_init__(self):
        if not self.t_total > 0:
            raise ValueError("t_total must be positive")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


class _Uniforms:
    """Uniform(0, 1] draws served from blocks of a numpy generator."""

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng = rng
        self.block = block
        self._buf = []
        self._i = 0

    def __call__(self) -> float:
        if self._i >= len(self._buf):
            self._buf = (1.0 - self.rng.random(self.block)).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u


def effective_birth_rate(x, n_alive, params: Params, opts: SimOptions, space: TypeSpace):
    """Birth rate of type ``x`` when ``n_alive`` lineages are alive."""
    lam = params.birth_rates(space)[x]
    cap = opts.capacity
    if cap is None or cap.mode != "soft":
        return float(lam)
    z = cap.sharpness * (n_alive - cap.K)
    return float(lam / (1.0 + math.exp(z))) if z < 700 else 0.0


@dataclass
class RawTree:
    """Flat arrays of a simulated tree; times are backward."""

    parent: list
    time: list
    event: list
    state: list
    t_total: float
    n_events: int = 0
    max_alive: int = 1
    extra: dict = field(default_factory=dict)

    def to_full_tree(self) -> FullTree:
        aff = self.extra.get("affinity", [None] * len(self.parent))
        nodes = [
            Node(i, None if p < 0 else p, t, _EVENT_NAMES[e], s, a)
            for i, (p, t, e, s, a) in enumerate(
                zip(self.parent, self.time, self.event, self.state, aff)
            )
        ]
        return FullTree(nodes)

    def sample_survivors(self, rho: float, rng: np.random.Generator) -> int:
        """Mark survivors sampled with probability ``rho`` in place; returns
        the number sampled."""
        idx = [i for i, e in enumerate(self.event) if e in (SURVIVOR, UNSAMPLED)]
        marks = rng.random(len(idx)) < rho
        for i, m in zip(idx, marks):
            self.event[i] = SURVIVOR if m else UNSAMPLED
        return int(marks.sum())

    def survivors(self) -> int:
        return sum(1 for e in self.event if e in (SURVIVOR, UNSAMPLED))

    def alive_at(self, t_backward: float) -> int:
        """Lineages crossing backward time ``t_backward``."""
        n = 0
        for i, p in enumerate(self.parent):
            if p >= 0 and self.time[i] < t_backward <= self.time[p]:
                n += 1
        return n


class _Population:
    """Living lineages grouped by type with O(1) insert/remove."""

    def __init__(self, n_types):
        self.by_type = [[] for _ in range(n_types)]
        self.alive = []
        self.node = []  # lineage -> node id it hangs from
        self.state = []
        self.pos_type = []
        self.pos_alive = []

    def add(self, node, state):
        lid = len(self.node)
        self.node.append(node)
        self.state.append(state)
        self.pos_type.append(len(self.by_type[state]))
        self.by_type[state].append(lid)
        self.pos_alive.append(len(self.alive))
        self.alive.append(lid)
        return lid

    def _remove_from(self, lst, pos, lid):
        i = pos[lid]
        last = lst.pop()
        if last != lid:
            lst[i] = last
            pos[last] = i

    def remove(self, lid):
        self._remove_from(self.by_type[self.state[lid]], self.pos_type, lid)
        self._remove_from(self.alive, self.pos_alive, lid)

    def set_state(self, lid, state):
        self._remove_from(self.by_type[self.state[lid]], self.pos_type, lid)
        self.state[lid] = state
        self.pos_type[lid] = len(self.by_type[state])
        self.by_type[state].append(lid)


def simulate_raw(
    params: Params, space: TypeSpace, opts: SimOptions, rng: np.random.Generator
) -> RawTree:
    """Run the process for ``opts.t_total`` and return flat arrays."""
    lam = params.birth_rates(space).tolist()
    gamma = params.gamma
    n_types = len(lam)
    tc_rates = [[gamma[x, y] if y != x else 0.0 for y in range(n_types)] for x in range(n_types)]
    gx = [sum(row) for row in tc_rates]
    mu = float(params.mu)
    T = float(opts.t_total)
    cap = opts.capacity
    hard_k = cap.K if cap is not None and cap.mode == "hard" else None
    soft = cap if cap is not None and cap.mode == "soft" else None
    u = _Uniforms(rng)

    parent, time, event, state = [-1], [T], [ROOT], [opts.root_state]
    pop = _Population(n_types)
    pop.add(0, opts.root_state)

    def new_node(p, t, e, s):
        parent.append(p)
        time.append(t)
        event.append(e)
        state.append(s)
        return len(parent) - 1

    t = 0.0
    n_events = 0
    max_alive = 1
    while pop.alive:
        n_alive = len(pop.alive)
        if soft is not None:
            z = soft.sharpness * (n_alive - soft.K)
            mod = 1.0 / (1.0 + math.exp(z)) if z < 700 else 0.0
            lam_eff = [l * mod for l in lam]
        else:
            lam_eff = lam
        weights = [
            len(pop.by_type[x]) * (lam_eff[x] + mu + gx[x]) for x in range(n_types)
        ]
        total = sum(weights)
        if total <= 0:
            break
        t += -math.log(u()) / total
        if t >= T:
            break
        n_events += 1
        if n_events > opts.max_events:
            raise SimulationError(
                f"population explosion guard: more than {opts.max_events} events"
            )
        # acting type
        r = u() * total
        x = 0
        acc = weights[0]
        while acc < r and x < n_types - 1:
            x += 1
            acc += weights[x]
        members = pop.by_type[x]
        lid = members[min(int(u() * len(members)), len(members) - 1)]
        # event kind
        r = u() * (lam_eff[x] + mu + gx[x])
        tb = T - t
        if r < lam_eff[x]:
            if hard_k is not None and n_alive + 1 > hard_k:
                j = int(u() * (n_alive + 1))
                if j >= n_alive - 1:
                    continue  # a daughter dies at birth: no visible change
                if j >= pop.pos_alive[lid]:
                    j += 1
                victim = pop.alive[j]
                new_node(pop.node[victim], tb, DEATH, pop.state[victim])
                pop.remove(victim)
            nid = new_node(pop.node[lid], tb, BIRTH, x)
            pop.remove(lid)
            pop.add(nid, x)
            pop.add(nid, x)
        elif r < lam_eff[x] + mu:
            new_node(pop.node[lid], tb, DEATH, x)
            pop.remove(lid)
        else:
            r -= lam_eff[x] + mu
            row = tc_rates[x]
            y = 0
            acc = row[0]
            while (acc < r or row[y] == 0) and y < n_types - 1:
                y += 1
                acc += row[y]
            nid = new_node(pop.node[lid], tb, TYPE_CHANGE, y)
            pop.node[lid] = nid
            pop.set_state(lid, y)
        if len(pop.alive) > max_alive:
            max_alive = len(pop.alive)

    for lid in pop.alive:
        new_node(pop.node[lid], 0.0, SURVIVOR, pop.state[lid])
    return RawTree(parent, time, event, state, T, n_events, max_alive)


def simulate_full(
    params: Params, space: TypeSpace, opts: SimOptions, rng: np.random.Generator | None = None
) -> FullTree:
    """Simulate a complete tree; survivors are leaves at time 0 and dead
    lineages leaves at their death time."""
    rng = opts.rng() if rng is None else rng
    return simulate_raw(params, space, opts, rng).to_full_tree()


def mark_sampling(full: Tree, rho: float, rng: np.random.Generator) -> FullTree:
    """Mark each survivor sampled independently with probability ``rho``."""
    nodes = []
    for n in full.nodes:
        if n.time == 0 and n.event in ("sampled_leaf", "unsampled_leaf"):
            ev = "sampled_leaf" if rng.random() < rho else "unsampled_leaf"
            n = Node(n.id, n.parent, n.time, ev, n.state, n.affinity)
        nodes.append(n)
    return FullTree(nodes, rho_index=full.rho_index)


def prune(
    full: Tree, rho: float | None, rng: np.random.Generator | None = None, rho_index: int = 0
) -> ObservedTree | None:
    """Reduce a full tree to its sampled lineages.

    Survivors are sampled with probability ``rho`` (``None`` keeps the
    existing marks); dead lineages are never sampled. Subtrees without a
    sampled leaf are removed and births left with one child are spliced out.
    Returns ``None`` when nothing is sampled.
    """
    if rho is not None:
        full = mark_sampling(full, rho, rng)
    keep = {}
    for n in full.postorder():
        kids = full.children(n.id)
        keep[n.id] = (n.event == "sampled_leaf") or any(keep[c] for c in kids)
    root = full.root
    if not keep[root.id]:
        return None

    nodes = []
    new_id = {}

    def emit(n, parent_new):
        nid = len(nodes)
        new_id[n.id] = nid
        nodes.append(Node(nid, parent_new, n.time, n.event, n.state, n.affinity))
        return nid

    # iterative preorder; each stack entry is (node, new id of kept ancestor)
    stack = [(root, None)]
    while stack:
        n, parent_new = stack.pop()
        kids = [c for c in full.children(n.id) if keep[c]]
        if n.event == "birth" and len(kids) == 1:
            stack.append((full[kids[0]], parent_new))
            continue
        nid = emit(n, parent_new)
        stack.extend((full[c], nid) for c in reversed(kids))
    return ObservedTree(nodes, rho_index=rho_index)


def simulate_conditioned(
    params: Params,
    space: TypeSpace,
    opts: SimOptions,
    rho: float | None = None,
    rng: np.random.Generator | None = None,
    rho_index: int = 0,
) -> tuple[ObservedTree, int]:
    """Simulate until an observed tree with at least one sampled leaf comes
    out. Returns the tree and the number of rejected draws."""
    rng = opts.rng() if rng is None else rng
    rho = params.rho[rho_index] if rho is None else rho
    for rejected in range(opts.max_rejections + 1):
        raw = simulate_raw(params, space, opts, rng)
        if not raw.sample_survivors(rho, rng):
            continue
        obs = prune(raw.to_full_tree(), None, rho_index=rho_index)
        return obs, rejected
    raise SimulationError(
        f"rejection budget exhausted: no observed tree in {opts.max_rejections + 1} draws"
    )


def observed_leaf_counts(trees) -> np.ndarray:
    return np.array([len(t.leaves("sampled_leaf")) for t in trees])
