"""Sequence-level mutation, the additive affinity map, and estimation of the
type change rate matrix from simulated mutation chains.

Sites are 0-based. Affinity tables index amino-acid positions (codons) from
0; nucleotide site ``j`` belongs to codon ``j // 3``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import Params, TypeSpace, _data_path, bin_index
from .simulate import (
    BIRTH,
    DEATH,
    ROOT,
    SURVIVOR,
    TYPE_CHANGE,
    RawTree,
    SimOptions,
    SimulationError,
    _Uniforms,
)
from .tree import FullTree, Node

BASES = "ACGT"
_BASE_CODE = {b: i for i, b in enumerate(BASES)}
_N = 4  # padding code outside the sequence
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY*"
_AA_CODE = {a: i for i, a in enumerate(AMINO_ACIDS)}
STOP = _AA_CODE["*"]

_CODON_AAS = "FFLLSSSSYY**CC*WLLLLPPPPHHQQRRRRIIIMTTTTNNKKSSRRVVVVAAAADDEEGGGG"
_CODON_ORDER = "TCAG"
CODON_TABLE = {
    a + b + c: _CODON_AAS[16 * i + 4 * j + k]
    for i, a in enumerate(_CODON_ORDER)
    for j, b in enumerate(_CODON_ORDER)
    for k, c in enumerate(_CODON_ORDER)
}
# (64,) amino acid code by codon index 16*b0 + 4*b1 + b2 in ACGT coding
_CODON_AA = np.array(
    [_AA_CODE[CODON_TABLE[a + b + c]] for a, b, c in product(BASES, repeat=3)]
)


def encode(seq: str) -> np.ndarray:
    try:
        return np.array([_BASE_CODE[b] for b in seq.upper()], dtype=np.int8)
    except KeyError as e:
        raise ValueError(f"invalid nucleotide {e.args[0]!r}") from None


def decode(codes: np.ndarray) -> str:
    return "".join(BASES[c] for c in codes)


def translate(seq: str) -> str:
    if len(seq) % 3:
        raise ValueError("sequence length is not a multiple of 3")
    return "".join(CODON_TABLE[seq[i : i + 3].upper()] for i in range(0, len(seq), 3))


# -- context model -------------------------------------------------------------


@dataclass
class ContextModel:
    """Context-dependent substitution rates.

    ``table[c, b]`` is the rate at which the central base of context ``c``
    becomes base ``b`` (contexts are ``k``-mers over ACGT plus ``N`` for
    positions beyond the sequence ends, encoded in base 5). Contexts absent
    from the loaded table get ``default_rate`` split evenly over the three
    targets.

    ``convention`` fixes the meaning of ``overall_rate``: ``"site"`` scales
    every site hazard by it; ``"sequence"`` rescales so that the total
    hazard of the starting sequence equals it.
    """

    k: int
    table: np.ndarray
    overall_rate: float = 1.0
    convention: str = "site"

    def __post_init__(self):
        if self.k % 2 != 1:
            raise ValueError("context width k must be odd")
        if self.table.shape != (5**self.k, 4):
            raise ValueError(f"rate table must have shape {(5**self.k, 4)}")
        if np.any(self.table < 0):
            raise ValueError("rates must be non-negative")
        if self.convention not in ("site", "sequence"):
            raise ValueError(f"unknown rate convention {self.convention!r}")
        centre = self.centre_bases()
        self.table[np.arange(self.table.shape[0])[centre < 4], centre[centre < 4]] = 0.0

    @property
    def half(self) -> int:
        return self.k // 2

    def centre_bases(self) -> np.ndarray:
        return (np.arange(5**self.k) // 5**self.half) % 5

    @classmethod
    def from_rates(
        cls,
        k: int,
        rates: Mapping[str, Mapping[str, float]],
        default_rate: float = 0.0,
        **kw,
    ) -> "ContextModel":
        table = np.full((5**k, 4), default_rate / 3.0)
        for ctx, targets in rates.items():
            if len(ctx) != k:
                raise ValueError(f"context {ctx!r} is not of width {k}")
            table[_context_code(ctx), :] = 0.0
            for b, r in targets.items():
                table[_context_code(ctx), _BASE_CODE[b]] = r
        return cls(k, table, **kw)

    @classmethod
    def uniform(cls, rate: float = 1.0, k: int = 1, **kw) -> "ContextModel":
        """Every site mutates at ``rate`` in total, targets equally likely."""
        return cls(k, np.full((5**k, 4), rate / 3.0), **kw)

    @classmethod
    def from_csv(cls, path, default_rate: float = 0.0, **kw) -> "ContextModel":
        """Read a ``context,to_base,rate`` table."""
        rates: dict = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rates.setdefault(row["context"].upper(), {})[row["to_base"].upper()] = float(
                    row["rate"]
                )
        if not rates:
            raise ValueError(f"{path}: empty context table")
        k = len(next(iter(rates)))
        return cls.from_rates(k, rates, default_rate, **kw)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["context", "to_base", "rate"])
            for code in range(5**self.k):
                ctx = _context_str(code, self.k)
                if "N" in ctx:
                    continue
                for b in range(4):
                    if BASES[b] != ctx[self.half]:
                        w.writerow([ctx, BASES[b], repr(float(self.table[code, b]))])

    def context_codes(self, codes: np.ndarray) -> np.ndarray:
        padded = np.concatenate(
            [np.full(self.half, _N), codes.astype(np.int64), np.full(self.half, _N)]
        )
        out = np.zeros(codes.size, dtype=np.int64)
        for o in range(self.k):
            out = out * 5 + padded[o : o + codes.size]
        return out

    def site_hazards(self, codes: np.ndarray) -> np.ndarray:
        """Unscaled ``(L, 4)`` hazard matrix of a sequence."""
        return self.table[self.context_codes(codes)]

    def scale_for(self, codes: np.ndarray) -> float:
        if self.convention == "site":
            return self.overall_rate
        total = self.site_hazards(codes).sum()
        return self.overall_rate / total if total > 0 else 0.0

    def refresh(self, codes: np.ndarray, hazards: np.ndarray, site: int, scale: float):
        """Recompute hazard rows whose context contains ``site``."""
        L = codes.size
        for s in range(max(0, site - self.half), min(L, site + self.half + 1)):
            c = 0
            for o in range(s - self.half, s + self.half + 1):
                c = c * 5 + (int(codes[o]) if 0 <= o < L else _N)
            hazards[s] = self.table[c] * scale


def _context_code(ctx: str) -> int:
    c = 0
    for b in ctx.upper():
        c = c * 5 + (_N if b == "N" else _BASE_CODE[b])
    return c


def _context_str(code: int, k: int) -> str:
    out = []
    for _ in range(k):
        code, r = divmod(code, 5)
        out.append((BASES + "N")[r])
    return "".join(reversed(out))


def synthetic_context_model(
    k: int = 5, base_rate: float = 1.0, hotspot: float = 10.0, **kw
) -> ContextModel:
    """Hotspot-aware toy model: ``WRC`` (and its reverse complement ``GYW``)
    centred on the mutating base get ``hotspot`` times the base rate;
    transitions are twice as likely as transversions."""
    if k < 3:
        raise ValueError("the hotspot motifs need k >= 3")
    half = k // 2
    table = np.zeros((5**k, 4))
    transition = {"A": "G", "G": "A", "C": "T", "T": "C"}
    for code in range(5**k):
        ctx = _context_str(code, k)
        c = ctx[half]
        if c == "N":
            continue
        padded = "N" + ctx + "N"  # lets k = 3 look two bases out
        left2, left1 = padded[half - 1], padded[half]
        right1, right2 = padded[half + 2], padded[half + 3]
        mult = 1.0
        if c == "C" and left1 in "AG" and left2 in "AT":
            mult = hotspot
        elif c == "G" and right1 in "CT" and right2 in "AT":
            mult = hotspot
        weights = np.array([2.0 if transition[c] == b else 1.0 for b in BASES])
        weights[_BASE_CODE[c]] = 0.0
        table[code] = base_rate * mult * weights / weights.sum()
    return ContextModel(k, table, **kw)


# -- affinity model ------------------------------------------------------------


@dataclass
class AffinityModel:
    """Additive affinity map relative to the naive sequence.

    ``effects[i, a]`` is the change in affinity when codon ``i`` encodes
    amino acid ``a`` (index into ``AMINO_ACIDS`` without the stop symbol).
    Effects of the naive residues are zero by construction. Sequences with
    a stop codon get ``stop_affinity``.
    """

    naive: str
    effects: np.ndarray
    stop_affinity: float = -10.0

    def __post_init__(self):
        self.naive = self.naive.upper()
        n_codons = len(self.naive) // 3
        if len(self.naive) % 3:
            raise ValueError("naive sequence length is not a multiple of 3")
        if self.effects.shape != (n_codons, 20):
            raise ValueError(f"effects must have shape {(n_codons, 20)}")
        naive_aa = _aa_codes(encode(self.naive))
        if np.any(naive_aa == STOP):
            raise ValueError("naive sequence contains a stop codon")
        self.effects = self.effects.astype(float).copy()
        self.effects[np.arange(n_codons), naive_aa] = 0.0
        # stop column makes table lookups total; stops are handled separately
        self._table = np.hstack([self.effects, np.zeros((n_codons, 1))])

    @property
    def length(self) -> int:
        return len(self.naive)

    @classmethod
    def from_csv(cls, path, naive: str, **kw) -> "AffinityModel":
        """Read a ``site,amino_acid,effect`` table; missing entries are 0."""
        n_codons = len(naive) // 3
        effects = np.zeros((n_codons, 20))
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                aa = row["amino_acid"].strip().upper()
                if aa == "*":
                    continue
                effects[int(row["site"]), _AA_CODE[aa]] = float(row["effect"])
        return cls(naive, effects, **kw)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "amino_acid", "effect"])
            for i in range(self.effects.shape[0]):
                for a in range(20):
                    if self.effects[i, a] != 0.0:
                        w.writerow([i, AMINO_ACIDS[a], repr(float(self.effects[i, a]))])

    def affinity_codes(self, codes: np.ndarray) -> float:
        aa = _aa_codes(codes)
        if np.any(aa == STOP):
            return self.stop_affinity
        return float(self._table[np.arange(aa.size), aa].sum())


def _aa_codes(codes: np.ndarray) -> np.ndarray:
    c = codes.reshape(-1, 3).astype(np.int64)
    return _CODON_AA[16 * c[:, 0] + 4 * c[:, 1] + c[:, 2]]


def affinity_of(seq: str | np.ndarray, model: AffinityModel) -> float:
    """Additive affinity of ``seq`` relative to the naive sequence."""
    codes = encode(seq) if isinstance(seq, str) else np.asarray(seq)
    if codes.size != model.length:
        raise ValueError(f"sequence length {codes.size} != model length {model.length}")
    return model.affinity_codes(codes)


class _AffinityTracker:
    """Incremental affinity of one sequence under point mutations."""

    __slots__ = ("model", "aa", "total", "n_stop")

    def __init__(self, model: AffinityModel, codes: np.ndarray):
        self.model = model
        self.aa = _aa_codes(codes)
        self.total = float(model._table[np.arange(self.aa.size), self.aa].sum())
        self.n_stop = int(np.sum(self.aa == STOP))

    def copy(self):
        new = object.__new__(_AffinityTracker)
        new.model, new.aa, new.total, new.n_stop = self.model, self.aa.copy(), self.total, self.n_stop
        return new

    def update(self, codes: np.ndarray, site: int):
        i = site // 3
        c = codes[3 * i : 3 * i + 3]
        new = int(_CODON_AA[16 * int(c[0]) + 4 * int(c[1]) + int(c[2])])
        old = int(self.aa[i])
        if new != old:
            tab = self.model._table
            self.total += tab[i, new] - tab[i, old]
            self.n_stop += (new == STOP) - (old == STOP)
            self.aa[i] = new

    @property
    def value(self) -> float:
        return self.model.stop_affinity if self.n_stop else self.total


def synthetic_affinity_model(
    naive: str, rng: np.random.Generator, stop_affinity: float = -10.0
) -> AffinityModel:
    """Random DMS-like effect table: mostly mildly deleterious, a heavy
    deleterious tail, and a few beneficial substitutions."""
    n = len(naive) // 3
    kind = rng.choice(3, size=(n, 20), p=[0.68, 0.25, 0.07])
    effects = np.where(
        kind == 0,
        rng.normal(-0.05, 0.1, (n, 20)),
        np.where(kind == 1, rng.normal(-0.8, 0.5, (n, 20)), rng.normal(0.5, 0.25, (n, 20))),
    )
    return AffinityModel(naive, effects, stop_affinity)


def synthetic_naive(length: int, rng: np.random.Generator) -> str:
    """Random coding sequence with no stop codons."""
    sense = [c for c, a in CODON_TABLE.items() if a != "*"]
    return "".join(rng.choice(sense, size=length // 3))


def load_synthetic_models(convention: str = "site", overall_rate: float = 1.0):
    """Bundled synthetic naive sequence, affinity table and 5-mer context
    model (stand-ins for the experimental tables, which are not shipped)."""
    naive = _data_path("synthetic_naive.txt").read_text().strip()
    aff = AffinityModel.from_csv(_data_path("synthetic_affinity.csv"), naive)
    ctx = ContextModel.from_csv(
        _data_path("synthetic_context.csv"),
        default_rate=1.0,
        overall_rate=overall_rate,
        convention=convention,
    )
    return naive, aff, ctx


# -- mutation chains -----------------------------------------------------------


@dataclass(frozen=True)
class Mutation:
    time: float
    site: int
    src: str
    dst: str


@dataclass(frozen=True)
class MutationChain:
    """Point mutations of one sequence over ``[0, duration]``."""

    start: str
    duration: float
    mutations: tuple[Mutation, ...] = ()

    def __post_init__(self):
        times = [m.time for m in self.mutations]
        if any(not 0 <= t <= self.duration for t in times):
            raise ValueError("mutation time outside [0, duration]")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("mutation times must be strictly increasing")
        if any(m.src == m.dst for m in self.mutations):
            raise ValueError("mutation with identical source and target base")

    def sequences(self) -> Iterable[tuple[np.ndarray, float, float]]:
        """Yield ``(codes, t_enter, t_leave)`` for each visited sequence; the
        array is reused and mutated in place between yields."""
        codes = encode(self.start)
        t = 0.0
        for m in self.mutations:
            yield codes, t, m.time
            if BASES[codes[m.site]] != m.src:
                raise ValueError(f"mutation at site {m.site} does not match sequence")
            codes[m.site] = _BASE_CODE[m.dst]
            t = m.time
        yield codes, t, self.duration

    def final(self) -> str:
        codes = encode(self.start)
        for m in self.mutations:
            codes[m.site] = _BASE_CODE[m.dst]
        return decode(codes)


def mutate_chain(
    seq: str, model: ContextModel, T: float, rng: np.random.Generator
) -> MutationChain:
    """Exact simulation of the context-dependent substitution process for
    time ``T`` (no births or deaths)."""
    if not T > 0:
        raise ValueError("duration must be positive")
    codes = encode(seq)
    scale = model.scale_for(codes)
    hz = model.site_hazards(codes) * scale
    muts = []
    t = 0.0
    while True:
        total = hz.sum()
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t >= T:
            break
        flat = np.cumsum(hz.ravel())
        j = int(np.searchsorted(flat, rng.random() * flat[-1], side="right"))
        j = min(j, flat.size - 1)
        site, b = divmod(j, 4)
        muts.append(Mutation(t, site, BASES[codes[site]], BASES[b]))
        codes[site] = b
        model.refresh(codes, hz, site, scale)
    return MutationChain(seq, float(T), tuple(muts))


# -- rate matrix estimation ----------------------------------------------------


@dataclass(frozen=True)
class BinPath:
    """Piecewise-constant bin trajectory: ``jumps`` are ``(time, new_bin)``."""

    start: int
    duration: float
    jumps: tuple[tuple[float, int], ...] = ()


def chain_bin_path(chain: MutationChain, affinity: AffinityModel, space: TypeSpace) -> BinPath:
    codes = encode(chain.start)
    tracker = _AffinityTracker(affinity, codes)
    cur = bin_index(space, tracker.value)
    start = cur
    jumps = []
    for m in chain.mutations:
        codes[m.site] = _BASE_CODE[m.dst]
        tracker.update(codes, m.site)
        new = bin_index(space, tracker.value)
        if new != cur:
            jumps.append((m.time, new))
            cur = new
    return BinPath(start, chain.duration, tuple(jumps))


def gamma_mle(paths: Sequence[BinPath], n_bins: int, allow_unvisited: bool = False):
    """Dwell-time maximum likelihood generator: transitions ``x -> x'``
    divided by total time spent in ``x``. Returns ``(gamma, counts, dwell)``."""
    counts = np.zeros((n_bins, n_bins))
    dwell = np.zeros(n_bins)
    for path in paths:
        cur, t = path.start, 0.0
        for tj, new in path.jumps:
            dwell[cur] += tj - t
            counts[cur, new] += 1
            cur, t = new, tj
        dwell[cur] += path.duration - t
    unvisited = np.flatnonzero(dwell <= 0)
    if unvisited.size and not allow_unvisited:
        raise ValueError(f"bins with zero dwell time: {unvisited.tolist()}")
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(dwell[:, None] > 0, counts / dwell[:, None], 0.0)
    np.fill_diagonal(gamma, 0.0)
    np.fill_diagonal(gamma, -gamma.sum(axis=1))
    return gamma, counts, dwell


def estimate_gamma(
    chains: Sequence[MutationChain],
    affinity: AffinityModel,
    space: TypeSpace,
    allow_unvisited: bool = False,
) -> np.ndarray:
    """Estimate the type change rate matrix from mutation chains."""
    if not chains:
        raise ValueError("need at least one mutation chain")
    paths = [chain_bin_path(c, affinity, space) for c in chains]
    return gamma_mle(paths, len(space), allow_unvisited)[0]


def simulate_ctmc_path(generator: np.ndarray, start: int, duration: float, rng) -> BinPath:
    """Sample a path of a finite-state CTMC with the given generator."""
    g = np.asarray(generator, dtype=float)
    t, cur, jumps = 0.0, start, []
    while True:
        rate = -g[cur, cur]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        w = g[cur].copy()
        w[cur] = 0.0
        cur = int(rng.choice(len(w), p=w / w.sum()))
        jumps.append((t, cur))
    return BinPath(start, duration, tuple(jumps))


# -- branching process over sequences -----------------------------------------


def simulate_with_sequences(
    params: Params,
    affinity: AffinityModel,
    context: ContextModel,
    space: TypeSpace,
    opts: SimOptions,
    rng: np.random.Generator,
) -> FullTree:
    """Branching process whose lineages carry sequences.

    Each lineage mutates under ``context``; its type is the bin of its
    affinity and its birth rate is evaluated at that bin's value.
    ``params.delta``/``gamma_star`` are ignored. Mutations that keep the bin
    add no node. Nodes record affinities.
    """
    return simulate_sequences_raw(params, affinity, context, space, opts, rng).to_full_tree()


def simulate_sequences_raw(params, affinity, context, space, opts, rng) -> RawTree:
    lam_by_bin = params.birth_rates(space)
    mu = float(params.mu)
    T = float(opts.t_total)
    cap = opts.capacity
    hard_k = cap.K if cap is not None and cap.mode == "hard" else None
    soft = cap if cap is not None and cap.mode == "soft" else None
    u = _Uniforms(rng)

    naive = encode(affinity.naive)
    scale = context.scale_for(naive)
    root_hz = context.site_hazards(naive) * scale
    root_aff = _AffinityTracker(affinity, naive)
    root_bin = bin_index(space, root_aff.value)

    parent, time, event, state, aff = [-1], [T], [ROOT], [root_bin], [root_aff.value]

    def new_node(p, t, e, s, a):
        parent.append(p)
        time.append(t)
        event.append(e)
        state.append(s)
        aff.append(a)
        return len(parent) - 1

    # per-slot lineage data; slots are compacted on removal
    seqs = [naive.copy()]
    hzs = [root_hz]
    trackers = [root_aff]
    node_of = [0]
    bins = [root_bin]
    cap_n = 64
    lam_arr = np.zeros(cap_n)
    mut_arr = np.zeros(cap_n)
    lam_arr[0] = lam_by_bin[root_bin]
    mut_arr[0] = root_hz.sum()

    def remove(slot):
        last = len(seqs) - 1
        if slot != last:
            seqs[slot], hzs[slot], trackers[slot] = seqs[last], hzs[last], trackers[last]
            node_of[slot], bins[slot] = node_of[last], bins[last]
            lam_arr[slot], mut_arr[slot] = lam_arr[last], mut_arr[last]
        seqs.pop(), hzs.pop(), trackers.pop(), node_of.pop(), bins.pop()
        lam_arr[last] = mut_arr[last] = 0.0

    def append(seq, hz, tr, node, b, lam, mrate):
        nonlocal cap_n, lam_arr, mut_arr
        n = len(seqs)
        if n >= cap_n:
            cap_n *= 2
            lam_arr = np.concatenate([lam_arr, np.zeros(cap_n - lam_arr.size)])
            mut_arr = np.concatenate([mut_arr, np.zeros(cap_n - mut_arr.size)])
        seqs.append(seq)
        hzs.append(hz)
        trackers.append(tr)
        node_of.append(node)
        bins.append(b)
        lam_arr[n] = lam
        mut_arr[n] = mrate

    t = 0.0
    n_events = 0
    max_alive = 1
    while seqs:
        n = len(seqs)
        mod = 1.0
        if soft is not None:
            z = soft.sharpness * (n - soft.K)
            mod = 1.0 / (1.0 + math.exp(z)) if z < 700 else 0.0
        w = lam_arr[:n] * mod + mu + mut_arr[:n]
        cw = np.cumsum(w)
        total = cw[-1]
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
        i = min(int(np.searchsorted(cw, u() * total, side="right")), n - 1)
        r = u() * w[i]
        tb = T - t
        lam_i = lam_arr[i] * mod
        if r < lam_i:
            if hard_k is not None and n + 1 > hard_k:
                j = int(u() * (n + 1))
                if j >= n - 1:
                    continue
                if j >= i:
                    j += 1
                new_node(node_of[j], tb, DEATH, bins[j], trackers[j].value)
                remove(j)
                if i == len(seqs):  # the acting lineage was moved into slot j
                    i = j
            nid = new_node(node_of[i], tb, BIRTH, bins[i], trackers[i].value)
            node_of[i] = nid
            append(seqs[i].copy(), hzs[i].copy(), trackers[i].copy(), nid, bins[i], lam_arr[i], mut_arr[i])
        elif r < lam_i + mu:
            new_node(node_of[i], tb, DEATH, bins[i], trackers[i].value)
            remove(i)
        else:
            hz = hzs[i]
            flat = np.cumsum(hz.ravel())
            j = min(int(np.searchsorted(flat, u() * flat[-1], side="right")), flat.size - 1)
            site, b = divmod(j, 4)
            seq = seqs[i]
            seq[site] = b
            context.refresh(seq, hz, site, scale)
            mut_arr[i] = hz.sum()
            tr = trackers[i]
            tr.update(seq, site)
            nb = bin_index(space, tr.value)
            if nb != bins[i]:
                node_of[i] = new_node(node_of[i], tb, TYPE_CHANGE, nb, tr.value)
                bins[i] = nb
                lam_arr[i] = lam_by_bin[nb]
        max_alive = max(max_alive, len(seqs))

    for slot in range(len(seqs)):
        new_node(node_of[slot], 0.0, SURVIVOR, bins[slot], trackers[slot].value)
    raw = RawTree(parent, time, event, state, T, n_events, max_alive)
    raw.extra["affinity"] = aff
    return raw


def simulate_with_sequences_conditioned(
    params: Params,
    affinity: AffinityModel,
    context: ContextModel,
    space: TypeSpace,
    opts: SimOptions,
    rng: np.random.Generator,
    rho: float | None = None,
    rho_index: int = 0,
):
    """Rejection loop around :func:`simulate_sequences_raw` until at least one
    survivor is sampled. Returns the pruned observed tree (affinities kept)
    and the number of rejected draws."""
    from .simulate import prune

    rho = params.rho[rho_index] if rho is None else rho
    for rejected in range(opts.max_rejections + 1):
        raw = simulate_sequences_raw(params, affinity, context, space, opts, rng)
        if raw.sample_survivors(rho, rng):
            return prune(raw.to_full_tree(), None, rho_index=rho_index), rejected
    raise SimulationError(
        f"rejection budget exhausted: no observed tree in {opts.max_rejections + 1} draws"
    )
