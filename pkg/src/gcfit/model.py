"""Parameters, birth-rate curves, the discretized affinity type space, and priors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

POSITIVE_PARAMS = ("phi1", "phi2", "phi4", "mu", "delta", "lam")


class ModelError(ValueError):
    """Raised when a model object violates its invariants."""


@dataclass(frozen=True)
class TypeSpace:
    """Ordered set of discretized affinity values.

    ``values`` are the bin medians and ``boundaries`` the cutoffs between
    consecutive bins, so ``len(boundaries) == len(values) - 1``.
    """

    values: tuple[float, ...]
    boundaries: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        boundaries = tuple(float(b) for b in self.boundaries)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "boundaries", boundaries)
        if len(values) < 2:
            raise ModelError("a type space needs at least 2 values")
        if len(boundaries) != len(values) - 1:
            raise ModelError(
                f"expected {len(values) - 1} boundaries, got {len(boundaries)}"
            )
        if np.any(np.diff(values) <= 0) or np.any(np.diff(boundaries) <= 0):
            raise ModelError("values and boundaries must be strictly increasing")
        for k, b in enumerate(boundaries):
            if not values[k] < b < values[k + 1]:
                raise ModelError(
                    f"boundary {k} ({b}) not strictly between values "
                    f"{values[k]} and {values[k + 1]}"
                )

    def __len__(self):
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values)

    def to_json(self) -> str:
        return json.dumps(
            {"values": list(self.values), "boundaries": list(self.boundaries)},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "TypeSpace":
        doc = json.loads(text)
        try:
            return cls(tuple(doc["values"]), tuple(doc["boundaries"]))
        except KeyError as e:
            raise ModelError(f"type space document missing key {e}") from None


@dataclass(frozen=True)
class SigmoidParams:
    """Sigmoidal birth rate ``phi1 / (1 + exp(-phi2 (x - phi3))) + phi4``."""

    phi1: float
    phi2: float
    phi3: float
    phi4: float

    def __post_init__(self):
        for name in ("phi1", "phi2", "phi4"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be strictly positive")

    def __call__(self, x):
        return birth_rate(self, x)

    def as_dict(self) -> dict[str, float]:
        return {
            "phi1": self.phi1,
            "phi2": self.phi2,
            "phi3": self.phi3,
            "phi4": self.phi4,
        }


@dataclass(frozen=True)
class ConstantBirth:
    """Birth rate that does not depend on affinity."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ModelError("lam must be strictly positive")

    def __call__(self, x):
        return birth_rate(self, x)

    def as_dict(self) -> dict[str, float]:
        return {"lam": self.lam}


def birth_rate(phi, x):
    """Evaluate the birth-rate curve ``phi`` at affinity ``x`` (scalar or array)."""
    x = np.asarray(x, dtype=float)
    if isinstance(phi, ConstantBirth):
        out = np.full_like(x, phi.lam)
    else:
        # scipy's expit is stable for large |x|
        from scipy.special import expit

        out = phi.phi1 * expit(phi.phi2 * (x - phi.phi3)) + phi.phi4
    return float(out) if out.ndim == 0 else out


def _canonical_gamma(matrix, tol: float = 1e-4) -> np.ndarray:
    g = np.array(matrix, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ModelError("type change matrix must be square")
    off = g.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0):
        raise ModelError("type change matrix has negative off-diagonal entries")
    scale = max(float(np.abs(g).max()), 1e-300)
    row_sums = g.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums) > tol * scale)
    if bad.size:
        raise ModelError(f"rows {bad.tolist()} of type change matrix do not sum to 0")
    # printed matrices carry rounding error; the diagonal is -Gamma_x by definition
    np.fill_diagonal(off, -off.sum(axis=1))
    off.setflags(write=False)
    return off


@dataclass(frozen=True, eq=False)
class Params:
    """Full parameter set of the branching process.

    The effective type change matrix is ``delta * gamma_star``. ``rho`` holds
    one sampling probability per tree group (trees refer to it by index).
    """

    phi: SigmoidParams | ConstantBirth
    mu: float
    delta: float
    gamma_star: np.ndarray
    rho: tuple[float, ...] = (1.0,)
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gamma_star", _canonical_gamma(self.gamma_star))
        rho = (self.rho,) if np.isscalar(self.rho) else tuple(self.rho)
        object.__setattr__(self, "rho", tuple(float(r) for r in rho))
        if not self.mu > 0:
            raise ModelError("mu must be strictly positive")
        if not self.delta > 0:
            raise ModelError("delta must be strictly positive")
        if not self.rho or any(not 0 < r <= 1 for r in self.rho):
            raise ModelError("sampling probabilities must lie in (0, 1]")
        if self.sigma != 0:
            raise ModelError("dead-lineage sampling probability sigma is fixed at 0")

    @property
    def n_types(self) -> int:
        return self.gamma_star.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        return self.delta * self.gamma_star

    def birth_rates(self, space: TypeSpace) -> np.ndarray:
        if len(space) != self.n_types:
            raise ModelError(
                f"type space has {len(space)} values but gamma_star is "
                f"{self.n_types}x{self.n_types}"
            )
        return np.atleast_1d(birth_rate(self.phi, space.array))

    def values(self) -> dict[str, float]:
        """Named scalar parameters, as used by priors and chains."""
        return {**self.phi.as_dict(), "mu": self.mu, "delta": self.delta}

    def with_values(self, **values) -> "Params":
        """Copy with named scalar parameters replaced."""
        phi = self.phi
        phi_keys = set(phi.as_dict())
        phi_updates = {k: v for k, v in values.items() if k in phi_keys}
        if phi_updates:
            phi = replace(phi, **phi_updates)
        rest = {k: v for k, v in values.items() if k not in phi_keys}
        unknown = set(rest) - {"mu", "delta", "rho"}
        if unknown:
            raise ModelError(f"unknown parameters {sorted(unknown)}")
        return replace(self, phi=phi, **rest)

    def key(self) -> tuple:
        """Hashable identity used to cache ODE solutions."""
        return (
            tuple(self.values().items()),
            self.gamma_star.tobytes(),
            self.rho,
        )


def discretize(samples: Sequence[float], n: int) -> TypeSpace:
    """Build a type space of ``n`` bins with evenly spaced cutoffs over the
    sample range; each type value is the median of the samples in its bin."""
    if n < 2:
        raise ModelError("need at least 2 bins")
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ModelError("no samples to discretize")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise ModelError("empty bin 1: all samples are identical")
    boundaries = lo + (hi - lo) * np.arange(1, n) / n
    idx = np.searchsorted(boundaries, x, side="right")
    values = []
    for k in range(n):
        members = x[idx == k]
        if members.size == 0:
            raise ModelError(
                f"empty bin {k}: no samples in "
                f"[{([lo] + list(boundaries))[k]:.6g}, "
                f"{(list(boundaries) + [hi])[k]:.6g}]"
            )
        values.append(float(np.median(members)))
    return TypeSpace(tuple(values), tuple(boundaries.tolist()))


def bin_index(space: TypeSpace, a):
    """Bin containing affinity ``a``; ties go to the higher bin and
    out-of-range values clamp to the extreme bins."""
    idx = np.searchsorted(np.asarray(space.boundaries), a, side="right")
    return int(idx) if np.ndim(idx) == 0 else idx


@dataclass(frozen=True)
class Prior:
    """Univariate prior. ``lognormal`` takes (location, scale) of the
    underlying normal; ``normal`` takes (mean, variance)."""

    kind: str
    loc: float
    scale: float

    def __post_init__(self):
        if self.kind not in ("lognormal", "normal"):
            raise ModelError(f"unknown prior family {self.kind!r}")
        if not self.scale > 0:
            raise ModelError("prior scale/variance must be strictly positive")

    @property
    def dist(self):
        if self.kind == "lognormal":
            return stats.lognorm(s=self.scale, scale=math.exp(self.loc))
        return stats.norm(loc=self.loc, scale=math.sqrt(self.scale))

    def logpdf(self, x: float) -> float:
        if self.kind == "lognormal":
            if not x > 0:
                return -math.inf
            z = (math.log(x) - self.loc) / self.scale
            return -0.5 * z * z - math.log(x * self.scale * math.sqrt(2 * math.pi))
        var = self.scale
        return -0.5 * (x - self.loc) ** 2 / var - 0.5 * math.log(2 * math.pi * var)

    def median(self) -> float:
        return math.exp(self.loc) if self.kind == "lognormal" else self.loc

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "lognormal":
            return rng.lognormal(self.loc, self.scale, size)
        return rng.normal(self.loc, math.sqrt(self.scale), size)


@dataclass(frozen=True)
class PriorSpec:
    priors: Mapping[str, Prior] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "PriorSpec":
        """Priors over the sigmoid, death rate and type-change scale."""
        return cls(
            {
                "phi1": Prior("lognormal", 0.5, 0.75),
                "phi2": Prior("lognormal", 0.5, 0.75),
                "phi3": Prior("normal", 0.0, 2.0),
                "phi4": Prior("lognormal", -0.5, 1.2),
                "mu": Prior("lognormal", 0.0, 0.5),
                "delta": Prior("lognormal", 0.0, 0.5),
            }
        )

    @classmethod
    def constant_rate(cls) -> "PriorSpec":
        """Priors for the two-parameter constant birth/death model."""
        return cls(
            {
                "lam": Prior("lognormal", 1.5, 1.0),
                "mu": Prior("lognormal", 0.0, 0.5),
            }
        )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.priors)

    def medians(self) -> dict[str, float]:
        return {k: p.median() for k, p in self.priors.items()}

    def sample(self, rng: np.random.Generator, size=None) -> dict:
        return {k: p.sample(rng, size) for k, p in self.priors.items()}


def log_prior(theta: Params | Mapping[str, float], spec: PriorSpec) -> float:
    """Sum of prior log densities of the parameters named in ``spec``."""
    values = theta.values() if isinstance(theta, Params) else theta
    total = 0.0
    for name, prior in spec.priors.items():
        x = values[name]
        if name in POSITIVE_PARAMS and not x > 0:
            return -math.inf
        total += prior.logpdf(x)
    return total


def _data_path(name: str) -> Path:
    return Path(str(resources.files("gcfit") / "data" / name))


def load_type_space(path: str | Path | None = None) -> TypeSpace:
    """Load a type space JSON file; defaults to the bundled 8-bin space."""
    path = _data_path("type_space.json") if path is None else Path(path)
    return TypeSpace.from_json(path.read_text())


def load_gamma(path: str | Path | None = None) -> np.ndarray:
    """Load a ``{"matrix": [[...]]}`` file; defaults to the bundled 8x8
    baseline matrix."""
    path = _data_path("gamma_star.json") if path is None else Path(path)
    doc = json.loads(Path(path).read_text())
    if "matrix" not in doc:
        raise ModelError("gamma document missing 'matrix'")
    return np.array(doc["matrix"], dtype=float) * float(doc.get("scale", 1.0))


def save_gamma(matrix, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"matrix": np.asarray(matrix).tolist()}, indent=2)
    )


def single_type(lam: float, mu: float, rho: float = 1.0) -> tuple[Params, TypeSpace]:
    """Constant-rate model on a placeholder two-value space with no type
    changes; trees use state 0 only."""
    space = TypeSpace((0.0, 1.0), (0.5,))
    params = Params(ConstantBirth(lam), mu, 1.0, np.zeros((2, 2)), (rho,))
    return params, space
