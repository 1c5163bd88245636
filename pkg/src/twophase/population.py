"""Superpopulation models and the finite populations they generate.

A :class:`ModelSpec` describes, stratum by stratum, how many clusters there
are, how large they are and how unit values are distributed.
:func:`realize_population` turns a model and a seed into an immutable
:class:`FinitePopulation`. One-stage populations are the special case where
every cluster holds a single unit.

Units are stored flat, ordered by stratum and then by cluster. Labels are
0-based throughout: cluster ``(h, i)`` is the ``i``-th cluster of stratum ``h``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, ClassVar, Iterator, Sequence

import numpy as np
from scipy import integrate, special, stats

from .errors import ConfigError, UnsupportedError
from .rng import Seed, as_generator


# --------------------------------------------------------------------------
# distribution families
# --------------------------------------------------------------------------


class Family:
    """A univariate distribution for unit values."""

    kind: ClassVar[str]
    enumerable: ClassVar[bool] = False

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def var(self) -> float:
        raise NotImplementedError

    def total_abs_moment(self, m: int, power: float) -> float:
        """``E|X_1 + ... + X_m|**power`` for i.i.d. copies."""
        raise NotImplementedError

    def abs_moment(self, power: float) -> float:
        return self.total_abs_moment(1, power)

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        raise UnsupportedError(f"{self.kind} has no finite support")

    def to_dict(self) -> dict[str, Any]:
        d = {"family": self.kind}
        d.update({k: v for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class PointMass(Family):
    value: float
    kind: ClassVar[str] = "point"
    enumerable: ClassVar[bool] = True

    def sample(self, rng, size):
        return np.full(size, float(self.value))

    @property
    def mean(self):
        return float(self.value)

    @property
    def var(self):
        return 0.0

    def total_abs_moment(self, m, power):
        return abs(m * self.value) ** power

    def support(self):
        return np.array([float(self.value)]), np.array([1.0])


@dataclass(frozen=True)
class Bernoulli(Family):
    q: float
    kind: ClassVar[str] = "bernoulli"
    enumerable: ClassVar[bool] = True

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ConfigError(f"Bernoulli q must lie in [0, 1], got {self.q}")

    def sample(self, rng, size):
        return (rng.random(size) < self.q).astype(float)

    @property
    def mean(self):
        return float(self.q)

    @property
    def var(self):
        return self.q * (1.0 - self.q)

    def total_abs_moment(self, m, power):
        k = np.arange(m + 1)
        return float(np.sum(stats.binom.pmf(k, m, self.q) * k.astype(float) ** power))

    def support(self):
        return np.array([0.0, 1.0]), np.array([1.0 - self.q, self.q])


def _normal_abs_moment(loc: float, var: float, power: float) -> float:
    if var <= 0.0:
        return abs(loc) ** power
    sd = math.sqrt(var)
    return float(
        sd**power
        * 2 ** (power / 2)
        * special.gamma((power + 1) / 2)
        / math.sqrt(math.pi)
        * special.hyp1f1(-power / 2, 0.5, -(loc**2) / (2 * var))
    )


@dataclass(frozen=True)
class Normal(Family):
    loc: float
    var_: float
    kind: ClassVar[str] = "normal"

    def __post_init__(self):
        if self.var_ < 0:
            raise ConfigError(f"negative variance {self.var_}")

    def sample(self, rng, size):
        return rng.normal(self.loc, math.sqrt(self.var_), size)

    @property
    def mean(self):
        return float(self.loc)

    @property
    def var(self):
        return float(self.var_)

    def total_abs_moment(self, m, power):
        return _normal_abs_moment(m * self.loc, m * self.var_, power)

    def to_dict(self):
        return {"family": "normal", "mean": self.loc, "var": self.var_}


@dataclass(frozen=True)
class Gamma(Family):
    shape: float
    scale: float
    kind: ClassVar[str] = "gamma"

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ConfigError("gamma shape and scale must be positive")

    def sample(self, rng, size):
        return rng.gamma(self.shape, self.scale, size)

    @property
    def mean(self):
        return self.shape * self.scale

    @property
    def var(self):
        return self.shape * self.scale**2

    def total_abs_moment(self, m, power):
        a = m * self.shape
        return float(self.scale**power * np.exp(special.gammaln(a + power) - special.gammaln(a)))


@dataclass(frozen=True)
class Pareto(Family):
    """Pareto type I on ``[scale, inf)`` with tail index ``alpha``."""

    alpha: float
    scale: float = 1.0
    kind: ClassVar[str] = "pareto"

    def __post_init__(self):
        if self.alpha <= 0 or self.scale <= 0:
            raise ConfigError("pareto alpha and scale must be positive")

    def sample(self, rng, size):
        return self.scale * (1.0 - rng.random(size)) ** (-1.0 / self.alpha)

    @property
    def mean(self):
        if self.alpha <= 1:
            raise UnsupportedError("pareto mean is infinite for alpha <= 1")
        return self.alpha * self.scale / (self.alpha - 1)

    @property
    def var(self):
        if self.alpha <= 2:
            raise UnsupportedError("pareto variance is infinite for alpha <= 2")
        a = self.alpha
        return self.scale**2 * a / ((a - 1) ** 2 * (a - 2))

    def total_abs_moment(self, m, power):
        if power >= self.alpha:
            return math.inf
        if m != 1:
            raise UnsupportedError("pareto sums have no closed-form moments")
        return self.alpha * self.scale**power / (self.alpha - power)


_FAMILIES = {
    "point": lambda d: PointMass(float(d["value"])),
    "bernoulli": lambda d: Bernoulli(float(d["q"])),
    "normal": lambda d: Normal(float(d["mean"]), float(d["var"])),
    "gamma": lambda d: Gamma(float(d["shape"]), float(d["scale"])),
    "pareto": lambda d: Pareto(float(d["alpha"]), float(d.get("scale", 1.0))),
}


def family_from_dict(d: dict[str, Any]) -> Family:
    try:
        return _FAMILIES[d["family"]](d)
    except KeyError as exc:
        raise ConfigError(f"bad family description {d!r}: missing {exc}") from None


# --------------------------------------------------------------------------
# cluster sizes and the two-stage hierarchy
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedSizes:
    """Explicit sizes (one per cluster) or a single constant size."""

    sizes: tuple[int, ...] | int

    def __post_init__(self):
        values = (self.sizes,) if isinstance(self.sizes, int) else self.sizes
        if any(int(v) < 1 for v in values):
            raise ConfigError("cluster sizes must be >= 1")

    def draw(self, rng: np.random.Generator, n_clusters: int) -> np.ndarray:
        if isinstance(self.sizes, int):
            return np.full(n_clusters, self.sizes, dtype=np.int64)
        if len(self.sizes) != n_clusters:
            raise ConfigError(f"{len(self.sizes)} sizes given for {n_clusters} clusters")
        return np.asarray(self.sizes, dtype=np.int64)

    def to_dict(self):
        if isinstance(self.sizes, int):
            return {"constant": self.sizes}
        return {"fixed": list(self.sizes)}


@dataclass(frozen=True)
class UniformSizes:
    """Discrete uniform sizes on ``{low, ..., high}``."""

    low: int
    high: int

    def __post_init__(self):
        if not 1 <= self.low <= self.high:
            raise ConfigError("uniform sizes need 1 <= low <= high")

    def draw(self, rng, n_clusters):
        return rng.integers(self.low, self.high + 1, size=n_clusters, dtype=np.int64)

    def to_dict(self):
        return {"uniform": [self.low, self.high]}


SizeLaw = FixedSizes | UniformSizes


def size_law_from_dict(d: dict[str, Any] | int) -> SizeLaw:
    if isinstance(d, int):
        return FixedSizes(d)
    if "constant" in d:
        return FixedSizes(int(d["constant"]))
    if "fixed" in d:
        if not isinstance(d["fixed"], list):
            raise ConfigError("'fixed' cluster sizes must be a list; use 'constant' for one size")
        return FixedSizes(tuple(int(v) for v in d["fixed"]))
    if "uniform" in d:
        low, high = d["uniform"]
        return UniformSizes(int(low), int(high))
    raise ConfigError(f"bad cluster-size law {d!r}")


@dataclass(frozen=True)
class Hierarchy:
    """Cluster-level ``(mu_hi, sigma_hi^2)`` drawn i.i.d. within a stratum.

    ``mu_hi ~ Normal(mean, gamma)``. ``sigma_hi^2`` equals ``sigma2`` when
    ``sigma2_shape`` is None, otherwise it is Gamma with that shape and mean
    ``sigma2``. Units are then ``Normal(mu_hi, sigma_hi^2)``.
    """

    mean: float
    gamma: float
    sigma2: float
    sigma2_shape: float | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.sigma2 < 0:
            raise ConfigError("hierarchy variances must be >= 0")
        if self.sigma2_shape is not None and self.sigma2_shape <= 0:
            raise ConfigError("sigma2_shape must be positive")

    def draw_cluster_params(self, rng, n_clusters):
        mu = rng.normal(self.mean, math.sqrt(self.gamma), n_clusters)
        if self.sigma2_shape is None:
            s2 = np.full(n_clusters, float(self.sigma2))
        else:
            s2 = rng.gamma(self.sigma2_shape, self.sigma2 / self.sigma2_shape, n_clusters)
        return mu, s2

    def total_abs_moment(self, m: int, power: float) -> float:
        loc = m * self.mean
        if self.sigma2_shape is None:
            return _normal_abs_moment(loc, m * m * self.gamma + m * self.sigma2, power)
        k, theta = self.sigma2_shape, self.sigma2 / self.sigma2_shape

        def integrand(s2):
            return _normal_abs_moment(loc, m * m * self.gamma + m * s2, power) * stats.gamma.pdf(
                s2, k, scale=theta
            )

        value, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
        return float(value)

    def to_dict(self):
        d = {"mean": self.mean, "gamma": self.gamma, "sigma2": self.sigma2}
        if self.sigma2_shape is not None:
            d["sigma2_shape"] = self.sigma2_shape
        return d


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StratumModel:
    """Distributional description of one stratum.

    ``y`` holds one family per component of the study variable. When
    ``hierarchy`` is set the study variable is scalar and ``y`` is ignored.
    ``x`` holds one family per auxiliary component. ``z`` is the per-unit
    design variable; None means ``z = 1`` so a cluster's size measure is its
    unit count.
    """

    n_clusters: int
    sizes: SizeLaw = FixedSizes(1)
    y: tuple[Family, ...] = (PointMass(0.0),)
    x: tuple[Family, ...] = ()
    z: Family | None = None
    hierarchy: Hierarchy | None = None
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError("every stratum needs at least one cluster")
        if not self.y and self.hierarchy is None:
            raise ConfigError("stratum has no study variable")
        if self.beta is not None and len(self.beta) != len(self.x):
            raise ConfigError("beta must have one coefficient per x component")

    @property
    def p(self) -> int:
        return 1 if self.hierarchy is not None else len(self.y)

    def to_dict(self):
        d: dict[str, Any] = {"n_clusters": self.n_clusters, "sizes": self.sizes.to_dict()}
        if self.hierarchy is not None:
            d["hierarchy"] = self.hierarchy.to_dict()
        else:
            d["y"] = [f.to_dict() for f in self.y]
        if self.x:
            d["x"] = [f.to_dict() for f in self.x]
        if self.z is not None:
            d["z"] = self.z.to_dict()
        if self.beta is not None:
            d["beta"] = list(self.beta)
        return d


@dataclass(frozen=True)
class ModelSpec:
    strata: tuple[StratumModel, ...]

    def __post_init__(self):
        if not self.strata:
            raise ConfigError("model needs at least one stratum")
        if len({s.p for s in self.strata}) != 1 or len({len(s.x) for s in self.strata}) != 1:
            raise ConfigError("y and x dimensions must agree across strata")
        for s in self.strata:
            z = s.z
            if z is not None and (
                isinstance(z, (Normal, Bernoulli)) or (isinstance(z, PointMass) and z.value <= 0)
            ):
                raise ConfigError("z must be a positive variable")

    @property
    def p(self) -> int:
        return self.strata[0].p

    @property
    def k(self) -> int:
        return len(self.strata[0].x)

    @property
    def n_clusters(self) -> tuple[int, ...]:
        return tuple(s.n_clusters for s in self.strata)

    @property
    def enumerable(self) -> bool:
        return all(s.hierarchy is None and all(f.enumerable for f in s.y) for s in self.strata)

    def with_clusters(self, n_clusters: Sequence[int]) -> "ModelSpec":
        if len(n_clusters) != len(self.strata):
            raise ConfigError("one cluster count per stratum required")
        return ModelSpec(tuple(replace(s, n_clusters=int(n)) for s, n in zip(self.strata, n_clusters)))

    def with_sizes(self, sizes: Sequence[Sequence[int]]) -> "ModelSpec":
        """Pin cluster sizes, e.g. to condition on a realized size vector."""
        return ModelSpec(
            tuple(
                replace(s, n_clusters=len(sz), sizes=FixedSizes(tuple(int(v) for v in sz)))
                for s, sz in zip(self.strata, sizes)
            )
        )

    def to_dict(self) -> dict[str, Any]:
        return {"strata": [s.to_dict() for s in self.strata]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        strata = []
        for sd in d["strata"]:
            hier = sd.get("hierarchy")
            strata.append(
                StratumModel(
                    n_clusters=int(sd["n_clusters"]),
                    sizes=size_law_from_dict(sd.get("sizes", 1)),
                    y=tuple(family_from_dict(f) for f in sd["y"]) if "y" in sd else StratumModel.y,
                    x=tuple(family_from_dict(f) for f in sd.get("x", [])),
                    z=family_from_dict(sd["z"]) if "z" in sd else None,
                    hierarchy=Hierarchy(**hier) if hier is not None else None,
                    beta=tuple(float(b) for b in sd["beta"]) if "beta" in sd else None,
                )
            )
        return cls(tuple(strata))


# --------------------------------------------------------------------------
# finite populations
# --------------------------------------------------------------------------


def _ordered_cluster_sums(values: np.ndarray, sizes: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Per-cluster sums in unit order, so totals are reproducible exactly."""
    out = np.zeros((len(sizes),) + values.shape[1:])
    for j in range(int(sizes.max(initial=0))):
        idx = np.flatnonzero(sizes > j)
        out[idx] = out[idx] + values[starts[idx] + j]
    return out


@dataclass(frozen=True)
class UnitRecord:
    y: np.ndarray
    x: np.ndarray
    z: float


@dataclass(frozen=True)
class Cluster:
    label: tuple[int, int]
    size: int
    units: tuple[UnitRecord, ...]
    total: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    """A stratified, clustered population of ``M`` units in ``N`` clusters.

    Parameters
    ----------
    n_clusters
        ``N_h`` for each stratum.
    cluster_sizes
        ``M_hi`` for all clusters, stratum-major, shape ``(N,)``.
    y, x, z
        Unit data of shapes ``(M, p)``, ``(M, k)`` and ``(M,)``.
    """

    n_clusters: tuple[int, ...]
    cluster_sizes: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.cluster_sizes, dtype=np.int64)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        x = np.asarray(self.x, dtype=float).reshape(len(y), -1)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if sizes.sum() != len(y) or len(x) != len(y) or len(z) != len(y):
            raise ConfigError("unit arrays do not match the cluster sizes")
        if len(sizes) != sum(self.n_clusters) or min(self.n_clusters, default=0) < 1:
            raise ConfigError("cluster sizes do not match the stratum cluster counts")
        if np.any(sizes < 1):
            raise ConfigError("cluster sizes must be >= 1")
        if np.any(z <= 0):
            raise ConfigError("z must be positive")
        object.__setattr__(self, "n_clusters", tuple(int(n) for n in self.n_clusters))
        object.__setattr__(self, "cluster_sizes", _frozen(sizes))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))

    # structure ---------------------------------------------------------

    @property
    def L(self) -> int:
        return len(self.n_clusters)

    @property
    def N(self) -> int:
        return len(self.cluster_sizes)

    @property
    def M(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @cached_property
    def stratum_start(self) -> np.ndarray:
        """Global index of each stratum's first cluster, plus a final sentinel."""
        return np.concatenate([[0], np.cumsum(self.n_clusters)])

    @cached_property
    def cluster_start(self) -> np.ndarray:
        """Flat index of each cluster's first unit, plus a final sentinel."""
        return np.concatenate([[0], np.cumsum(self.cluster_sizes)])

    @cached_property
    def cluster_stratum(self) -> np.ndarray:
        return np.repeat(np.arange(self.L), self.n_clusters)

    @cached_property
    def stratum_sizes(self) -> np.ndarray:
        """``M_h``."""
        return np.add.reduceat(self.cluster_sizes, self.stratum_start[:-1])

    @cached_property
    def weights(self) -> np.ndarray:
        """``W_h = M_h / M``."""
        return self.stratum_sizes / self.M

    @cached_property
    def cluster_totals(self) -> np.ndarray:
        """``y_hi``, shape ``(N, p)``, summed over units left to right."""
        return _ordered_cluster_sums(self.y, self.cluster_sizes, self.cluster_start)

    @cached_property
    def cluster_z(self) -> np.ndarray:
        return np.add.reduceat(self.z, self.cluster_start[:-1])

    def stratum_slice(self, h: int) -> slice:
        return slice(int(self.stratum_start[h]), int(self.stratum_start[h + 1]))

    def global_index(self, h, i):
        return self.stratum_start[h] + i

    def units_of(self, g: int) -> slice:
        return slice(int(self.cluster_start[g]), int(self.cluster_start[g + 1]))

    def cluster(self, h: int, i: int) -> Cluster:
        g = int(self.global_index(h, i))
        sl = self.units_of(g)
        units = tuple(UnitRecord(self.y[j], self.x[j], float(self.z[j])) for j in range(sl.start, sl.stop))
        return Cluster((h, i), int(self.cluster_sizes[g]), units, self.cluster_totals[g])

    def clusters(self) -> Iterator[Cluster]:
        for h, nh in enumerate(self.n_clusters):
            for i in range(nh):
                yield self.cluster(h, i)

    @property
    def is_one_stage(self) -> bool:
        return bool(np.all(self.cluster_sizes == 1))

    # constructors --------------------------------------------------------

    @classmethod
    def from_cluster_totals(
        cls,
        totals: Sequence[Sequence[float]] | Sequence[Sequence[Sequence[float]]],
        sizes: Sequence[Sequence[int]] | None = None,
        z: Sequence[Sequence[float]] | None = None,
    ) -> "FinitePopulation":
        """Build a population from cluster totals, stratum by stratum.

        Only the totals matter for one-stage designs, so each total is put on
        the cluster's first unit and the remaining units are zero. ``z`` gives
        a per-cluster size measure, stored on the first unit (others get 1)
        only when sizes are all 1; otherwise units carry ``z = 1``.
        """
        n_clusters = tuple(len(t) for t in totals)
        if sizes is None:
            sizes = [[1] * n for n in n_clusters]
        flat_sizes = np.array([s for st in sizes for s in st], dtype=np.int64)
        flat_totals = np.array([np.atleast_1d(np.asarray(t, dtype=float)) for st in totals for t in st])
        p = flat_totals.shape[1]
        y = np.zeros((int(flat_sizes.sum()), p))
        starts = np.concatenate([[0], np.cumsum(flat_sizes)[:-1]])
        y[starts] = flat_totals
        zz = np.ones(len(y))
        if z is not None:
            if not np.all(flat_sizes == 1):
                raise ConfigError("explicit z only supported for one-stage populations")
            zz = np.array([v for st in z for v in st], dtype=float)
        return cls(n_clusters, flat_sizes, y, np.zeros((len(y), 0)), zz)

    @classmethod
    def from_units(cls, strata: Sequence[Sequence[Sequence[float]]]) -> "FinitePopulation":
        """Build a scalar-y population from nested unit values ``[h][i][j]``."""
        n_clusters = tuple(len(st) for st in strata)
        sizes = [len(c) for st in strata for c in st]
        y = [v for st in strata for c in st for v in c]
        return cls(n_clusters, np.array(sizes), np.array(y, dtype=float), np.zeros((len(y), 0)), np.ones(len(y)))

    # export --------------------------------------------------------------

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["h", "i", "j"]
                + [f"y{c}" for c in range(self.p)]
                + [f"x{c}" for c in range(self.k)]
                + ["z"]
            )
            for g in range(self.N):
                h = int(self.cluster_stratum[g])
                i = g - int(self.stratum_start[h])
                sl = self.units_of(g)
                for j, u in enumerate(range(sl.start, sl.stop)):
                    w.writerow([h, i, j, *map(repr, self.y[u].tolist()), *map(repr, self.x[u].tolist()), repr(float(self.z[u]))])


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def realize_population(model: ModelSpec, seed: Seed | int | np.random.Generator) -> FinitePopulation:
    """Draw one finite population from ``model``.

    Pure in ``(model, seed)``. Cluster sizes are drawn first, stratum by
    stratum, then unit values.
    """
    rng = as_generator(seed)
    sizes = [s.sizes.draw(rng, s.n_clusters) for s in model.strata]
    ys, xs, zs = [], [], []
    for s, sz in zip(model.strata, sizes):
        m_h = int(sz.sum())
        if s.hierarchy is not None:
            mu, s2 = s.hierarchy.draw_cluster_params(rng, s.n_clusters)
            y = rng.normal(np.repeat(mu, sz), np.sqrt(np.repeat(s2, sz)))[:, None]
        else:
            y = np.column_stack([f.sample(rng, m_h) for f in s.y])
        x = np.column_stack([f.sample(rng, m_h) for f in s.x]) if s.x else np.zeros((m_h, 0))
        if s.beta is not None:
            y[:, 0] += x @ np.asarray(s.beta)
        z = s.z.sample(rng, m_h) if s.z is not None else np.ones(m_h)
        ys.append(y)
        xs.append(x)
        zs.append(z)
    return FinitePopulation(
        model.n_clusters,
        np.concatenate(sizes),
        np.concatenate(ys),
        np.concatenate(xs),
        np.concatenate(zs),
    )


@dataclass(frozen=True)
class ModelMoments:
    """Unit-level model moments per stratum.

    ``mu[h]`` is the unit mean, ``sigma2[h]`` the expected within-cluster unit
    variance and ``gamma[h]`` the variance of cluster means (zero without a
    hierarchy). ``mu_N = (1/N) sum_h N_h mu_h``.
    """

    mu: np.ndarray
    sigma2: np.ndarray
    gamma: np.ndarray
    mu_N: np.ndarray

    def theta0(self, pop: FinitePopulation) -> np.ndarray:
        """Size-weighted model mean ``sum_h W_h mu_h`` given realized sizes."""
        return pop.weights @ self.mu


def model_moments(model: ModelSpec) -> ModelMoments:
    mu, s2, gam = [], [], []
    for s in model.strata:
        if s.x and s.beta is not None:
            bx_mean = sum(b * f.mean for b, f in zip(s.beta, s.x))
            bx_var = sum(b * b * f.var for b, f in zip(s.beta, s.x))
        else:
            bx_mean = bx_var = 0.0
        if s.hierarchy is not None:
            h = s.hierarchy
            mu.append([h.mean + bx_mean])
            s2.append([h.sigma2 + bx_var])
            gam.append([h.gamma])
        else:
            shift = np.zeros(len(s.y))
            shift[0] = bx_mean
            extra = np.zeros(len(s.y))
            extra[0] = bx_var
            mu.append([f.mean for f in s.y] + shift)
            s2.append([f.var for f in s.y] + extra)
            gam.append([0.0] * len(s.y))
    mu_a = np.array(mu, dtype=float)
    n_h = np.array(model.n_clusters, dtype=float)
    return ModelMoments(mu_a, np.array(s2, dtype=float), np.array(gam, dtype=float), n_h @ mu_a / n_h.sum())


def liapunov_m1(source: FinitePopulation | ModelSpec, delta: float = 1.0) -> float:
    """The model-side Liapunov moment ``(1/N) sum_h sum_i |Y_hi|^(2+delta)`` over cluster totals.

    For a realized population this is the plug-in average of ``|y_hi|`` (the
    Euclidean norm for vector ``y``). For a model it is the average of the
    exact model moments ``E_m|Y_hi|^(2+delta)``; sizes must then be fixed.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    power = 2.0 + delta
    if isinstance(source, FinitePopulation):
        norms = np.linalg.norm(source.cluster_totals, axis=1)
        return float(np.mean(norms**power))
    if source.p != 1 or any(s.x and s.beta is not None for s in source.strata):
        raise UnsupportedError("the model form of the Liapunov moment needs a scalar y without regression terms")
    total, n = 0.0, 0
    for s in source.strata:
        if not isinstance(s.sizes, FixedSizes):
            raise UnsupportedError("the model form of the Liapunov moment needs fixed cluster sizes")
        sizes = s.sizes.draw(None, s.n_clusters)
        for m in np.unique(sizes):
            count = int(np.sum(sizes == m))
            if s.hierarchy is not None:
                value = s.hierarchy.total_abs_moment(int(m), power)
            else:
                value = s.y[0].total_abs_moment(int(m), power)
            total += count * value
        n += s.n_clusters
    return total / n
