"""Sampling designs as random samplers and as exact probability functions.

Samples are ordered sequences of draws and may repeat labels. For stratified
designs the draws are laid out stratum by stratum; ``draw[k]`` is the index of
the draw within its stratum. SRS designs ignore strata and draw over the pooled
list of clusters, so ``draw[k]`` is the global draw index.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, ClassVar, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EnumerationCapError
from .population import FinitePopulation
from .rng import Seed, as_generator

DEFAULT_SAMPLE_CAP = 10**6


# --------------------------------------------------------------------------
# design specifications
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SRSWR:
    n: int
    kind: ClassVar[str] = "srswr"

    def to_dict(self):
        return {"type": self.kind, "n": self.n}


@dataclass(frozen=True)
class SRSWOR:
    n: int
    kind: ClassVar[str] = "srswor"

    def to_dict(self):
        return {"type": self.kind, "n": self.n}


@dataclass(frozen=True)
class StratPPSWR:
    """Stratified PPS with replacement; the whole cluster is observed.

    ``measure`` picks the size variable: ``"size"`` gives ``p_hi = M_hi/M_h``,
    ``"z"`` uses the cluster sum of unit ``z``. ``prob`` overrides both with a
    function mapping a stratum's ``z`` totals to selection probabilities.
    """

    n_h: tuple[int, ...]
    measure: str = "size"
    prob: Callable[[np.ndarray], np.ndarray] | None = None
    kind: ClassVar[str] = "strat_ppswr"

    def __post_init__(self):
        object.__setattr__(self, "n_h", tuple(int(v) for v in self.n_h))
        if self.measure not in ("size", "z"):
            raise ConfigError(f"unknown size measure {self.measure!r}")

    @property
    def n(self) -> int:
        return sum(self.n_h)

    def to_dict(self):
        if self.prob is not None:
            raise ConfigError("designs with a custom probability function are not serializable")
        return {"type": self.kind, "n_h": list(self.n_h), "measure": self.measure}


@dataclass(frozen=True)
class StratTwoStagePPSWR(StratPPSWR):
    """Stratified two-stage design: PPSWR clusters, then SRSWOR units.

    ``m`` is the second-stage size: an int for every cluster, a nested
    per-stratum list, or None to take all units. A cluster selected more than
    once gets an independent second-stage sample for each selection.
    """

    m: int | tuple[tuple[int, ...], ...] | None = None
    kind: ClassVar[str] = "strat_two_stage_ppswr"

    def __post_init__(self):
        super().__post_init__()
        if self.m is not None and not isinstance(self.m, int):
            object.__setattr__(self, "m", tuple(tuple(int(v) for v in row) for row in self.m))

    def to_dict(self):
        d = super().to_dict()
        d["m"] = self.m if self.m is None or isinstance(self.m, int) else [list(r) for r in self.m]
        return d


DesignSpec = SRSWR | SRSWOR | StratPPSWR | StratTwoStagePPSWR


def design_from_dict(d: dict[str, Any]) -> DesignSpec:
    kind = d.get("type")
    if kind == "srswr":
        return SRSWR(int(d["n"]))
    if kind == "srswor":
        return SRSWOR(int(d["n"]))
    if kind == "strat_ppswr":
        return StratPPSWR(tuple(d["n_h"]), d.get("measure", "size"))
    if kind == "strat_two_stage_ppswr":
        m = d.get("m")
        if isinstance(m, list):
            m = tuple(tuple(r) for r in m)
        return StratTwoStagePPSWR(tuple(d["n_h"]), d.get("measure", "size"), m=m)
    raise ConfigError(f"unknown design type {kind!r}")


def with_sample_sizes(design: DesignSpec, n: int | Sequence[int]) -> DesignSpec:
    if isinstance(design, (SRSWR, SRSWOR)):
        return replace(design, n=int(n))
    return replace(design, n_h=tuple(int(v) for v in n))


def is_stratified(design: DesignSpec) -> bool:
    return isinstance(design, StratPPSWR)


def sample_size(design: DesignSpec) -> int:
    return design.n


# --------------------------------------------------------------------------
# design quantities
# --------------------------------------------------------------------------


def selection_probabilities(design: DesignSpec, pop: FinitePopulation) -> np.ndarray:
    """Per-draw selection probability of every cluster, shape ``(N,)``.

    For stratified designs the probabilities sum to one within each stratum;
    for SRS designs they are ``1/N`` (the first-draw probability).
    """
    if not is_stratified(design):
        return np.full(pop.N, 1.0 / pop.N)
    out = np.empty(pop.N)
    for h in range(pop.L):
        sl = pop.stratum_slice(h)
        if design.prob is not None:
            p = np.asarray(design.prob(pop.cluster_z[sl]), dtype=float)
        elif design.measure == "z":
            p = pop.cluster_z[sl].astype(float)
        else:
            p = pop.cluster_sizes[sl].astype(float)
        if p.shape != (sl.stop - sl.start,) or np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ConfigError(f"selection probabilities in stratum {h} must be positive and finite")
        out[sl] = p / p.sum()
    return out


def second_stage_sizes(design: DesignSpec, pop: FinitePopulation) -> np.ndarray:
    """``m_hi`` for all clusters; equals ``M_hi`` for single-stage designs."""
    if not isinstance(design, StratTwoStagePPSWR) or design.m is None:
        return pop.cluster_sizes.copy()
    if isinstance(design.m, int):
        return np.full(pop.N, design.m, dtype=np.int64)
    flat = np.array([v for row in design.m for v in row], dtype=np.int64)
    if len(design.m) != pop.L or len(flat) != pop.N:
        raise ConfigError("second-stage sizes do not match the population")
    return flat


def validate(design: DesignSpec, pop: FinitePopulation) -> None:
    if isinstance(design, (SRSWR, SRSWOR)):
        if design.n < 1:
            raise ConfigError("sample size must be >= 1")
        if isinstance(design, SRSWOR) and design.n > pop.N:
            raise ConfigError(f"SRSWOR needs n <= N, got n={design.n}, N={pop.N}")
        return
    if len(design.n_h) != pop.L:
        raise ConfigError(f"design has {len(design.n_h)} strata, population has {pop.L}")
    if any(v < 1 for v in design.n_h):
        raise ConfigError("every stratum needs n_h >= 1")
    selection_probabilities(design, pop)
    m = second_stage_sizes(design, pop)
    if np.any(m < 1) or np.any(m > pop.cluster_sizes):
        raise ConfigError("second-stage sizes must satisfy 1 <= m_hi <= M_hi")


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------


class Draw(NamedTuple):
    stratum: int
    k: int
    cluster: int
    units: tuple[int, ...] | None


@dataclass(frozen=True, eq=False)
class SampleSeq:
    """An ordered sample: one entry per draw.

    ``cluster`` is the within-stratum cluster index. ``units`` holds, for
    two-stage designs, the sorted within-cluster unit indices drawn at the
    second stage for each draw; it is None when whole clusters are observed.
    """

    design: DesignSpec
    stratum: np.ndarray
    draw: np.ndarray
    cluster: np.ndarray
    units: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        for name in ("stratum", "draw", "cluster"):
            a = np.asarray(getattr(self, name), dtype=np.int64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.cluster)

    def __iter__(self) -> Iterator[Draw]:
        for k in range(len(self)):
            u = None if self.units is None else tuple(int(v) for v in self.units[k])
            yield Draw(int(self.stratum[k]), int(self.draw[k]), int(self.cluster[k]), u)

    @property
    def n(self) -> int:
        return len(self)

    def n_h(self, n_strata: int) -> np.ndarray:
        return np.bincount(self.stratum, minlength=n_strata)

    def global_labels(self, pop: FinitePopulation) -> np.ndarray:
        return pop.stratum_start[self.stratum] + self.cluster

    def key(self) -> tuple:
        if self.units is None:
            return tuple(zip(self.stratum.tolist(), self.cluster.tolist()))
        return tuple(
            (h, i, tuple(u.tolist())) for h, i, u in zip(self.stratum.tolist(), self.cluster.tolist(), self.units)
        )

    def has_repeats(self) -> bool:
        labels = list(zip(self.stratum.tolist(), self.cluster.tolist()))
        return len(set(labels)) < len(labels)

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["h", "k", "i", "units"])
            for d in self:
                w.writerow([d.stratum, d.k, d.cluster, "" if d.units is None else " ".join(map(str, d.units))])


def sample_from_labels(
    design: DesignSpec, pop: FinitePopulation, labels: Sequence[int] | Sequence[tuple[int, int]], units=None
) -> SampleSeq:
    """Build a sample from cluster labels in draw order.

    SRS designs take global labels; stratified designs take ``(h, i)`` pairs
    listed stratum by stratum.
    """
    if not is_stratified(design):
        g = np.asarray(labels, dtype=np.int64)
        h = pop.cluster_stratum[g]
        return SampleSeq(design, h, np.arange(len(g)), g - pop.stratum_start[h], units)
    hs = np.array([h for h, _ in labels], dtype=np.int64)
    cs = np.array([i for _, i in labels], dtype=np.int64)
    ks = np.zeros(len(hs), dtype=np.int64)
    for h in np.unique(hs):
        ks[hs == h] = np.arange(np.sum(hs == h))
    if units is not None:
        units = tuple(np.asarray(sorted(u), dtype=np.int64) for u in units)
    return SampleSeq(design, hs, ks, cs, units)


def _partial_shuffle(rng: np.random.Generator, n_items: int, n_pick: int) -> np.ndarray:
    """First ``n_pick`` entries of a Fisher-Yates shuffle of ``range(n_items)``."""
    a = np.arange(n_items)
    picks = rng.random(n_pick)
    for j in range(n_pick):
        r = j + int(picks[j] * (n_items - j))
        a[j], a[r] = a[r], a[j]
    return a[:n_pick].copy()


def draw_sample(design: DesignSpec, pop: FinitePopulation, seed: Seed | int | np.random.Generator) -> SampleSeq:
    """Draw one sample. Deterministic given the seed."""
    validate(design, pop)
    rng = as_generator(seed)
    if isinstance(design, SRSWR):
        g = np.minimum((rng.random(design.n) * pop.N).astype(np.int64), pop.N - 1)
        return sample_from_labels(design, pop, g)
    if isinstance(design, SRSWOR):
        return sample_from_labels(design, pop, _partial_shuffle(rng, pop.N, design.n))

    p = selection_probabilities(design, pop)
    hs, ks, cs = [], [], []
    for h, nh in enumerate(design.n_h):
        cdf = np.cumsum(p[pop.stratum_slice(h)])
        i = np.searchsorted(cdf, rng.random(nh) * cdf[-1], side="right")
        hs.append(np.full(nh, h))
        ks.append(np.arange(nh))
        cs.append(np.minimum(i, len(cdf) - 1))
    hs, ks, cs = np.concatenate(hs), np.concatenate(ks), np.concatenate(cs)
    units = None
    if isinstance(design, StratTwoStagePPSWR) and design.m is not None:
        m = second_stage_sizes(design, pop)
        g = pop.stratum_start[hs] + cs
        units = tuple(np.sort(_partial_shuffle(rng, int(pop.cluster_sizes[gk]), int(m[gk]))) for gk in g)
    return SampleSeq(design, hs, ks, cs, units)


def design_pmf(design: DesignSpec, pop: FinitePopulation, sample: SampleSeq) -> float:
    """Exact probability of the ordered sample; zero when it is impossible."""
    n = len(sample)
    if isinstance(design, (SRSWR, SRSWOR)):
        if n != design.n or np.any(sample.cluster < 0):
            return 0.0
        if np.any(sample.cluster >= np.asarray(pop.n_clusters)[sample.stratum]):
            return 0.0
        if isinstance(design, SRSWR):
            return float(pop.N) ** (-n)
        if sample.has_repeats():
            return 0.0
        return math.prod(1.0 / (pop.N - j) for j in range(n))

    expected_h = np.repeat(np.arange(pop.L), design.n_h)
    if n != len(expected_h) or np.any(sample.stratum != expected_h):
        return 0.0
    n_h = np.asarray(pop.n_clusters)
    if np.any(sample.cluster < 0) or np.any(sample.cluster >= n_h[sample.stratum]):
        return 0.0
    g = sample.global_labels(pop)
    prob = float(np.prod(selection_probabilities(design, pop)[g]))
    two_stage = isinstance(design, StratTwoStagePPSWR) and design.m is not None
    if not two_stage:
        return prob if sample.units is None else 0.0
    if sample.units is None:
        return 0.0
    m = second_stage_sizes(design, pop)
    for gk, u in zip(g, sample.units):
        mk, big_m = int(m[gk]), int(pop.cluster_sizes[gk])
        if len(u) != mk or len(set(u.tolist())) != mk or np.any(u < 0) or np.any(u >= big_m):
            return 0.0
        prob /= math.comb(big_m, mk)
    return prob


def count_samples(design: DesignSpec, pop: FinitePopulation) -> int:
    """Number of ordered samples with positive probability."""
    if isinstance(design, SRSWR):
        return pop.N**design.n
    if isinstance(design, SRSWOR):
        return math.perm(pop.N, design.n)
    m = second_stage_sizes(design, pop)
    total = 1
    for h, nh in enumerate(design.n_h):
        sl = pop.stratum_slice(h)
        if isinstance(design, StratTwoStagePPSWR) and design.m is not None:
            options = sum(math.comb(int(a), int(b)) for a, b in zip(pop.cluster_sizes[sl], m[sl]))
        else:
            options = sl.stop - sl.start
        total *= options**nh
    return total


def enumerate_samples(
    design: DesignSpec, pop: FinitePopulation, cap: int = DEFAULT_SAMPLE_CAP
) -> list[tuple[SampleSeq, float]]:
    """Every positive-probability sample with its probability."""
    validate(design, pop)
    required = count_samples(design, pop)
    if required > cap:
        raise EnumerationCapError(required, cap, "samples")

    if isinstance(design, (SRSWR, SRSWOR)):
        if isinstance(design, SRSWR):
            seqs = itertools.product(range(pop.N), repeat=design.n)
        else:
            seqs = itertools.permutations(range(pop.N), design.n)
        out = []
        for t in seqs:
            s = sample_from_labels(design, pop, list(t))
            out.append((s, design_pmf(design, pop, s)))
        return out

    p = selection_probabilities(design, pop)
    two_stage = isinstance(design, StratTwoStagePPSWR) and design.m is not None
    m = second_stage_sizes(design, pop)
    per_stratum = []
    for h, nh in enumerate(design.n_h):
        sl = pop.stratum_slice(h)
        options = []
        for i in range(sl.stop - sl.start):
            g = sl.start + i
            if two_stage:
                big_m, mk = int(pop.cluster_sizes[g]), int(m[g])
                w = p[g] / math.comb(big_m, mk)
                options.extend(((h, i, u), w) for u in itertools.combinations(range(big_m), mk))
            else:
                options.append(((h, i, None), p[g]))
        per_stratum.append(itertools.product(options, repeat=nh))

    out = []
    for combo in itertools.product(*per_stratum):
        draws = [d for stratum in combo for d in stratum]
        labels = [(h, i) for (h, i, _), _ in draws]
        units = [u for (_, _, u), _ in draws] if two_stage else None
        prob = math.prod(w for _, w in draws)
        out.append((sample_from_labels(design, pop, labels, units), prob))
    return out
