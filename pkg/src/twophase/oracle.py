"""Exact enumeration of the joint (sample, outcome) space for tiny discrete instances.

Cluster values are independent discrete random variables. Designs here never
look at y, so each cell mass factorizes as ``p(s) * P(omega)``. Masses are
accumulated with ``math.fsum`` to keep equality checks at 1e-12 meaningful.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .designs import DesignSpec, SampleSeq, enumerate_samples, validate
from .errors import ConfigError, EnumerationCapError
from .estimators import point_estimate
from .population import Bernoulli, FinitePopulation, ModelSpec, PointMass

DEFAULT_CELL_CAP = 10**7
PROB_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteModel:
    """Independent finite-support laws for the ``N`` cluster values, in label order."""

    supports: tuple[tuple[float, ...], ...]
    probs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.supports) != len(self.probs) or not self.supports:
            raise ConfigError("supports and probs must be non-empty and aligned")
        for s, p in zip(self.supports, self.probs):
            if len(s) != len(p) or len(s) == 0:
                raise ConfigError("each unit needs matching support and probabilities")
            if min(p) < 0 or abs(math.fsum(p) - 1.0) > PROB_TOL:
                raise ConfigError("unit probabilities must be non-negative and sum to 1")

    @property
    def N(self) -> int:
        return len(self.supports)

    @property
    def n_outcomes(self) -> int:
        return math.prod(len(s) for s in self.supports)

    @classmethod
    def iid(cls, n_units: int, support: Sequence[float], probs: Sequence[float]) -> "DiscreteModel":
        return cls((tuple(map(float, support)),) * n_units, (tuple(map(float, probs)),) * n_units)

    @classmethod
    def bernoulli(cls, qs: Sequence[float]) -> "DiscreteModel":
        return cls(tuple((0.0, 1.0) for _ in qs), tuple((1.0 - q, q) for q in qs))

    @classmethod
    def from_model(cls, model: ModelSpec) -> "DiscreteModel":
        """One-stage scalar models built from point-mass and Bernoulli families."""
        supports, probs = [], []
        for st in model.strata:
            if st.p != 1 or st.hierarchy is not None:
                raise ConfigError("oracle models need a scalar y without a hierarchy")
            fam = st.y[0]
            if isinstance(fam, PointMass):
                s, p = (fam.value,), (1.0,)
            elif isinstance(fam, Bernoulli):
                s, p = (0.0, 1.0), (1.0 - fam.q, fam.q)
            else:
                raise ConfigError(f"family {fam.kind!r} has no finite support")
            supports += [s] * st.n_clusters
            probs += [p] * st.n_clusters
        return cls(tuple(supports), tuple(probs))

    def prob(self, unit: int, pred) -> float:
        """``P(pred(Y_unit))``."""
        return math.fsum(p for v, p in zip(self.supports[unit], self.probs[unit]) if pred(v))

    def outcomes(self) -> tuple[np.ndarray, np.ndarray]:
        """All value assignments ``(|Omega|, N)`` and their probabilities."""
        vals = np.array(list(itertools.product(*self.supports)), dtype=float).reshape(-1, self.N)
        probs = np.array([math.prod(c) for c in itertools.product(*self.probs)], dtype=float)
        return vals, probs

    def to_dict(self) -> dict[str, Any]:
        return {"supports": [list(s) for s in self.supports], "probs": [list(p) for p in self.probs]}


@dataclass(frozen=True)
class Structure:
    """Population frame: clusters per stratum, cluster sizes and size measures."""

    n_clusters: tuple[int, ...]
    sizes: tuple[int, ...] | None = None
    z: tuple[float, ...] | None = None

    @property
    def N(self) -> int:
        return sum(self.n_clusters)

    def _grouped(self, flat) -> list[list]:
        out, start = [], 0
        for nh in self.n_clusters:
            out.append(list(flat[start : start + nh]))
            start += nh
        return out

    def population(self, values: np.ndarray) -> FinitePopulation:
        sizes = None if self.sizes is None else self._grouped(self.sizes)
        z = None if self.z is None else self._grouped(self.z)
        return FinitePopulation.from_cluster_totals(self._grouped(values), sizes, z)


@dataclass
class JointPmf:
    samples: list[SampleSeq]
    sample_probs: np.ndarray
    outcomes: np.ndarray
    outcome_probs: np.ndarray
    structure: Structure
    design: DesignSpec
    _labels: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.samples), len(self.outcomes)

    @property
    def mass(self) -> np.ndarray:
        return np.outer(self.sample_probs, self.outcome_probs)

    def total(self) -> float:
        return math.fsum(self.mass.ravel())

    def labels(self, i: int) -> np.ndarray:
        return self._labels[i]

    def population(self, w: int) -> FinitePopulation:
        return self.structure.population(self.outcomes[w])

    def sample_index(self, s0: SampleSeq) -> int:
        key = s0.key()
        for i, s in enumerate(self.samples):
            if s.key() == key:
                return i
        raise ConfigError("sample is not in the support of the design")

    def sample_marginal(self) -> np.ndarray:
        return self.sample_probs.copy()

    def outcome_marginal(self) -> np.ndarray:
        return self.outcome_probs.copy()

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["sample_id", "outcome_id", "mass"])
            for i, ps in enumerate(self.sample_probs):
                for j, po in enumerate(self.outcome_probs):
                    w.writerow([i, j, repr(float(ps * po))])


def enumerate_product_space(
    model: DiscreteModel, design: DesignSpec, structure: Structure | None = None, cap: int = DEFAULT_CELL_CAP
) -> JointPmf:
    """Tabulate ``P_{d,m}`` on ``S x Omega``."""
    structure = structure or Structure((model.N,))
    if structure.N != model.N:
        raise ConfigError("model and structure disagree on the number of clusters")
    n_out = model.n_outcomes
    if n_out > cap:
        raise EnumerationCapError(n_out, cap, "cells")
    template = structure.population(np.zeros(model.N))
    validate(design, template)
    samples = enumerate_samples(design, template, cap=max(1, cap // n_out))
    if len(samples) * n_out > cap:
        raise EnumerationCapError(len(samples) * n_out, cap, "cells")
    outcomes, oprobs = model.outcomes()
    return JointPmf(
        [s for s, _ in samples],
        np.array([p for _, p in samples]),
        outcomes,
        oprobs,
        structure,
        design,
        [s.global_labels(template) for s, _ in samples],
    )


# --------------------------------------------------------------------------
# sample variables
# --------------------------------------------------------------------------


Event = Mapping[int, float] | Sequence[tuple[int, float]]


def _event_items(event: Event | None) -> list[tuple[int, float]]:
    if event is None:
        return []
    items = list(event.items()) if isinstance(event, Mapping) else [tuple(e) for e in event]
    draws = [k for k, _ in items]
    if len(set(draws)) != len(draws):
        raise ConfigError("event draws must be distinct")
    return [(int(k), float(v)) for k, v in items]


def _event_indicator(jp: JointPmf, i: int, items: list[tuple[int, float]]) -> np.ndarray:
    labels = jp.labels(i)
    ok = np.ones(len(jp.outcomes), dtype=bool)
    for k, v in items:
        if not 0 <= k < len(labels):
            raise ConfigError(f"draw {k} outside 0..{len(labels) - 1}")
        ok &= jp.outcomes[:, labels[k]] == v
    return ok


def sample_variable_joint(jp: JointPmf, draws: Sequence[int], values: Sequence[float]) -> float:
    """``P_{d,m}(Y_{i(k)} = v_k for each requested draw k)``; draws are 0-based."""
    items = _event_items(list(zip(draws, values)))
    terms = []
    for i, ps in enumerate(jp.sample_probs):
        ind = _event_indicator(jp, i, items)
        terms.extend(ps * jp.outcome_probs[ind])
    return math.fsum(terms)


def posterior_given_sample(jp: JointPmf, s0: SampleSeq, event: Event | None = None) -> float:
    """``P(s0 x F_s0) / P(s0 x Omega)`` for the event on the sample variables."""
    i = jp.sample_index(s0)
    ps = jp.sample_probs[i]
    if ps <= 0:
        raise ConfigError("conditioning sample has zero probability")
    ind = _event_indicator(jp, i, _event_items(event))
    num = math.fsum(ps * jp.outcome_probs[ind])
    den = math.fsum(ps * jp.outcome_probs)
    return num / den


@dataclass
class PosteriorReport:
    sample: list[int] | None
    marginals: list[dict[float, float]]
    joint: dict[tuple[float, ...], float]
    max_deviation: float
    independent: bool

    @property
    def verdict(self) -> str:
        return "INDEPENDENT" if self.independent else "DEPENDENT"

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample": self.sample,
            "verdict": self.verdict,
            "max_deviation": self.max_deviation,
            "marginals": [{repr(k): v for k, v in sorted(m.items())} for m in self.marginals],
            "joint": {",".join(map(repr, k)): v for k, v in sorted(self.joint.items())},
        }


def independence_verdict(jp: JointPmf, s0: SampleSeq | None = None, tol: float = PROB_TOL) -> PosteriorReport:
    """Compare the joint law of ``(Y_{i(0)}, ..., Y_{i(n-1)})`` with the product of its marginals.

    Conditional on ``s0`` when given, otherwise under ``P_{d,m}``.
    """
    rows = range(len(jp.samples)) if s0 is None else [jp.sample_index(s0)]
    buckets: dict[tuple[float, ...], list[float]] = defaultdict(list)
    norm_terms = []
    for i in rows:
        ps = jp.sample_probs[i]
        vals = jp.outcomes[:, jp.labels(i)]
        for row, po in zip(vals, jp.outcome_probs):
            buckets[tuple(row.tolist())].append(ps * po)
            norm_terms.append(ps * po)
    z = math.fsum(norm_terms)
    if z <= 0:
        raise ConfigError("conditioning sample has zero probability")
    joint = {k: math.fsum(v) / z for k, v in buckets.items()}
    n = len(next(iter(joint)))
    marg: list[dict[float, list[float]]] = [defaultdict(list) for _ in range(n)]
    for key, pr in joint.items():
        for k, v in enumerate(key):
            marg[k][v].append(pr)
    marginals = [{v: math.fsum(ps) for v, ps in m.items()} for m in marg]
    dev = 0.0
    for key in itertools.product(*[sorted(m) for m in marginals]):
        prod = math.prod(marginals[k][v] for k, v in enumerate(key))
        dev = max(dev, abs(joint.get(key, 0.0) - prod))
    sample = None if s0 is None else jp.labels(jp.sample_index(s0)).tolist()
    return PosteriorReport(sample, marginals, joint, dev, dev <= tol)


# --------------------------------------------------------------------------
# closed forms for a pair of sample variables
# --------------------------------------------------------------------------
# pa[i] = P(Y_i in A), pb[j] = P(Y_j in B), pab[i] = P(Y_i in A and Y_i in B).
# For point events A = {a}, B = {b}: pab[i] = pa[i] if a == b else 0.
# For lower-tail events A = (-inf, a]: pab[i] = P(Y_i <= min(a, b)).


def _off_diagonal(pa: np.ndarray, pb: np.ndarray) -> float:
    return math.fsum(pa[i] * pb[j] for i in range(len(pa)) for j in range(len(pb)) if i != j)


def closed_marginal(pa: Sequence[float]) -> float:
    """``P_{d,m}(Y_{i(k)} in A)`` under equal-probability draws."""
    return math.fsum(pa) / len(pa)


def closed_pair_srswor(pa: Sequence[float], pb: Sequence[float]) -> float:
    n = len(pa)
    return _off_diagonal(np.asarray(pa), np.asarray(pb)) / (n * (n - 1))


def closed_pair_srswr(pa: Sequence[float], pb: Sequence[float], pab: Sequence[float]) -> float:
    n = len(pa)
    return (_off_diagonal(np.asarray(pa), np.asarray(pb)) + math.fsum(pab)) / n**2


def closed_pair_posterior(
    pa: Sequence[float], pb: Sequence[float], pab: Sequence[float], label_k: int, label_l: int
) -> float:
    """``P(Y_{i(k)} in A, Y_{i(l)} in B | s0)`` given the labels drawn at k and l."""
    if label_k == label_l:
        return float(pab[label_k])
    return float(pa[label_k]) * float(pb[label_l])


def point_event_probs(model: DiscreteModel, a: float, b: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pa = np.array([model.prob(i, lambda v: v == a) for i in range(model.N)])
    pb = np.array([model.prob(i, lambda v: v == b) for i in range(model.N)])
    pab = pa if a == b else np.zeros(model.N)
    return pa, pb, pab


def tail_event_probs(model: DiscreteModel, a: float, b: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pa = np.array([model.prob(i, lambda v: v <= a) for i in range(model.N)])
    pb = np.array([model.prob(i, lambda v: v <= b) for i in range(model.N)])
    lo = min(a, b)
    pab = np.array([model.prob(i, lambda v: v <= lo) for i in range(model.N)])
    return pa, pb, pab


def table_pair_tail(jp: JointPmf, k: int, l: int, a: float, b: float) -> float:
    """``P_{d,m}(Y_{i(k)} <= a, Y_{i(l)} <= b)`` from the table."""
    terms = []
    for i, ps in enumerate(jp.sample_probs):
        lab = jp.labels(i)
        ind = (jp.outcomes[:, lab[k]] <= a) & (jp.outcomes[:, lab[l]] <= b)
        terms.extend(ps * jp.outcome_probs[ind])
    return math.fsum(terms)


# --------------------------------------------------------------------------
# design law of an estimator
# --------------------------------------------------------------------------


def design_distribution(
    pop: FinitePopulation, design: DesignSpec, estimator: str = "mean", cap: int = 10**6
) -> tuple[np.ndarray, np.ndarray]:
    """Sorted support of the (scalar) estimator under ``p(.)`` and its masses."""
    samples = enumerate_samples(design, pop, cap=cap)
    acc: dict[float, list[float]] = defaultdict(list)
    for s, pr in samples:
        acc[float(point_estimate(estimator, s, pop)[0])].append(pr)
    values = np.array(sorted(acc))
    return values, np.array([math.fsum(acc[v]) for v in values])


def design_cdf(pop: FinitePopulation, design: DesignSpec, estimator: str, t, cap: int = 10**6):
    """``F(t, omega) = p({s : theta_hat(s) <= t})`` for the realized population."""
    values, probs = design_distribution(pop, design, estimator, cap)
    return _step_cdf(values, probs, t)


def _step_cdf(values: np.ndarray, probs: np.ndarray, t):
    cum = np.concatenate([[0.0], np.cumsum(probs)])
    idx = np.searchsorted(values, np.asarray(t, dtype=float), side="right")
    out = np.minimum(cum[idx], 1.0)
    return float(out) if np.ndim(out) == 0 else out


def product_space_cdf(jp: JointPmf, estimator: str, t: float) -> float:
    """``P_{d,m}(theta_hat <= t)`` summed cell by cell."""
    terms = []
    for w, po in enumerate(jp.outcome_probs):
        pop = jp.population(w)
        for i, (s, ps) in enumerate(zip(jp.samples, jp.sample_probs)):
            if point_estimate(estimator, s, pop)[0] <= t:
                terms.append(ps * po)
    return math.fsum(terms)


def mixed_design_cdf(jp: JointPmf, estimator: str, t: float) -> float:
    """``sum_omega P(omega) F(t, omega)``."""
    return math.fsum(
        po * design_cdf(jp.population(w), jp.design, estimator, t) for w, po in enumerate(jp.outcome_probs)
    )


def example_pair_report(qs: Iterable[float] = (0.5, 0.5)) -> dict[str, float]:
    """``P(Y_{i(0)}=1, Y_{i(1)}=0)`` and ``P(Y_{i(0)}=1)`` under SRSWR and SRSWOR with N = n."""
    from .designs import SRSWOR, SRSWR

    model = DiscreteModel.bernoulli(list(qs))
    n = model.N
    out = {}
    for name, design in (("srswr", SRSWR(n)), ("srswor", SRSWOR(n))):
        jp = enumerate_product_space(model, design)
        out[f"{name}_joint_10"] = sample_variable_joint(jp, [0, 1], [1.0, 0.0])
        out[f"{name}_marginal_1"] = sample_variable_joint(jp, [0], [1.0])
        out[f"{name}_marginal_2"] = sample_variable_joint(jp, [1], [1.0])
    return out
