"""Point estimators and exact design variances for stratified PPSWR designs.

The per-draw estimate of a stratum mean is ``yhat_hi / (M_h p_hi)``, where
``yhat_hi`` is the cluster total (whole cluster observed) or its SRSWOR
expansion estimate ``(M_hi/m_hi) * sum of sampled unit values``. With
``p_hi = M_hi/M_h`` this is ``yhat_hi / M_hi``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .designs import (
    DEFAULT_SAMPLE_CAP,
    SRSWOR,
    SRSWR,
    DesignSpec,
    SampleSeq,
    StratPPSWR,
    StratTwoStagePPSWR,
    enumerate_samples,
    second_stage_sizes,
    selection_probabilities,
)
from .errors import ConfigError, EnumerationCapError, UnsupportedError
from .population import FinitePopulation


@dataclass(frozen=True)
class DrawEstimate:
    stratum: int
    draw: int
    value: np.ndarray


@dataclass
class EstimatorResult:
    name: str
    estimate: np.ndarray
    target: np.ndarray
    n: int
    variance: np.ndarray | None = None
    variance_estimate: np.ndarray | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def gamma_d(self) -> np.ndarray | None:
        """``n * V_d``."""
        return None if self.variance is None else self.n * self.variance

    def to_dict(self) -> dict[str, Any]:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "estimator": self.name,
            "estimate": arr(self.estimate),
            "target": arr(self.target),
            "n": self.n,
            "design_variance": arr(self.variance),
            "gamma_d": arr(self.gamma_d),
            "variance_estimate": arr(self.variance_estimate),
            **{k: arr(v) if isinstance(v, np.ndarray) else v for k, v in self.extra.items()},
        }


# --------------------------------------------------------------------------
# finite-population targets
# --------------------------------------------------------------------------


def finite_pop_mean(pop: FinitePopulation) -> tuple[np.ndarray, np.ndarray]:
    """``(theta_N, Ybar_N)``.

    ``theta_N = sum_h W_h Ybar_h`` is the mean per ultimate unit;
    ``Ybar_N`` is the mean of cluster totals.
    """
    totals = pop.cluster_totals
    stratum_totals = np.add.reduceat(totals, pop.stratum_start[:-1], axis=0)
    ybar_h = stratum_totals / pop.stratum_sizes[:, None]
    return pop.weights @ ybar_h, totals.mean(axis=0)


@dataclass(frozen=True)
class Residuals:
    e: np.ndarray
    e_h: np.ndarray


def residuals(pop: FinitePopulation) -> Residuals:
    _, ybar = finite_pop_mean(pop)
    e = pop.cluster_totals - ybar
    return Residuals(e, np.add.reduceat(e, pop.stratum_start[:-1], axis=0))


# --------------------------------------------------------------------------
# per-draw machinery
# --------------------------------------------------------------------------


def _require_ppswr(sample: SampleSeq) -> StratPPSWR:
    if not isinstance(sample.design, StratPPSWR):
        raise ConfigError("estimator needs a stratified PPSWR sample")
    return sample.design


def sampled_rows(sample: SampleSeq, pop: FinitePopulation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat unit rows observed by each draw.

    Returns ``(rows, starts, expansion)``: the rows of draw ``k`` are
    ``rows[starts[k]:starts[k+1]]`` and ``expansion[k] = M_hi/m_hi``.
    """
    g = sample.global_labels(pop)
    first = pop.cluster_start[g]
    if sample.units is None:
        counts = pop.cluster_sizes[g]
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        rows = np.repeat(first, counts) + offsets
        expansion = np.ones(len(g))
    else:
        counts = np.array([len(u) for u in sample.units], dtype=np.int64)
        rows = np.concatenate([f + u for f, u in zip(first, sample.units)]) if len(g) else np.zeros(0, np.int64)
        expansion = pop.cluster_sizes[g] / counts
    starts = np.concatenate([[0], np.cumsum(counts)])
    return rows, starts, expansion


def draw_totals(sample: SampleSeq, pop: FinitePopulation, unit_values: np.ndarray | None = None) -> np.ndarray:
    """``yhat_{h i(k)}`` for each draw, shape ``(n, q)``."""
    values = pop.y if unit_values is None else unit_values
    rows, starts, expansion = sampled_rows(sample, pop)
    sums = np.add.reduceat(values[rows], starts[:-1], axis=0)
    return sums * expansion[:, None]


def _draw_scale(sample: SampleSeq, pop: FinitePopulation) -> np.ndarray:
    """``M_h p_hi`` for each draw."""
    p = selection_probabilities(sample.design, pop)
    return pop.stratum_sizes[sample.stratum] * p[sample.global_labels(pop)]


def draw_estimates(sample: SampleSeq, pop: FinitePopulation) -> list[DrawEstimate]:
    _require_ppswr(sample)
    t = draw_totals(sample, pop) / _draw_scale(sample, pop)[:, None]
    return [DrawEstimate(int(h), int(k), v) for h, k, v in zip(sample.stratum, sample.draw, t)]


def _stratum_means(values: np.ndarray, stratum: np.ndarray, n_strata: int) -> np.ndarray:
    counts = np.bincount(stratum, minlength=n_strata)
    out = np.zeros((n_strata, values.shape[1]))
    np.add.at(out, stratum, values)
    return out / counts[:, None]


def _stratum_cov_of_mean(values: np.ndarray, stratum: np.ndarray, weights: np.ndarray) -> np.ndarray | None:
    """``sum_h W_h^2 s_h^2 / n_h``; None when some stratum has one draw."""
    q = values.shape[1]
    out = np.zeros((q, q))
    for h, w in enumerate(weights):
        v = values[stratum == h]
        if len(v) < 2:
            return None
        out += w * w * np.atleast_2d(np.cov(v, rowvar=False)) / len(v)
    return out


# --------------------------------------------------------------------------
# stratified PPSWR mean
# --------------------------------------------------------------------------


def _mean_point(sample: SampleSeq, pop: FinitePopulation) -> np.ndarray:
    t = draw_totals(sample, pop) / _draw_scale(sample, pop)[:, None]
    return pop.weights @ _stratum_means(t, sample.stratum, pop.L)


def ppswr_mean_estimate(sample: SampleSeq, pop: FinitePopulation) -> EstimatorResult:
    """Design-unbiased estimate of ``theta_N`` with its exact design variance."""
    design = _require_ppswr(sample)
    t = draw_totals(sample, pop) / _draw_scale(sample, pop)[:, None]
    est = pop.weights @ _stratum_means(t, sample.stratum, pop.L)
    theta_n, _ = finite_pop_mean(pop)
    return EstimatorResult(
        "mean",
        est,
        theta_n,
        len(sample),
        variance=mean_design_variance(design, pop),
        variance_estimate=_stratum_cov_of_mean(t, sample.stratum, pop.weights),
    )


def within_cluster_cov(pop: FinitePopulation, unit_values: np.ndarray | None = None) -> np.ndarray:
    """Within-cluster covariance ``S_hi^2`` (divisor ``M_hi - 1``), ``(N, q, q)``.

    Zero for single-unit clusters.
    """
    v = pop.y if unit_values is None else unit_values
    starts = pop.cluster_start[:-1]
    tot = np.add.reduceat(v, starts, axis=0)
    sq = np.add.reduceat(v[:, :, None] * v[:, None, :], starts, axis=0)
    m = pop.cluster_sizes.astype(float)[:, None, None]
    dev = sq - tot[:, :, None] * tot[:, None, :] / m
    return np.where(m > 1, dev / np.maximum(m - 1, 1), 0.0)


def per_draw_variance(
    design: StratPPSWR, pop: FinitePopulation, totals: np.ndarray, within: np.ndarray | None
) -> np.ndarray:
    """``V_d`` of one draw's estimate ``yhat_hi/(M_h p_hi) - Ybar_h`` per stratum, ``(L, q, q)``.

    ``totals`` are cluster totals of the variable; ``within`` its
    within-cluster covariances (only used with a second stage).
    """
    p = selection_probabilities(design, pop)
    m = second_stage_sizes(design, pop).astype(float)
    big_m = pop.cluster_sizes.astype(float)
    q = totals.shape[1]
    out = np.zeros((pop.L, q, q))
    for h in range(pop.L):
        sl = pop.stratum_slice(h)
        scale = pop.stratum_sizes[h] * p[sl]
        t = totals[sl] / scale[:, None]
        mean_h = totals[sl].sum(axis=0) / pop.stratum_sizes[h]
        d = t - mean_h
        out[h] = np.einsum("i,ij,ik->jk", p[sl], d, d)
        if within is not None:
            # SRSWOR: V(yhat) = M^2 (1 - m/M) S^2 / m
            v2 = (big_m[sl] ** 2 * (1 - m[sl] / big_m[sl]) / m[sl])[:, None, None] * within[sl]
            out[h] += np.einsum("i,ijk->jk", p[sl] / scale**2, v2)
    return out


def mean_design_variance(design: DesignSpec, pop: FinitePopulation) -> np.ndarray:
    """Closed-form ``V_d(theta_hat_N)`` for the stratified (two-stage) PPSWR mean."""
    if not isinstance(design, StratPPSWR):
        raise UnsupportedError("closed form exists only for stratified PPSWR designs")
    two_stage = isinstance(design, StratTwoStagePPSWR) and design.m is not None
    within = within_cluster_cov(pop) if two_stage else None
    per_draw = per_draw_variance(design, pop, pop.cluster_totals, within)
    w2n = pop.weights**2 / np.asarray(design.n_h, dtype=float)
    return np.einsum("h,hjk->jk", w2n, per_draw)


# --------------------------------------------------------------------------
# ratio estimator
# --------------------------------------------------------------------------


def _require_one_stage(sample: SampleSeq) -> StratPPSWR:
    design = _require_ppswr(sample)
    if sample.units is not None:
        raise ConfigError("ratio estimator needs a one-stage sample")
    return design


def _ratio_parts(sample: SampleSeq, pop: FinitePopulation):
    design = _require_one_stage(sample)
    p = selection_probabilities(design, pop)[sample.global_labels(pop)]
    n_h = np.asarray(design.n_h, dtype=float)[sample.stratum]
    w = 1.0 / (n_h * p)
    y = pop.cluster_totals[sample.global_labels(pop)]
    n_hat = w.sum()
    if not n_hat > 0:
        raise ConfigError("estimated population size is zero")
    return w, y, n_hat


def _ratio_point(sample: SampleSeq, pop: FinitePopulation) -> np.ndarray:
    w, y, n_hat = _ratio_parts(sample, pop)
    return w @ y / n_hat


def ratio_estimate(sample: SampleSeq, pop: FinitePopulation, exact_cap: int = 10_000) -> EstimatorResult:
    """Ratio estimator ``ybar_R = sum w y / N_hat`` of ``Ybar_N``.

    The exact design variance is attached when the design can be enumerated
    within ``exact_cap`` samples. The linearized ``Gamma_d`` always goes in
    ``extra``.
    """
    design = _require_one_stage(sample)
    w, y, n_hat = _ratio_parts(sample, pop)
    est = w @ y / n_hat
    _, ybar = finite_pop_mean(pop)
    try:
        variance = exact_design_variance(design, pop, "ratio", method="enumerate", cap=exact_cap).variance
    except EnumerationCapError:
        variance = None
    # linearization variance estimate from the sample
    u = w[:, None] * (y - est)
    v_est = np.zeros((y.shape[1], y.shape[1]))
    ok = True
    for h in range(pop.L):
        uh = u[sample.stratum == h]
        nh = len(uh)
        if nh < 2:
            ok = False
            break
        v_est += nh * np.atleast_2d(np.cov(uh, rowvar=False))
    return EstimatorResult(
        "ratio",
        est,
        ybar,
        len(sample),
        variance=variance,
        variance_estimate=v_est / n_hat**2 if ok else None,
        extra={"N_hat": float(n_hat), "gamma_d_linearized": ratio_linearized_gamma_d(design, pop)},
    )


def ratio_linearized_gamma_d(design: StratPPSWR, pop: FinitePopulation) -> np.ndarray:
    """Linearized ``Gamma_d`` of the ratio estimator.

    ``(1/N)(n/N) sum_h (sum_i e_hi e_hi^T/(n_h p_hi) - e_h e_h^T/n_h)``,
    which is ``n`` times the Taylor variance of ``ybar_R``.
    """
    res = residuals(pop)
    p = selection_probabilities(design, pop)
    q = res.e.shape[1]
    acc = np.zeros((q, q))
    for h, nh in enumerate(design.n_h):
        sl = pop.stratum_slice(h)
        e = res.e[sl]
        acc += (np.einsum("i,ij,ik->jk", 1.0 / p[sl], e, e) - np.outer(res.e_h[h], res.e_h[h])) / nh
    return design.n / pop.N**2 * acc


def srs_mean_design_variance(design: SRSWR | SRSWOR, pop: FinitePopulation) -> np.ndarray:
    """``V_d`` of the sample mean of cluster totals under SRSWR or SRSWOR."""
    y = pop.cluster_totals
    d = y - y.mean(axis=0)
    ss = d.T @ d
    if isinstance(design, SRSWR):
        return ss / pop.N / design.n
    if pop.N == 1:
        return np.zeros_like(ss)
    return (1 - design.n / pop.N) * ss / (pop.N - 1) / design.n


def _sample_mean_point(sample: SampleSeq, pop: FinitePopulation) -> np.ndarray:
    return pop.cluster_totals[sample.global_labels(pop)].mean(axis=0)


ESTIMATORS: dict[str, Callable[[SampleSeq, FinitePopulation], np.ndarray]] = {
    "mean": _mean_point,
    "ratio": _ratio_point,
    "sample_mean": _sample_mean_point,
}


def point_estimate(estimator: str, sample: SampleSeq, pop: FinitePopulation) -> np.ndarray:
    try:
        return ESTIMATORS[estimator](sample, pop)
    except KeyError:
        raise ConfigError(f"unknown estimator {estimator!r}") from None


# --------------------------------------------------------------------------
# exact design variance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignVariance:
    expectation: np.ndarray
    variance: np.ndarray
    gamma_d: np.ndarray
    method: str


def exact_design_variance(
    design: DesignSpec,
    pop: FinitePopulation,
    estimator: str = "mean",
    method: str = "auto",
    cap: int = DEFAULT_SAMPLE_CAP,
) -> DesignVariance:
    """Exact ``V_d`` of an estimator, by closed form or by enumeration.

    ``method="auto"`` uses the closed form when one exists and falls back to
    enumerating every sample.
    """
    if method not in ("auto", "closed", "enumerate"):
        raise ValueError(f"unknown method {method!r}")
    if estimator == "mean" and method in ("auto", "closed") and isinstance(design, StratPPSWR):
        v = mean_design_variance(design, pop)
        return DesignVariance(finite_pop_mean(pop)[0], v, design.n * v, "closed")
    if estimator == "sample_mean" and method in ("auto", "closed") and isinstance(design, (SRSWR, SRSWOR)):
        v = srs_mean_design_variance(design, pop)
        return DesignVariance(finite_pop_mean(pop)[1], v, design.n * v, "closed")
    if method == "closed":
        raise UnsupportedError(f"no closed-form design variance for {estimator!r} under {design.kind}")
    try:
        samples = enumerate_samples(design, pop, cap=cap)
    except EnumerationCapError as exc:
        if method == "enumerate":
            raise
        raise UnsupportedError(f"no closed form and enumeration infeasible: {exc}") from exc
    probs = np.array([pr for _, pr in samples])
    values = np.array([point_estimate(estimator, s, pop) for s, _ in samples])
    mean = probs @ values
    dev = values - mean
    v = np.einsum("s,sj,sk->jk", probs, dev, dev)
    return DesignVariance(mean, v, design.n * v, "enumerate")


def design_expectation(design: DesignSpec, pop: FinitePopulation, estimator: str = "mean", cap: int = DEFAULT_SAMPLE_CAP):
    samples = enumerate_samples(design, pop, cap=cap)
    return sum(pr * point_estimate(estimator, s, pop) for s, pr in samples)


# --------------------------------------------------------------------------
# condition checkers
# --------------------------------------------------------------------------


def check_c1_prime(pop: FinitePopulation, design: StratPPSWR, delta: float = 1.0) -> float:
    """``sum_h W_h E_d |theta_hat_h^k - Ybar_h|^(2+delta)`` for a one-stage draw.

    Exact, from the single-draw distribution: cluster ``i`` is drawn with
    probability ``p_hi`` and yields ``y_hi/(M_h p_hi)``.
    """
    if isinstance(design, StratTwoStagePPSWR) and design.m is not None:
        raise UnsupportedError("the draw-level Liapunov moment has a closed form for one-stage draws only")
    p = selection_probabilities(design, pop)
    power = 2.0 + delta
    total = 0.0
    for h in range(pop.L):
        sl = pop.stratum_slice(h)
        t = pop.cluster_totals[sl] / (pop.stratum_sizes[h] * p[sl])[:, None]
        mean_h = pop.cluster_totals[sl].sum(axis=0) / pop.stratum_sizes[h]
        total += pop.weights[h] * float(p[sl] @ np.linalg.norm(t - mean_h, axis=1) ** power)
    return total


def draw_abs_moment(pop: FinitePopulation, design: StratPPSWR, delta: float = 1.0, cap: int = 10**5) -> np.ndarray:
    """``E_d |theta_hat_h^k|^(2+delta)`` per stratum.

    A second stage is handled by enumerating each cluster's unit subsets.
    """
    p = selection_probabilities(design, pop)
    m = second_stage_sizes(design, pop)
    two_stage = isinstance(design, StratTwoStagePPSWR) and design.m is not None
    power = 2.0 + delta
    out = np.zeros(pop.L)
    for h in range(pop.L):
        sl = pop.stratum_slice(h)
        for g in range(sl.start, sl.stop):
            scale = pop.stratum_sizes[h] * p[g]
            if not two_stage or m[g] == pop.cluster_sizes[g]:
                out[h] += p[g] * np.linalg.norm(pop.cluster_totals[g] / scale) ** power
                continue
            big_m, mk = int(pop.cluster_sizes[g]), int(m[g])
            n_sub = math.comb(big_m, mk)
            if n_sub > cap:
                raise EnumerationCapError(n_sub, cap, "second-stage subsets")
            y = pop.y[pop.units_of(g)]
            acc = 0.0
            for u in itertools.combinations(range(big_m), mk):
                yhat = y[list(u)].sum(axis=0) * big_m / mk
                acc += np.linalg.norm(yhat / scale) ** power
            out[h] += p[g] * acc / n_sub
    return out


def c1_prime_bound(pop: FinitePopulation, delta: float = 1.0) -> tuple[float, float]:
    """Both sides of ``sum_h W_h E_d|theta_hat_h^k|^(2+d) <= (1/N) sum |Y_hi|^(2+d)``.

    Uses the size-proportional draw (``p_hi = M_hi/M_h``).
    """
    power = 2.0 + delta
    norms = np.linalg.norm(pop.cluster_totals, axis=1) ** power
    lhs = float(np.sum(norms * pop.cluster_sizes.astype(float) ** (-1 - delta)) / pop.M)
    return lhs, float(norms.mean())


@dataclass(frozen=True)
class ConditionReport:
    c1: float
    c2: float
    n: int
    N: int
    M: int


def check_c1_c2(design: StratPPSWR, pop: FinitePopulation, delta: float = 1.0) -> ConditionReport:
    """Numeric values of the (C1) sum and the (C2) max-product.

    (C1) is ``n^(1+d) sum_h sum_k E_d|W_h theta_hat_h^k / n_h|^(2+d)``.
    (C2) is ``(n/M) max m_hi w_hij`` with the expansion weight
    ``w_hij = (M_hi/m_hi) / (n_h p_hi)``, the weight a unit carries when the
    population total ``M * theta_N`` is estimated.
    """
    n_h = np.asarray(design.n_h, dtype=float)
    n = n_h.sum()
    moments = draw_abs_moment(pop, design, delta)
    c1 = n ** (1 + delta) * float(np.sum(n_h * (pop.weights / n_h) ** (2 + delta) * moments))
    p = selection_probabilities(design, pop)
    m = second_stage_sizes(design, pop).astype(float)
    w = pop.cluster_sizes / m / (n_h[pop.cluster_stratum] * p)
    c2 = n / pop.M * float(np.max(m * w))
    return ConditionReport(c1, c2, int(n), pop.N, pop.M)
