"""Estimating equations: population and sample EEs, Newton solver, sandwich variance.

The finite-population EE is ``G_N(theta) = (1/M) sum_hij g(y_hij, x_hij, theta)``.
Its sample analogue weights every observed unit row by
``W_h / (n_h M_h p_hi) * (M_hi / m_hi)``, so that
``G_hat = sum_h W_h (1/n_h) sum_k ghat_hi(k) / (M_h p_hi(k))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .designs import (
    DEFAULT_SAMPLE_CAP,
    SampleSeq,
    StratPPSWR,
    StratTwoStagePPSWR,
    enumerate_samples,
    selection_probabilities,
)
from .errors import ConfigError, ConvergenceError, SingularJacobianError, UnsupportedError
from .estimators import per_draw_variance, sampled_rows, within_cluster_cov
from .population import FinitePopulation

GFunc = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

TOL = 1e-10
STEP_TOL = 1e-12
MAX_ITER = 50
MAX_HALVINGS = 20
COND_MAX = 1e12


@dataclass(frozen=True)
class EEFunction:
    """Unit-level estimating function.

    ``g(y, x, theta)`` maps row arrays ``y (r, p)``, ``x (r, k)`` to ``(r, dim)``;
    ``jac`` returns ``dg/dtheta`` per row, ``(r, dim, dim)``.
    """

    dim: int
    g: GFunc
    jac: GFunc | None = None
    name: str = "custom"


def mean_ee(p: int = 1) -> EEFunction:
    def g(y, x, theta):
        return y - theta

    def jac(y, x, theta):
        return np.broadcast_to(-np.eye(p), (len(y), p, p))

    return EEFunction(p, g, jac, "mean")


def regression_ee(k: int) -> EEFunction:
    """Least squares ``x (y - x'theta)`` for a scalar response."""

    def g(y, x, theta):
        return x * (y[:, 0] - x @ theta)[:, None]

    def jac(y, x, theta):
        return -x[:, :, None] * x[:, None, :]

    return EEFunction(k, g, jac, "regression")


def logistic_ee(k: int) -> EEFunction:
    """Logistic score ``x (y - expit(x'theta))`` for a 0/1 response."""

    def g(y, x, theta):
        return x * (y[:, 0] - expit(x @ theta))[:, None]

    def jac(y, x, theta):
        s = expit(x @ theta)
        return -(s * (1 - s))[:, None, None] * x[:, :, None] * x[:, None, :]

    return EEFunction(k, g, jac, "logistic")


BUILTIN_EES: dict[str, Callable[[int], EEFunction]] = {
    "mean": mean_ee,
    "regression": regression_ee,
    "logistic": logistic_ee,
}


def builtin_ee(name: str, pop: FinitePopulation) -> EEFunction:
    if name not in BUILTIN_EES:
        raise ConfigError(f"unknown estimating equation {name!r}")
    if name == "mean":
        return mean_ee(pop.p)
    if pop.k == 0:
        raise ConfigError(f"{name} EE needs covariates x")
    return BUILTIN_EES[name](pop.k)


# --------------------------------------------------------------------------
# Newton
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NewtonResult:
    theta: np.ndarray
    iterations: int
    residual: float
    halvings: int


def numeric_jacobian(fun: Callable[[np.ndarray], np.ndarray], theta: np.ndarray) -> np.ndarray:
    """Central differences with step ``1e-6 (1 + |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(len(theta)):
        h = 1e-6 * (1 + abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        cols.append((fun(theta + e) - fun(theta - e)) / (2 * h))
    return np.column_stack(cols)


def _checked_solve(jac: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(jac)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise SingularJacobianError(f"Jacobian condition number {cond:.3g} exceeds {COND_MAX:g}")
    return np.linalg.solve(jac, rhs)


def newton(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> NewtonResult:
    """Damped Newton iteration until ``||fun||_inf <= tol``."""
    theta = np.array(theta0, dtype=float)
    r = fun(theta)
    res = float(np.max(np.abs(r)))
    halvings = 0
    for it in range(max_iter + 1):
        if res <= tol:
            return NewtonResult(theta, it, res, halvings)
        if it == max_iter:
            break
        step = _checked_solve(jac(theta), -r)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + t * step
            r_new = fun(cand)
            res_new = float(np.max(np.abs(r_new)))
            if np.isfinite(res_new) and res_new < res:
                break
            t /= 2
            halvings += 1
        if np.max(np.abs(cand - theta)) <= STEP_TOL and res_new >= res:
            raise ConvergenceError(f"Newton stalled at residual {res:.3g}")
        theta, r, res = cand, r_new, res_new
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations (residual {res:.3g})")


# --------------------------------------------------------------------------
# population EE
# --------------------------------------------------------------------------


def _theta(theta, dim: int) -> np.ndarray:
    t = np.zeros(dim) if theta is None else np.atleast_1d(np.asarray(theta, dtype=float))
    if t.shape != (dim,):
        raise ConfigError(f"theta must have dimension {dim}")
    return t


def g_population(theta, pop: FinitePopulation, ee: EEFunction) -> np.ndarray:
    """``G_N(theta)`` with normalization ``alpha(N) = M``."""
    return ee.g(pop.y, pop.x, _theta(theta, ee.dim)).sum(axis=0) / pop.M


def jacobian_population(theta, pop: FinitePopulation, ee: EEFunction) -> np.ndarray:
    theta = _theta(theta, ee.dim)
    if ee.jac is not None:
        return ee.jac(pop.y, pop.x, theta).sum(axis=0) / pop.M
    return numeric_jacobian(lambda t: g_population(t, pop, ee), theta)


def solve_finite_pop_ee(pop: FinitePopulation, ee: EEFunction, theta_init=None) -> NewtonResult:
    return newton(
        lambda t: g_population(t, pop, ee),
        lambda t: jacobian_population(t, pop, ee),
        _theta(theta_init, ee.dim),
    )


# --------------------------------------------------------------------------
# sample EE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleData:
    """Observed unit rows with their EE weights and draw bookkeeping."""

    y: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    row_start: np.ndarray
    expansion: np.ndarray
    draw_scale: np.ndarray
    stratum: np.ndarray
    n_h: np.ndarray
    stratum_weights: np.ndarray
    cluster: np.ndarray
    n_clusters: int

    @property
    def n(self) -> int:
        return len(self.stratum)

    @property
    def f(self) -> float:
        return self.n / self.n_clusters


def sample_data(sample: SampleSeq, pop: FinitePopulation) -> SampleData:
    """Collect the sampled rows of ``pop`` and the design weights they need."""
    design = sample.design
    if not isinstance(design, StratPPSWR):
        raise ConfigError("sample EE needs a stratified PPSWR sample")
    rows, starts, expansion = sampled_rows(sample, pop)
    g = sample.global_labels(pop)
    p = selection_probabilities(design, pop)
    n_h = np.asarray(design.n_h, dtype=float)
    scale = pop.stratum_sizes[sample.stratum] * p[g]
    per_draw = pop.weights[sample.stratum] / n_h[sample.stratum] * expansion / scale
    weight = np.repeat(per_draw, np.diff(starts))
    return SampleData(
        pop.y[rows], pop.x[rows], weight, starts, expansion, scale,
        sample.stratum, n_h, pop.weights, g, pop.N,
    )


def _as_data(sample, pop) -> SampleData:
    return sample if isinstance(sample, SampleData) else sample_data(sample, pop)


def g_sample(theta, sample: SampleSeq | SampleData, pop: FinitePopulation | None, ee: EEFunction) -> np.ndarray:
    """``G_hat_N(theta)`` from sampled rows only."""
    d = _as_data(sample, pop)
    return d.weight @ ee.g(d.y, d.x, _theta(theta, ee.dim))


def jacobian_hat(
    theta, sample: SampleSeq | SampleData, pop: FinitePopulation | None, ee: EEFunction, analytic: bool = True
) -> np.ndarray:
    """``dG_hat/dtheta``: analytic when available, else central differences."""
    d = _as_data(sample, pop)
    theta = _theta(theta, ee.dim)
    if analytic and ee.jac is not None:
        return np.einsum("r,rjk->jk", d.weight, ee.jac(d.y, d.x, theta))
    return numeric_jacobian(lambda t: g_sample(t, d, None, ee), theta)


def solve_sample_ee(sample, pop, ee: EEFunction, theta_init=None) -> NewtonResult:
    d = _as_data(sample, pop)
    return newton(
        lambda t: g_sample(t, d, None, ee),
        lambda t: jacobian_hat(t, d, None, ee),
        _theta(theta_init, ee.dim),
    )


def draw_z(theta, sample, pop, ee: EEFunction) -> np.ndarray:
    """Per-draw ``ghat_hi(k)(theta) / (M_h p_hi(k))``, shape ``(n, dim)``."""
    d = _as_data(sample, pop)
    gv = ee.g(d.y, d.x, _theta(theta, ee.dim))
    sums = np.add.reduceat(gv, d.row_start[:-1], axis=0)
    return sums * (d.expansion / d.draw_scale)[:, None]


def gamma_d_hat(theta, sample, pop, ee: EEFunction) -> np.ndarray:
    """With-replacement estimate ``n sum_h W_h^2 s_h^2(Z) / n_h``."""
    d = _as_data(sample, pop)
    z = draw_z(theta, d, None, ee)
    out = np.zeros((ee.dim, ee.dim))
    for h, w in enumerate(d.stratum_weights):
        zh = z[d.stratum == h]
        if len(zh) < 2:
            raise ConfigError("variance estimation needs at least two draws per stratum")
        out += w * w * np.atleast_2d(np.cov(zh, rowvar=False)) / len(zh)
    return d.n * out


def gamma_d_ee(
    theta, pop: FinitePopulation, design: StratPPSWR, ee: EEFunction, method: str = "closed",
    cap: int = DEFAULT_SAMPLE_CAP,
) -> np.ndarray:
    """Exact ``Gamma_d = n sum_h W_h^2 V_d(Z_h1(theta)) / n_h``.

    ``method="enumerate"`` instead takes ``n V_d(G_hat(theta))`` over every sample.
    """
    theta = _theta(theta, ee.dim)
    if not isinstance(design, StratPPSWR):
        raise UnsupportedError("Gamma_d of an EE is defined for stratified PPSWR designs")
    if method == "enumerate":
        samples = enumerate_samples(design, pop, cap=cap)
        probs = np.array([pr for _, pr in samples])
        vals = np.array([g_sample(theta, s, pop, ee) for s, _ in samples])
        dev = vals - probs @ vals
        return design.n * np.einsum("s,sj,sk->jk", probs, dev, dev)
    if method != "closed":
        raise ValueError(f"unknown method {method!r}")
    gv = ee.g(pop.y, pop.x, theta)
    totals = np.add.reduceat(gv, pop.cluster_start[:-1], axis=0)
    two_stage = isinstance(design, StratTwoStagePPSWR) and design.m is not None
    within = within_cluster_cov(pop, gv) if two_stage else None
    per_draw = per_draw_variance(design, pop, totals, within)
    w2n = pop.weights**2 / np.asarray(design.n_h, dtype=float)
    return design.n * np.einsum("h,hjk->jk", w2n, per_draw)


# --------------------------------------------------------------------------
# variance components
# --------------------------------------------------------------------------


@dataclass
class VarianceComponents:
    """Per-stratum within (``sigma2``) and between (``gamma``) components, ``(L, d, d)``.

    ``gamma_raw`` is the plain between-cluster covariance of cluster means.
    ``gamma`` subtracts its within-cluster contribution, making it unbiased
    for the model ``gamma_h``.
    """

    sigma2: np.ndarray
    gamma: np.ndarray
    gamma_raw: np.ndarray
    source: str
    clamped: list[int] = field(default_factory=list)
    v_m: np.ndarray | None = None


def _cov_sum(v: np.ndarray) -> np.ndarray:
    c = v - v.mean(axis=0)
    return c.T @ c


def _components_from_groups(groups: list[list[np.ndarray]], sizes: list[np.ndarray]):
    """``groups[h][i]`` holds the observed unit g-values of cluster i in stratum h,
    ``sizes[h][i]`` the cluster size used to scale the within-cluster term."""
    dim = groups[0][0].shape[1]
    L = len(groups)
    sigma2 = np.zeros((L, dim, dim))
    gamma_raw = np.zeros((L, dim, dim))
    gamma = np.zeros((L, dim, dim))
    for h, (clusters, div) in enumerate(zip(groups, sizes)):
        within = [(_cov_sum(c) / (len(c) - 1)) if len(c) >= 2 else None for c in clusters]
        usable = [w for w in within if w is not None]
        if not usable:
            raise ConfigError(
                f"stratum {h}: every cluster has one unit, so the within-cluster variance is undefined; "
                "use clusters of size two or more"
            )
        sigma2[h] = np.mean(usable, axis=0)
        means = np.array([c.mean(axis=0) for c in clusters])
        nh = len(clusters)
        if nh < 2:
            raise ConfigError(f"stratum {h}: between-cluster variance needs two clusters")
        gamma_raw[h] = _cov_sum(means) / (nh - 1)
        corr = sum((sigma2[h] if w is None else w) / m for w, m in zip(within, div))
        gamma[h] = gamma_raw[h] - corr / nh
    return sigma2, gamma, gamma_raw


def _population_components(pop: FinitePopulation, gv: np.ndarray) -> VarianceComponents:
    """Vectorized finite-population components over all clusters."""
    within = within_cluster_cov(pop, gv)
    sizes = pop.cluster_sizes.astype(float)
    means = np.add.reduceat(gv, pop.cluster_start[:-1], axis=0) / sizes[:, None]
    starts = pop.stratum_start[:-1]
    n_h = np.diff(pop.stratum_start).astype(float)
    multi = (sizes >= 2).astype(float)
    n_multi = np.add.reduceat(multi, starts)
    if np.any(n_multi == 0):
        h = int(np.argmin(n_multi))
        raise ConfigError(
            f"stratum {h}: every cluster has one unit, so the within-cluster variance is undefined; "
            "use clusters of size two or more"
        )
    if np.any(n_h < 2):
        raise ConfigError("between-cluster variance needs two clusters per stratum")
    sigma2 = np.add.reduceat(within * multi[:, None, None], starts, axis=0) / n_multi[:, None, None]
    stratum_mean = np.add.reduceat(means, starts, axis=0) / n_h[:, None]
    dev = means - stratum_mean[pop.cluster_stratum]
    gamma_raw = np.add.reduceat(dev[:, :, None] * dev[:, None, :], starts, axis=0) / (n_h - 1)[:, None, None]
    # clusters of size one borrow the stratum within-cluster variance
    w_used = np.where(sizes[:, None, None] >= 2, within, sigma2[pop.cluster_stratum])
    corr = np.add.reduceat(w_used / sizes[:, None, None], starts, axis=0) / n_h[:, None, None]
    return VarianceComponents(sigma2, gamma_raw - corr, gamma_raw, "population")


def variance_components(source, ee: EEFunction, theta, pop: FinitePopulation | None = None) -> VarianceComponents:
    """``sigma2_h`` and ``gamma_h`` of the unit g-values at ``theta``.

    ``source`` is a FinitePopulation (exact finite-population values) or a
    sample (SampleSeq with its ``pop``, or SampleData) for plug-in estimates
    computed over the sampled clusters. Sample ``gamma`` below zero is
    clamped to zero and the stratum is listed in ``clamped``.
    """
    theta = _theta(theta, ee.dim)
    if isinstance(source, FinitePopulation):
        vc = _population_components(source, ee.g(source.y, source.x, theta))
        vc.v_m = model_variance(vc, source)
        return vc
    d = _as_data(source, pop)
    gv = ee.g(d.y, d.x, theta)
    L = len(d.stratum_weights)
    groups: list[list[np.ndarray]] = [[] for _ in range(L)]
    sizes: list[list[int]] = [[] for _ in range(L)]
    for k in range(d.n):
        rows = gv[d.row_start[k] : d.row_start[k + 1]]
        groups[d.stratum[k]].append(rows)
        sizes[d.stratum[k]].append(len(rows))
    s2, gm, raw = _components_from_groups(groups, sizes)
    clamped = []
    for h in range(L):
        if np.any(np.diag(gm[h]) < 0):
            clamped.append(h)
            gm[h] = _clamp_psd(gm[h])
    vc = VarianceComponents(s2, gm, raw, "sample", clamped)
    if pop is not None:
        vc.v_m = model_variance(vc, pop)
    return vc


def _pooled_components(d: SampleData, ee: EEFunction, theta: np.ndarray) -> VarianceComponents:
    """One-unit clusters: the model variance of a cluster value goes in ``sigma2``."""
    gv = ee.g(d.y, d.x, theta)
    L = len(d.stratum_weights)
    s2 = np.zeros((L, ee.dim, ee.dim))
    for h in range(L):
        v = gv[d.stratum == h]
        if len(v) < 2:
            raise ConfigError("variance estimation needs at least two draws per stratum")
        s2[h] = _cov_sum(v) / (len(v) - 1)
    return VarianceComponents(s2, np.zeros_like(s2), np.zeros_like(s2), "sample-pooled")


def _clamp_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def model_variance(components: VarianceComponents | tuple, pop: FinitePopulation) -> np.ndarray:
    """``V_m(sqrt(N) G_N) = (N/M) sum_h [W_h sigma2_h + gamma_h sum_i M_hi^2 / M]``.

    ``components`` is a VarianceComponents or a ``(sigma2, gamma)`` pair of
    per-stratum arrays. Only the frame (cluster sizes) of ``pop`` is used.
    """
    if isinstance(components, VarianceComponents):
        s2, gm = components.sigma2, components.gamma
    else:
        s2, gm = components
    s2 = np.asarray(s2, dtype=float).reshape(pop.L, -1)
    gm = np.asarray(gm, dtype=float).reshape(pop.L, -1)
    dim = int(round(np.sqrt(s2.shape[1])))
    s2 = s2.reshape(pop.L, dim, dim)
    gm = gm.reshape(pop.L, dim, dim)
    sq = np.add.reduceat(pop.cluster_sizes.astype(float) ** 2, pop.stratum_start[:-1])
    out = np.einsum("h,hjk->jk", pop.weights, s2) + np.einsum("h,hjk->jk", sq / pop.M, gm)
    return pop.N / pop.M * out


def sandwich(jac: np.ndarray, gamma_d: np.ndarray, gamma_m: np.ndarray, f: float) -> np.ndarray:
    """``J^{-1} [Gamma_d + f Gamma_m] J^{-T}``, symmetrized."""
    if not 0.0 <= f <= 1.0:
        raise ConfigError("sampling fraction must lie in [0, 1]")
    jac = np.atleast_2d(jac)
    inv = _checked_solve(jac, np.eye(len(jac)))
    out = inv @ (np.atleast_2d(gamma_d) + f * np.atleast_2d(gamma_m)) @ inv.T
    return (out + out.T) / 2


# --------------------------------------------------------------------------
# full fit
# --------------------------------------------------------------------------


@dataclass
class EEResult:
    theta_hat: np.ndarray
    jacobian: np.ndarray
    gamma_d: np.ndarray
    gamma_m: np.ndarray
    f: float
    gamma: np.ndarray
    n: int
    iterations: int
    residual: float
    theta_n: np.ndarray | None = None
    level: float = 0.95
    include_model: bool = True
    clamped: list[int] = field(default_factory=list)

    def ci(self, level: float | None = None) -> np.ndarray:
        """``(dim, 2)`` normal intervals with variance ``Gamma / n``."""
        z = norm.ppf(0.5 + (self.level if level is None else level) / 2)
        half = z * np.sqrt(np.maximum(np.diag(self.gamma), 0.0) / self.n)
        return np.column_stack([self.theta_hat - half, self.theta_hat + half])

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "theta_N": None if self.theta_n is None else self.theta_n.tolist(),
            "J": self.jacobian.tolist(),
            "gamma_d": self.gamma_d.tolist(),
            "gamma_m": self.gamma_m.tolist(),
            "f": self.f,
            "gamma": self.gamma.tolist(),
            "n": self.n,
            "ci_level": self.level,
            "ci": self.ci().tolist(),
            "include_model": self.include_model,
            "diagnostics": {
                "iterations": self.iterations,
                "residual": self.residual,
                "gamma_clamped_strata": self.clamped,
            },
        }


def fit_sample_ee(
    sample: SampleSeq,
    pop: FinitePopulation,
    ee: EEFunction,
    theta_init=None,
    include_model: bool = True,
    level: float = 0.95,
    with_target: bool = False,
) -> EEResult:
    """Solve the sample EE and attach the estimated sandwich variance.

    ``Gamma_m`` is the model variance evaluated with the sample variance components and the
    frame cluster sizes; ``include_model=False`` drops it from the sandwich.
    """
    d = sample_data(sample, pop)
    sol = solve_sample_ee(d, None, ee, theta_init)
    jac = jacobian_hat(sol.theta, d, None, ee)
    gd = gamma_d_hat(sol.theta, d, None, ee)
    if np.all(np.diff(d.row_start) == 1):
        comps = _pooled_components(d, ee, sol.theta)
    else:
        comps = variance_components(d, ee, sol.theta, pop)
    gm = model_variance(comps, pop)
    f = d.f
    gamma = sandwich(jac, gd, gm, f if include_model else 0.0)
    target = solve_finite_pop_ee(pop, ee, sol.theta).theta if with_target else None
    return EEResult(
        sol.theta, jac, gd, gm, f, gamma, d.n, sol.iterations, sol.residual,
        target, level, include_model, comps.clamped,
    )
