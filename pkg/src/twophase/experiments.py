"""Monte Carlo experiments for design-based, posterior and joint (design x model) limits.

Replicate ``r`` of ladder step ``i`` draws from the stream
``Seed(master).child(i, role, r)``, so results do not depend on how
replicates are spread over worker threads. Reductions run over the replicate
arrays in index order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from .designs import (
    SRSWOR,
    DesignSpec,
    StratPPSWR,
    design_from_dict,
    draw_sample,
    with_sample_sizes,
)
from .ee import builtin_ee, fit_sample_ee, g_population, model_variance, variance_components
from .errors import ConfigError, ConvergenceError, SingularJacobianError
from .estimators import (
    check_c1_prime,
    finite_pop_mean,
    mean_design_variance,
    point_estimate,
    ratio_linearized_gamma_d,
    srs_mean_design_variance,
)
from .oracle import design_distribution
from .population import (
    Bernoulli,
    FixedSizes,
    ModelSpec,
    liapunov_m1,
    model_moments,
    realize_population,
)
from .rng import Seed

KINDS = (
    "design_clt",
    "posterior_clt",
    "asymptotic_independence",
    "ee_coverage",
    "variance_components",
    "condition_ladder",
    "mc_vs_oracle",
)

# roles of the per-step random streams
POP, SAMPLE, REP = "population", "sample", "replicate"


def ks_critical(alpha: float, r: int) -> float:
    """Asymptotic one-sample KS critical value ``c(alpha)/sqrt(R)``."""
    return math.sqrt(-math.log(alpha / 2) / 2) / math.sqrt(r)


def dkw_band(alpha: float, r: int) -> float:
    return math.sqrt(math.log(2 / alpha) / (2 * r))


@dataclass(frozen=True)
class LadderStep:
    n_clusters: tuple[int, ...]
    n: tuple[int, ...] | int | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"n_clusters": list(self.n_clusters)}
        if self.n is not None:
            d["n"] = list(self.n) if isinstance(self.n, tuple) else self.n
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LadderStep":
        n = d.get("n")
        return cls(tuple(int(v) for v in d["n_clusters"]), tuple(int(v) for v in n) if isinstance(n, list) else n)


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    model: ModelSpec
    replicates: int
    seed: int
    design: DesignSpec | None = None
    estimator: str = "mean"
    ladder: tuple[LadderStep, ...] = ()
    alpha: float = 0.01
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.replicates < 100:
            raise ConfigError("replicates must be at least 100")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        totals = [sum(s.n_clusters) for s in self.ladder]
        if any(b <= a for a, b in zip(totals, totals[1:])):
            raise ConfigError("ladder population sizes must increase")

    def steps(self) -> tuple[LadderStep, ...]:
        return self.ladder or (LadderStep(self.model.n_clusters, None),)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "kind": self.kind,
            "model": self.model.to_dict(),
            "replicates": self.replicates,
            "seed": self.seed,
            "estimator": self.estimator,
            "ladder": [s.to_dict() for s in self.ladder],
            "alpha": self.alpha,
            "options": self.options,
        }
        if self.design is not None:
            d["design"] = self.design.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentSpec":
        return cls(
            kind=d["kind"],
            model=ModelSpec.from_dict(d["model"]),
            replicates=int(d["replicates"]),
            seed=int(d["seed"]),
            design=design_from_dict(d["design"]) if d.get("design") else None,
            estimator=d.get("estimator", "mean"),
            ladder=tuple(LadderStep.from_dict(s) for s in d.get("ladder", [])),
            alpha=float(d.get("alpha", 0.01)),
            options=dict(d.get("options", {})),
        )


@dataclass
class ReplicateTable:
    step: int
    columns: tuple[str, ...]
    values: np.ndarray


@dataclass
class ExperimentReport:
    kind: str
    seed: int
    steps: list[dict[str, Any]]
    criteria: dict[str, bool]
    tables: list[ReplicateTable] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "passed": self.passed,
            "criteria": self.criteria,
            "steps": self.steps,
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def replicate_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = sorted({c for t in self.tables for c in t.columns}, key=lambda c: (c != "replicate", c))
        w.writerow(["step", *cols])
        for t in self.tables:
            idx = {c: j for j, c in enumerate(t.columns)}
            for row in t.values:
                w.writerow([t.step, *(_fmt(row[idx[c]]) if c in idx else "" for c in cols)])
        return buf.getvalue()


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------


def _parallel_map(fn: Callable[[int], Any], n: int, threads: int) -> list[Any]:
    if threads <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n), chunksize=max(1, n // (threads * 8))))


def _seed(spec: ExperimentSpec, step: int, *path) -> Seed:
    return Seed(spec.seed).child(step, *path)


def _step_model(spec: ExperimentSpec, step: LadderStep) -> ModelSpec:
    return spec.model.with_clusters(step.n_clusters)


def _step_design(spec: ExperimentSpec, step: LadderStep) -> DesignSpec:
    if spec.design is None:
        raise ConfigError(f"{spec.kind} needs a design")
    return spec.design if step.n is None else with_sample_sizes(spec.design, step.n)


def _condition_on_sizes(model: ModelSpec, seed: Seed) -> ModelSpec:
    """Draw cluster sizes once and hold them fixed across replicates."""
    if all(isinstance(s.sizes, FixedSizes) for s in model.strata):
        return model
    rng = seed.generator()
    return model.with_sizes([s.sizes.draw(rng, s.n_clusters).tolist() for s in model.strata])


def _moments(x: np.ndarray) -> dict[str, float]:
    """Mean, variance and their MC standard errors."""
    r = len(x)
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1))
    m4 = float(np.mean((x - mean) ** 4))
    return {
        "mean": mean,
        "mean_se": math.sqrt(var / r),
        "var": var,
        "var_se": math.sqrt(max(m4 - var * var, 0.0) / r),
    }


def _ks(x: np.ndarray) -> float:
    return float(stats.kstest(x, "norm").statistic)


def _degenerate(g: float, scale: float) -> bool:
    return not g > 1e-12 * max(1.0, scale)


# --------------------------------------------------------------------------
# design CLT
# --------------------------------------------------------------------------


def run_design_clt(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Population fixed per step; the design is replicated and the standardized
    estimator is compared with N(0, 1) by a one-sample KS test."""
    crit = ks_critical(spec.alpha, spec.replicates)
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        pop = realize_population(_step_model(spec, step), _seed(spec, i, POP))
        design = _step_design(spec, step)
        if not isinstance(design, StratPPSWR):
            raise ConfigError("design CLT runs on stratified PPSWR designs")
        theta_n, ybar_n = finite_pop_mean(pop)
        if spec.estimator == "mean":
            target, gamma_d, method = theta_n[0], design.n * mean_design_variance(design, pop)[0, 0], "exact"
        elif spec.estimator == "ratio":
            target, gamma_d, method = ybar_n[0], ratio_linearized_gamma_d(design, pop)[0, 0], "linearized"
        else:
            raise ConfigError(f"design CLT supports 'mean' and 'ratio', not {spec.estimator!r}")

        def one(r: int) -> float:
            s = draw_sample(design, pop, _seed(spec, i, REP, r))
            return float(point_estimate(spec.estimator, s, pop)[0])

        est = np.array(_parallel_map(one, spec.replicates, threads))
        summary: dict[str, Any] = {
            "N": pop.N,
            "n": design.n,
            "target": float(target),
            "gamma_d": float(gamma_d),
            "gamma_d_method": method,
            "estimate": _moments(est),
            "ks_critical": crit,
        }
        if _degenerate(gamma_d, target * target):
            summary["degenerate"] = True
            criteria[f"step{i}_ks"] = bool(np.ptp(est) == 0)
            tables.append(ReplicateTable(i, ("replicate", "estimate"), np.column_stack([np.arange(len(est)), est])))
        else:
            z = math.sqrt(design.n) * (est - target) / math.sqrt(gamma_d)
            d = _ks(z)
            summary.update({"degenerate": False, "ks": d, "standardized": _moments(z)})
            criteria[f"step{i}_ks"] = d < crit
            tables.append(
                ReplicateTable(i, ("replicate", "estimate", "z"), np.column_stack([np.arange(len(est)), est, z]))
            )
        steps.append(summary)
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables, {"estimator": spec.estimator})


# --------------------------------------------------------------------------
# posterior CLT
# --------------------------------------------------------------------------


def lattice_ks_floor(n: int, q: float) -> float:
    """``sup_t |F(t) - Phi(t)|`` for a standardized Binomial(n, q) sum.

    No sample of a lattice statistic can get much closer to the normal CDF
    than this, however large R is.
    """
    k = np.arange(n + 1)
    t = (k - n * q) / math.sqrt(n * q * (1 - q))
    cdf = stats.binom.cdf(k, n, q)
    left = np.concatenate([[0.0], cdf[:-1]])
    phi = stats.norm.cdf(t)
    return float(max(np.max(np.abs(cdf - phi)), np.max(np.abs(left - phi))))


def run_posterior_clt(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Labels fixed by one SRSWOR draw; the model outcome is redrawn per replicate."""
    crit = ks_critical(spec.alpha, spec.replicates)
    design = spec.design or SRSWOR(spec.options.get("n", 1))
    if not isinstance(design, SRSWOR):
        raise ConfigError("posterior CLT needs an SRSWOR design")
    if spec.model.p != 1:
        raise ConfigError("posterior CLT needs a scalar study variable")
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        model = _step_model(spec, step)
        if any(not (isinstance(s.sizes, FixedSizes) and s.sizes.sizes == 1) for s in model.strata):
            raise ConfigError("posterior CLT uses one-unit clusters")
        d_step = design if step.n is None else with_sample_sizes(design, step.n)
        frame = realize_population(model, _seed(spec, i, POP))
        labels = draw_sample(d_step, frame, _seed(spec, i, SAMPLE)).global_labels(frame)
        assert len(np.unique(labels)) == len(labels), "repeated labels under SRSWOR"
        mom = model_moments(model)
        if len({float(v) for v in mom.mu[:, 0]}) != 1 or len({float(v) for v in mom.sigma2[:, 0]}) != 1:
            raise ConfigError("posterior CLT needs identically distributed units")
        mu, s2 = float(mom.mu[0, 0]), float(mom.sigma2[0, 0])
        n = len(labels)
        summary: dict[str, Any] = {"N": frame.N, "n": n, "mu": mu, "sigma2": s2, "ks_critical": crit}

        def one(r: int) -> float:
            pop = realize_population(model, _seed(spec, i, REP, r))
            return float(np.sum(pop.cluster_totals[labels, 0] - mu))

        sums = np.array(_parallel_map(one, spec.replicates, threads))
        if _degenerate(s2, mu * mu):
            summary["degenerate"] = True
            criteria[f"step{i}_ks"] = bool(np.ptp(sums) == 0)
            tables.append(ReplicateTable(i, ("replicate", "sum"), np.column_stack([np.arange(len(sums)), sums])))
        else:
            z = sums / math.sqrt(s2 * n)
            d = _ks(z)
            summary.update({"degenerate": False, "ks": d, "standardized": _moments(z)})
            fam = model.strata[0].y[0]
            if isinstance(fam, Bernoulli) and all(s.y[0] == fam for s in model.strata):
                summary["lattice_ks_floor"] = lattice_ks_floor(n, fam.q)
            criteria[f"step{i}_ks"] = d < crit
            tables.append(
                ReplicateTable(i, ("replicate", "sum", "z"), np.column_stack([np.arange(len(sums)), sums, z]))
            )
        steps.append(summary)
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables)


# --------------------------------------------------------------------------
# joint limit and asymptotic independence
# --------------------------------------------------------------------------


def grid_factorization(a: np.ndarray, b: np.ndarray) -> float:
    """``max |F_AB(t, u) - F_A(t) F_B(u)|`` over the 3 x 3 grid of empirical quartiles."""
    qa = np.quantile(a, [0.25, 0.5, 0.75])
    qb = np.quantile(b, [0.25, 0.5, 0.75])
    ia = a[:, None] <= qa[None, :]
    ib = b[:, None] <= qb[None, :]
    joint = (ia[:, :, None] & ib[:, None, :]).mean(axis=0)
    prod = ia.mean(axis=0)[:, None] * ib.mean(axis=0)[None, :]
    return float(np.max(np.abs(joint - prod)))


def run_asymptotic_independence(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Each replicate draws a fresh population and a fresh sample.

    ``A = sqrt(n)(theta_hat - theta_N)`` and ``B = sqrt(N)(theta_N - theta_0)``.
    With a stratified PPSWR design the estimator is the mean per unit
    (``estimator="mean"``); with SRSWR/SRSWOR it is the sample mean of cluster
    totals (``estimator="sample_mean"``, target ``Ybar_N``). Cluster sizes are
    drawn once per step and then held fixed.
    """
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        model = _condition_on_sizes(_step_model(spec, step), _seed(spec, i, "sizes"))
        design = _step_design(spec, step)
        ppswr = isinstance(design, StratPPSWR)
        if spec.estimator != ("mean" if ppswr else "sample_mean"):
            raise ConfigError("use 'mean' with PPSWR designs and 'sample_mean' with SRS designs")
        mom = model_moments(model)
        frame = realize_population(model, _seed(spec, i, POP))
        if ppswr:
            theta0 = float(mom.theta0(frame)[0])
            gamma_m = float(model_variance((mom.sigma2, mom.gamma), frame)[0, 0])
        else:
            sizes = frame.cluster_sizes.astype(float)
            h = frame.cluster_stratum
            theta0 = float(np.mean(sizes * mom.mu[h, 0]))
            gamma_m = float(np.mean(sizes * mom.sigma2[h, 0] + sizes**2 * mom.gamma[h, 0]))
        n, big_n = design.n, frame.N
        f = n / big_n

        def one(r: int) -> tuple[float, float, float]:
            pop = realize_population(model, _seed(spec, i, REP, r, POP))
            s = draw_sample(design, pop, _seed(spec, i, REP, r, SAMPLE))
            theta_n_all, ybar_n = finite_pop_mean(pop)
            theta_n = float((theta_n_all if ppswr else ybar_n)[0])
            est = float(point_estimate(spec.estimator, s, pop)[0])
            v = mean_design_variance(design, pop) if ppswr else srs_mean_design_variance(design, pop)
            return math.sqrt(n) * (est - theta_n), math.sqrt(big_n) * (theta_n - theta0), float(n * v[0, 0])

        out = np.array(_parallel_map(one, spec.replicates, threads))
        a, b, gd = out[:, 0], out[:, 1], out[:, 2]
        r = len(a)
        degenerate_a = bool(np.std(a) <= 1e-12 * (1.0 + np.std(b)))
        corr = 0.0 if degenerate_a or np.std(b) == 0 else float(np.corrcoef(a, b)[0, 1])
        dev = grid_factorization(a, b)
        total = a + math.sqrt(f) * b
        tm = _moments(total)
        gd_mean, gd_se = float(np.mean(gd)), float(np.std(gd, ddof=1) / math.sqrt(r))
        expected = gd_mean + f * gamma_m
        se = math.hypot(tm["var_se"], gd_se)
        summary = {
            "N": big_n,
            "n": n,
            "f": f,
            "theta0": theta0,
            "gamma_m": gamma_m,
            "gamma_d_mean": gd_mean,
            "gamma_d_spread": float(np.std(gd, ddof=1)),
            "A": _moments(a),
            "B": _moments(b),
            "corr": corr,
            "corr_se": (1 - corr * corr) / math.sqrt(r),
            "corr_threshold": 4 / math.sqrt(r),
            "grid_deviation": dev,
            "grid_threshold": float(spec.options.get("grid_threshold", 0.02)),
            "var_total": tm["var"],
            "var_expected": expected,
            "var_se": se,
            "degenerate_A": degenerate_a,
        }
        criteria[f"step{i}_corr"] = bool(degenerate_a or abs(corr) < 4 / math.sqrt(r))
        criteria[f"step{i}_grid"] = bool(degenerate_a or dev < summary["grid_threshold"])
        criteria[f"step{i}_variance"] = bool(abs(tm["var"] - expected) <= 3 * se)
        steps.append(summary)
        tables.append(ReplicateTable(i, ("replicate", "A", "B", "gamma_d"), np.column_stack([np.arange(r), a, b, gd])))
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables)


# --------------------------------------------------------------------------
# EE sandwich coverage
# --------------------------------------------------------------------------


def run_ee_coverage(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Coverage of ``theta_0`` by sandwich intervals over joint replicates.

    Options: ``include_model`` (default True), ``level`` (0.95),
    ``coverage_band`` ([lo, hi]) or ``coverage_below`` (upper bound for a
    negative control), ``max_failure_rate`` (0.001).
    """
    opts = spec.options
    include_model = bool(opts.get("include_model", True))
    level = float(opts.get("level", 0.95))
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        model = _condition_on_sizes(_step_model(spec, step), _seed(spec, i, "sizes"))
        design = _step_design(spec, step)
        mom = model_moments(model)
        frame = realize_population(model, _seed(spec, i, POP))
        ee = builtin_ee(spec.estimator, frame)
        if spec.estimator != "mean":
            raise ConfigError("coverage of theta_0 from model moments is defined for the mean EE")
        theta0 = mom.theta0(frame)

        def one(r: int) -> tuple[float, ...]:
            pop = realize_population(model, _seed(spec, i, REP, r, POP))
            s = draw_sample(design, pop, _seed(spec, i, REP, r, SAMPLE))
            try:
                res = fit_sample_ee(s, pop, ee, include_model=include_model, level=level)
            except (ConvergenceError, SingularJacobianError, ConfigError):
                return (math.nan,) * 5
            lo, hi = res.ci()[0]
            cover = float(lo <= theta0[0] <= hi)
            return cover, float(res.theta_hat[0]), float(res.gamma[0, 0]), float(res.gamma_d[0, 0]), float(res.gamma_m[0, 0])

        out = np.array(_parallel_map(one, spec.replicates, threads))
        ok = ~np.isnan(out[:, 0])
        fails = int(np.sum(~ok))
        cov = float(np.mean(out[ok, 0])) if ok.any() else 0.0
        r_ok = int(ok.sum())
        summary: dict[str, Any] = {
            "N": frame.N,
            "n": design.n,
            "f": design.n / frame.N,
            "theta0": float(theta0[0]),
            "include_model": include_model,
            "coverage": cov,
            "coverage_se": math.sqrt(cov * (1 - cov) / max(r_ok, 1)),
            "failures": fails,
            "failure_rate": fails / spec.replicates,
            "theta_hat": _moments(out[ok, 1]),
            "gamma_hat_mean": float(np.mean(out[ok, 2])),
            "gamma_d_hat_mean": float(np.mean(out[ok, 3])),
            "gamma_m_hat_mean": float(np.mean(out[ok, 4])),
        }
        criteria[f"step{i}_failures"] = fails / spec.replicates < float(opts.get("max_failure_rate", 0.001))
        if "coverage_below" in opts:
            criteria[f"step{i}_coverage_below"] = cov < float(opts["coverage_below"])
        else:
            lo, hi = opts.get("coverage_band", [0.93, 0.97])
            criteria[f"step{i}_coverage"] = float(lo) <= cov <= float(hi)
        steps.append(summary)
        tables.append(
            ReplicateTable(
                i,
                ("replicate", "covered", "theta_hat", "gamma", "gamma_d", "gamma_m"),
                np.column_stack([np.arange(len(out)), out]),
            )
        )
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables, {"include_model": include_model})


# --------------------------------------------------------------------------
# variance components over model replicates
# --------------------------------------------------------------------------


def run_variance_components(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Model replicates of the finite-population ``sigma2_h``, ``gamma_h`` and of
    ``sqrt(N) G_N(theta_0)`` for the mean EE, with sizes held fixed."""
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        model = _condition_on_sizes(_step_model(spec, step), _seed(spec, i, "sizes"))
        if model.p != 1:
            raise ConfigError("variance-component experiment needs a scalar study variable")
        mom = model_moments(model)
        frame = realize_population(model, _seed(spec, i, POP))
        ee = builtin_ee("mean", frame)
        theta0 = mom.theta0(frame)
        L = frame.L
        v_true = float(model_variance((mom.sigma2, mom.gamma), frame)[0, 0])

        def one(r: int) -> np.ndarray:
            pop = realize_population(model, _seed(spec, i, REP, r))
            vc = variance_components(pop, ee, theta0)
            gn = math.sqrt(pop.N) * g_population(theta0, pop, ee)[0]
            return np.concatenate([vc.sigma2[:, 0, 0], vc.gamma[:, 0, 0], vc.gamma_raw[:, 0, 0], [gn]])

        out = np.array(_parallel_map(one, spec.replicates, threads))
        summary: dict[str, Any] = {"N": frame.N, "M": frame.M, "strata": []}
        for h in range(L):
            s2, gm, raw = _moments(out[:, h]), _moments(out[:, L + h]), _moments(out[:, 2 * L + h])
            true_s2, true_g = float(mom.sigma2[h, 0]), float(mom.gamma[h, 0])
            summary["strata"].append(
                {
                    "sigma2_true": true_s2,
                    "gamma_true": true_g,
                    "sigma2": s2,
                    "gamma": gm,
                    "gamma_uncorrected": raw,
                }
            )
            criteria[f"step{i}_sigma2_h{h}"] = abs(s2["mean"] - true_s2) <= 4 * s2["mean_se"]
            criteria[f"step{i}_gamma_h{h}"] = abs(gm["mean"] - true_g) <= 4 * gm["mean_se"]
        gn = _moments(out[:, -1])
        summary.update({"model_variance": v_true, "sqrtN_G": gn})
        criteria[f"step{i}_model_variance"] = abs(gn["var"] - v_true) <= 3 * gn["var_se"]
        steps.append(summary)
        cols = (
            "replicate",
            *[f"sigma2_{h}" for h in range(L)],
            *[f"gamma_{h}" for h in range(L)],
            *[f"gamma_raw_{h}" for h in range(L)],
            "sqrtN_G",
        )
        tables.append(ReplicateTable(i, cols, np.column_stack([np.arange(len(out)), out])))
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables)


# --------------------------------------------------------------------------
# condition ladder
# --------------------------------------------------------------------------


def ladder_ratio(values: Sequence[float]) -> float:
    """``max/min`` over the top half of a ladder (1 when all values are 0)."""
    top = np.asarray(values[len(values) // 2 :], dtype=float)
    if np.all(top == 0):
        return 1.0
    lo = np.min(top)
    return float(np.max(top) / lo) if lo > 0 else math.inf


def run_condition_ladder(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Model-side and draw-level Liapunov moments along an increasing ladder of population sizes."""
    delta = float(spec.options.get("delta", 1.0))
    bound = float(spec.options.get("max_ratio", 2.0))
    design = spec.design
    steps = list(spec.steps())

    def one(i: int) -> tuple[float, float]:
        pop = realize_population(_step_model(spec, steps[i]), _seed(spec, i, POP))
        d = design if design is not None else StratPPSWR(tuple(1 for _ in steps[i].n_clusters))
        if steps[i].n is not None:
            d = with_sample_sizes(d, steps[i].n)
        return liapunov_m1(pop, delta), check_c1_prime(pop, d, delta)

    out = _parallel_map(one, len(steps), threads)
    m1 = [v[0] for v in out]
    c1 = [v[1] for v in out]
    summary = [
        {"N": sum(s.n_clusters), "m1": a, "c1_prime": b} for s, a, b in zip(steps, m1, c1)
    ]
    ratio = ladder_ratio(c1)
    criteria = {"c1_prime_flat": ratio <= bound}
    table = ReplicateTable(
        0, ("N", "m1", "c1_prime"), np.array([[sum(s.n_clusters), a, b] for s, a, b in zip(steps, m1, c1)])
    )
    meta = {"c1_prime_ratio": ratio, "m1_ratio": ladder_ratio(m1), "max_ratio": bound, "delta": delta}
    return ExperimentReport(spec.kind, spec.seed, summary, criteria, [table], meta)


# --------------------------------------------------------------------------
# Monte Carlo against the exact design law
# --------------------------------------------------------------------------


def run_mc_vs_oracle(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    """Empirical CDF of the estimator over design replicates versus the exact
    enumerated design CDF, judged by the DKW band."""
    band = dkw_band(spec.alpha, spec.replicates)
    steps, tables, criteria = [], [], {}
    for i, step in enumerate(spec.steps()):
        pop = realize_population(_step_model(spec, step), _seed(spec, i, POP))
        design = _step_design(spec, step)
        values, probs = design_distribution(pop, design, spec.estimator)

        def one(r: int) -> float:
            return float(point_estimate(spec.estimator, draw_sample(design, pop, _seed(spec, i, REP, r)), pop)[0])

        raw = np.array(_parallel_map(one, spec.replicates, threads))
        est = np.sort(raw)
        # both CDFs are step functions; compare on the union of jump points
        pts = np.union1d(values, est)
        exact = np.concatenate([[0.0], np.cumsum(probs)])[np.searchsorted(values, pts, side="right")]
        emp = np.searchsorted(est, pts, side="right") / len(est)
        dist = float(np.max(np.abs(exact - emp)))
        steps.append(
            {"N": pop.N, "n": design.n, "support_size": len(values), "sup_distance": dist, "dkw_band": band}
        )
        criteria[f"step{i}_dkw"] = dist <= band
        tables.append(ReplicateTable(i, ("replicate", "estimate"), np.column_stack([np.arange(len(raw)), raw])))
    return ExperimentReport(spec.kind, spec.seed, steps, criteria, tables, {"estimator": spec.estimator})


RUNNERS: dict[str, Callable[[ExperimentSpec, int], ExperimentReport]] = {
    "design_clt": run_design_clt,
    "posterior_clt": run_posterior_clt,
    "asymptotic_independence": run_asymptotic_independence,
    "ee_coverage": run_ee_coverage,
    "variance_components": run_variance_components,
    "condition_ladder": run_condition_ladder,
    "mc_vs_oracle": run_mc_vs_oracle,
}


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentReport:
    return RUNNERS[spec.kind](spec, threads)
