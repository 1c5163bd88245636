import copy
import math

import numpy as np
import pytest

from twophase.cli import load_config
from twophase.errors import ConfigError
from twophase.experiments import (
    ExperimentSpec,
    dkw_band,
    grid_factorization,
    ks_critical,
    ladder_ratio,
    lattice_ks_floor,
    run_experiment,
)


def bundled(name, **changes):
    cfg = copy.deepcopy(load_config(name))
    cfg.update(changes)
    return ExperimentSpec.from_dict(cfg)


def one_stratum(n_clusters, family, sizes=None):
    s = {"n_clusters": n_clusters, "y": [family]}
    if sizes is not None:
        s["sizes"] = sizes
    return {"strata": [s]}


def spec(kind, model, replicates=200, **kw):
    return ExperimentSpec.from_dict({"kind": kind, "model": model, "replicates": replicates, "seed": 5, **kw})


# helpers ------------------------------------------------------------------------------


def test_ks_critical_value():
    assert ks_critical(0.01, 5000) == pytest.approx(0.0231, abs=1e-4)
    assert ks_critical(0.05, 100) == pytest.approx(0.1358, abs=5e-4)


def test_dkw_band():
    assert dkw_band(0.01, 100_000) == pytest.approx(math.sqrt(math.log(200) / 200_000))


def test_lattice_floor_for_bernoulli_sum():
    assert lattice_ks_floor(400, 0.5) == pytest.approx(0.0199, abs=1e-4)
    assert lattice_ks_floor(1600, 0.5) < lattice_ks_floor(400, 0.5)


def test_grid_factorization():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=20_000), rng.normal(size=20_000)
    assert grid_factorization(a, b) < 0.01
    assert grid_factorization(a, a) == pytest.approx(0.25, abs=1e-3)


def test_ladder_ratio():
    assert ladder_ratio([0.0, 0.0, 0.0, 0.0]) == 1.0
    assert ladder_ratio([5.0, 1.0, 2.0, 4.0]) == 2.0
    assert ladder_ratio([1.0, 1.0, 0.0, 3.0]) == math.inf


# spec validation ------------------------------------------------------------------------


def test_spec_validation():
    model = one_stratum(10, {"family": "normal", "mean": 0.0, "var": 1.0})
    with pytest.raises(ConfigError):
        spec("design_clt", model, replicates=99)
    with pytest.raises(ConfigError):
        spec("bootstrap", model)
    with pytest.raises(ConfigError):
        spec("condition_ladder", model, ladder=[{"n_clusters": [20]}, {"n_clusters": [20]}])
    with pytest.raises(ConfigError):
        spec("design_clt", model, alpha=1.5)
    with pytest.raises(ConfigError):
        run_experiment(spec("design_clt", model))


def test_spec_round_trip():
    s = bundled("asymptotic_independence")
    assert ExperimentSpec.from_dict(s.to_dict()) == s


# design CLT -----------------------------------------------------------------------------------


def test_design_clt_point_mass_is_degenerate():
    model = one_stratum(40, {"family": "point", "value": 3.0}, {"uniform": [1, 4]})
    rep = run_experiment(spec("design_clt", model, design={"type": "strat_ppswr", "n_h": [5]}))
    assert rep.steps[0]["degenerate"] is True
    assert rep.passed
    assert rep.steps[0]["estimate"]["var"] == 0.0


def test_design_clt_small_mean_run():
    model = one_stratum(300, {"family": "gamma", "shape": 2.0, "scale": 1.0}, {"uniform": [1, 3]})
    rep = run_experiment(spec("design_clt", model, replicates=1000, design={"type": "strat_ppswr", "n_h": [40]}))
    step = rep.steps[0]
    assert step["gamma_d_method"] == "exact"
    assert step["ks"] < step["ks_critical"]
    assert abs(step["standardized"]["var"] - 1.0) < 0.15


# posterior CLT -------------------------------------------------------------------------------------


def test_posterior_clt_single_normal_draw_is_exact():
    rep = run_experiment(bundled("posterior_clt_normal_n1"))
    assert rep.steps[0]["n"] == 1
    assert rep.passed


def test_posterior_clt_constant_model_is_degenerate():
    model = one_stratum(30, {"family": "point", "value": 2.0})
    rep = run_experiment(spec("posterior_clt", model, design={"type": "srswor", "n": 10}))
    assert rep.steps[0]["degenerate"] is True and rep.passed


def test_posterior_clt_reports_lattice_floor():
    model = one_stratum(100, {"family": "bernoulli", "q": 0.5})
    rep = run_experiment(spec("posterior_clt", model, design={"type": "srswor", "n": 25}))
    assert rep.steps[0]["lattice_ks_floor"] == pytest.approx(lattice_ks_floor(25, 0.5))


def test_posterior_clt_rejects_unsupported_inputs():
    model = one_stratum(30, {"family": "normal", "mean": 0.0, "var": 1.0})
    with pytest.raises(ConfigError):
        run_experiment(spec("posterior_clt", model, design={"type": "srswr", "n": 3}))
    clustered = one_stratum(30, {"family": "normal", "mean": 0.0, "var": 1.0}, {"constant": 2})
    with pytest.raises(ConfigError):
        run_experiment(spec("posterior_clt", clustered, design={"type": "srswor", "n": 3}))


# asymptotic independence --------------------------------------------------------------------------


def test_census_makes_design_error_vanish():
    model = one_stratum(40, {"family": "normal", "mean": 1.0, "var": 1.0})
    rep = run_experiment(
        spec("asymptotic_independence", model, estimator="sample_mean", design={"type": "srswor", "n": 40})
    )
    step = rep.steps[0]
    assert step["degenerate_A"] is True and step["f"] == 1.0
    assert step["A"]["var"] < 1e-20
    assert rep.passed


def test_independence_small_ppswr_run():
    model = one_stratum(400, {"family": "gamma", "shape": 2.0, "scale": 1.0}, {"uniform": [2, 4]})
    rep = run_experiment(spec("asymptotic_independence", model, replicates=1000, design={"type": "strat_ppswr", "n_h": [40]}))
    step = rep.steps[0]
    assert not step["degenerate_A"]
    assert abs(step["var_total"] - step["var_expected"]) <= 3 * step["var_se"]


def test_independence_estimator_must_match_design():
    model = one_stratum(40, {"family": "normal", "mean": 1.0, "var": 1.0})
    with pytest.raises(ConfigError):
        run_experiment(spec("asymptotic_independence", model, design={"type": "srswor", "n": 4}))


# EE coverage ----------------------------------------------------------------------------------------


def test_ee_coverage_small_run():
    s = bundled("ee_coverage", replicates=200)
    rep = run_experiment(s, threads=4)
    step = rep.steps[0]
    assert step["f"] == pytest.approx(0.1)
    assert step["failures"] == 0
    assert 0.88 <= step["coverage"] <= 1.0
    assert rep.tables[0].values.shape == (200, 6)


def test_ee_coverage_rejects_non_mean_ee():
    with pytest.raises(ConfigError):
        run_experiment(bundled("ee_coverage", replicates=100, estimator="ratio"))


@pytest.mark.slow
def test_model_term_is_negligible_at_tiny_sampling_fraction():
    rep = run_experiment(bundled("ee_coverage_small_f"), threads=8)
    step = rep.steps[0]
    assert step["f"] == pytest.approx(0.001) and step["include_model"] is False
    assert 0.93 <= step["coverage"] <= 0.97


# variance components -----------------------------------------------------------------------------------


def test_variance_components_small_run():
    rep = run_experiment(bundled("variance_components", replicates=4000), threads=4)
    assert rep.passed
    s0 = rep.steps[0]["strata"][0]
    # the uncorrected between-cluster estimate is biased upward
    assert s0["gamma_uncorrected"]["mean"] - s0["gamma_true"] > 4 * s0["gamma_uncorrected"]["mean_se"]


# condition ladder -----------------------------------------------------------------------------------------


def test_ladder_point_mass_at_zero():
    model = one_stratum(10, {"family": "point", "value": 0.0})
    ladder = [{"n_clusters": [k]} for k in (10, 20, 40, 80)]
    rep = run_experiment(spec("condition_ladder", model, ladder=ladder))
    assert all(st["m1"] == 0.0 and st["c1_prime"] == 0.0 for st in rep.steps)
    assert rep.passed and rep.meta["c1_prime_ratio"] == 1.0


def test_bounded_ladder_is_flat_and_heavy_tail_is_not():
    assert run_experiment(bundled("condition_ladder_bounded"), threads=4).passed
    heavy = run_experiment(bundled("condition_ladder_heavy"), threads=4)
    assert not heavy.passed and heavy.meta["c1_prime_ratio"] > 2.0


# Monte Carlo versus the exact law ----------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["mc_vs_oracle_one_stage", "mc_vs_oracle_ratio", "mc_vs_oracle_two_stage"])
def test_mc_vs_oracle_small_runs(name):
    rep = run_experiment(bundled(name, replicates=5000), threads=4)
    step = rep.steps[0]
    assert step["dkw_band"] == pytest.approx(dkw_band(0.01, 5000))
    assert rep.passed


# determinism and output ---------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,reps",
    [("mc_vs_oracle_ratio", 300), ("ee_coverage_no_model", 100), ("asymptotic_independence", 100)],
)
def test_reports_do_not_depend_on_thread_count(name, reps):
    s = bundled(name, replicates=reps)
    a, b = run_experiment(s, threads=1), run_experiment(s, threads=4)
    assert a.to_json() == b.to_json()
    assert a.replicate_csv("seed=2026") == b.replicate_csv("seed=2026")


def test_replicate_csv_layout():
    rep = run_experiment(bundled("mc_vs_oracle_one_stage", replicates=100))
    rows = rep.replicate_csv("seed=2026").splitlines()
    assert rows[0] == "# seed=2026"
    assert rows[1] == "step,replicate,estimate"
    assert len(rows) == 2 + 100
    assert rows[2].startswith("0,0,")
