import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twophase.designs import StratPPSWR, StratTwoStagePPSWR, draw_sample, enumerate_samples, sample_from_labels
from twophase.ee import (
    EEFunction,
    VarianceComponents,
    builtin_ee,
    fit_sample_ee,
    g_population,
    g_sample,
    gamma_d_ee,
    jacobian_hat,
    logistic_ee,
    mean_ee,
    model_variance,
    newton,
    regression_ee,
    sandwich,
    solve_finite_pop_ee,
    solve_sample_ee,
    variance_components,
)
from twophase.errors import ConfigError, ConvergenceError, SingularJacobianError
from twophase.estimators import exact_design_variance, point_estimate
from twophase.population import FinitePopulation, FixedSizes, Hierarchy, ModelSpec, StratumModel, realize_population
from twophase.rng import Seed


def pop_with_x(n_clusters, sizes, y, x):
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    return FinitePopulation(tuple(n_clusters), np.asarray(sizes), y, x, np.ones(len(y)))


def bisect(fun, lo, hi, tol=1e-13):
    flo = fun(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def quadratic_ee():
    return EEFunction(
        1,
        lambda y, x, t: y * t[0] ** 2 - 1.0,
        lambda y, x, t: (2 * t[0] * y)[:, :, None],
        "quadratic",
    )


LOGISTIC_POP = pop_with_x(
    (2, 2),
    [3, 2, 4, 1],
    [1, 0, 1, 1, 0, 0, 1, 0, 1, 1],
    [0.5, -1.0, 2.0, 1.5, -0.5, -2.0, 1.0, 0.3, 0.8, -0.7],
)


@st.composite
def populations_with_x(draw):
    n_clusters = draw(st.lists(st.integers(1, 3), min_size=1, max_size=2))
    n = sum(n_clusters)
    sizes = draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
    r = sum(sizes)
    ints = st.integers(-3, 3).map(float)
    y = draw(st.lists(ints, min_size=r, max_size=r))
    x = draw(st.lists(st.integers(1, 3).map(float), min_size=r, max_size=r))
    return pop_with_x(n_clusters, sizes, y, x)


# population EE -------------------------------------------------------------------------------


def test_population_ee_examples():
    pop = FinitePopulation.from_units([[[1.0, 4.0], [2.0]]])
    assert g_population([pop.y.mean()], pop, mean_ee()) == pytest.approx([0.0], abs=1e-15)
    flat = FinitePopulation.from_cluster_totals([[1.0, 3.0]])
    assert g_population([0.0], flat, mean_ee())[0] == 2.0
    x = np.array([[1.0, 0.5], [1.0, -1.0], [1.0, 2.0], [1.0, 3.0]])
    beta = np.array([0.5, -2.0])
    lin = pop_with_x((4,), [1, 1, 1, 1], x @ beta, x)
    assert np.all(g_population(beta, lin, regression_ee(2)) == 0)


def test_solve_linear_ees():
    pop = FinitePopulation.from_units([[[1.0, 4.0], [2.0]], [[7.0]]])
    res = solve_finite_pop_ee(pop, mean_ee())
    assert res.iterations == 1 and res.residual <= 1e-10
    assert res.theta[0] == pytest.approx(pop.y.mean(), abs=1e-14)
    x = np.column_stack([np.ones(6), np.arange(6.0)])
    beta = np.array([1.5, -0.25])
    lin = pop_with_x((3,), [2, 2, 2], x @ beta, x)
    res = solve_finite_pop_ee(lin, regression_ee(2))
    assert res.iterations == 1 and np.allclose(res.theta, beta, atol=1e-12)


def test_logistic_root_matches_bisection():
    ee = logistic_ee(1)
    res = solve_finite_pop_ee(LOGISTIC_POP, ee)
    brute = bisect(lambda t: g_population([t], LOGISTIC_POP, ee)[0], -20.0, 20.0)
    assert abs(res.theta[0] - brute) <= 1e-8


# sample EE -----------------------------------------------------------------------------------


def test_take_all_sample_equals_population():
    pop = FinitePopulation.from_units([[[1.0, 2.0, 6.0]], [[3.0, -1.0]]])
    d = StratTwoStagePPSWR((1, 1), m=None)
    s = sample_from_labels(d, pop, [(0, 0), (1, 0)])
    for t in (0.0, 1.3):
        assert g_sample([t], s, pop, mean_ee())[0] == pytest.approx(g_population([t], pop, mean_ee())[0], abs=1e-14)


def test_sample_ee_unbiased_two_point(two_cluster_pop):
    pop = two_cluster_pop
    table = enumerate_samples(StratPPSWR((1,)), pop)
    for t in (0.0, 1.0):
        e = math.fsum(p * g_sample([t], s, pop, mean_ee())[0] for s, p in table)
        assert e == pytest.approx(g_population([t], pop, mean_ee())[0], abs=1e-14)


@given(pop=populations_with_x(), n=st.integers(1, 2), m=st.integers(1, 2), two_stage=st.booleans(),
       theta=st.sampled_from([-1.0, 0.0, 0.7]))
def test_sample_ee_unbiased_by_enumeration(pop, n, m, two_stage, theta):
    n_h = tuple(n for _ in pop.n_clusters)
    if two_stage:
        sizes = pop.cluster_sizes.tolist()
        rows, k = [], 0
        for nc in pop.n_clusters:
            rows.append(tuple(min(m, v) for v in sizes[k : k + nc]))
            k += nc
        d = StratTwoStagePPSWR(n_h, m=tuple(rows))
    else:
        d = StratPPSWR(n_h)
    table = enumerate_samples(d, pop)
    for ee in (mean_ee(), logistic_ee(1), regression_ee(1)):
        vals = np.array([g_sample([theta], s, pop, ee) for s, _ in table])
        probs = np.array([p for _, p in table])
        assert np.allclose(probs @ vals, g_population([theta], pop, ee), atol=1e-10, rtol=0)


def test_sample_root_is_weighted_mean_and_zeroes_ee():
    pop = FinitePopulation.from_units([[[1.0, 2.0], [5.0], [3.0, 3.0, 4.0]], [[0.0], [7.0, 1.0]]])
    d = StratPPSWR((2, 2))
    s = sample_from_labels(d, pop, [(0, 0), (0, 2), (1, 1), (1, 1)])
    res = solve_sample_ee(s, pop, mean_ee())
    assert abs(res.theta[0] - point_estimate("mean", s, pop)[0]) <= 1e-12
    assert abs(g_sample(res.theta, s, pop, mean_ee())[0]) <= 1e-10


def test_single_cluster_census_recovers_target():
    pop = FinitePopulation.from_units([[[1.0, 4.0, 2.5]]])
    s = sample_from_labels(StratPPSWR((1,)), pop, [(0, 0)])
    assert solve_sample_ee(s, pop, mean_ee()).theta[0] == pytest.approx(solve_finite_pop_ee(pop, mean_ee()).theta[0], abs=1e-14)


def test_nonlinear_sample_root_matches_bisection():
    d = StratTwoStagePPSWR((2, 1), m=((2, 1), (2, 1)))
    s = draw_sample(d, LOGISTIC_POP, Seed(4))
    ee = logistic_ee(1)
    res = solve_sample_ee(s, LOGISTIC_POP, ee)
    g = lambda t: g_sample([t], s, LOGISTIC_POP, ee)[0]
    lo, hi = -30.0, 30.0
    if g(lo) * g(hi) < 0:
        assert abs(res.theta[0] - bisect(g, lo, hi)) <= 1e-8
    else:  # a sample without a sign change has no root
        pytest.fail("crafted sample should bracket a root")


# Jacobians ------------------------------------------------------------------------------------


def test_jacobian_examples():
    pop = FinitePopulation.from_units([[[1.0, 2.0], [5.0]], [[3.0]]])
    s = sample_from_labels(StratPPSWR((1, 1)), pop, [(0, 1), (1, 0)])
    assert np.array_equal(jacobian_hat([0.3], s, pop, mean_ee()), -np.eye(1))
    x = np.array([[1.0, 0.2], [1.0, -1.0], [1.0, 2.5], [1.0, 0.0], [1.0, 1.1]])
    rp = pop_with_x((2, 1), [2, 1, 2], [1.0, 0.0, 2.0, -1.0, 0.5], x)
    rs = sample_from_labels(StratPPSWR((2, 1)), rp, [(0, 0), (0, 1), (1, 0)])
    ana = jacobian_hat([0.1, 0.2], rs, rp, regression_ee(2))
    fd = jacobian_hat([0.1, 0.2], rs, rp, regression_ee(2), analytic=False)
    assert np.allclose(ana, fd, atol=1e-6)
    qa = jacobian_hat([1.5], s, pop, quadratic_ee())
    qf = jacobian_hat([1.5], s, pop, quadratic_ee(), analytic=False)
    assert qa[0, 0] == pytest.approx(qf[0, 0], rel=1e-6)


@given(pop=populations_with_x(), theta=st.floats(-2, 2), seed=st.integers(0, 2**16))
def test_analytic_jacobian_matches_finite_differences(pop, theta, seed):
    s = draw_sample(StratPPSWR(tuple(2 for _ in pop.n_clusters)), pop, Seed(seed))
    for ee in (mean_ee(), regression_ee(1), logistic_ee(1), quadratic_ee()):
        ana = jacobian_hat([theta], s, pop, ee)
        fd = jacobian_hat([theta], s, pop, ee, analytic=False)
        assert np.allclose(ana, fd, rtol=1e-5, atol=1e-7)


# variance components ------------------------------------------------------------------------------


def test_component_examples():
    same = FinitePopulation.from_units([[[1.0, 1.0], [3.0, 3.0]]])
    assert variance_components(same, mean_ee(), [0.0]).sigma2[0, 0, 0] == 0.0
    flat = FinitePopulation.from_units([[[0.0, 2.0], [1.0, 1.0]]])
    assert variance_components(flat, mean_ee(), [0.0]).gamma_raw[0, 0, 0] == 0.0

    pop = FinitePopulation.from_units([[[0.0, 2.0], [4.0, 6.0]]])
    vc = variance_components(pop, mean_ee(), [0.0])
    assert vc.sigma2[0, 0, 0] == 2.0
    assert vc.gamma_raw[0, 0, 0] == 8.0
    # within-cluster contribution removed: 8 - (1/2)(2/2 + 2/2)
    assert vc.gamma[0, 0, 0] == 7.0
    assert vc.v_m[0, 0] == pytest.approx(8.0, abs=1e-14)


def test_components_ignore_theta_for_mean_ee():
    pop = FinitePopulation.from_units([[[0.0, 2.0, 1.0], [4.0, 6.0], [3.0]]])
    a = variance_components(pop, mean_ee(), [0.0])
    b = variance_components(pop, mean_ee(), [5.0])
    assert np.allclose(a.sigma2, b.sigma2) and np.allclose(a.gamma, b.gamma)


def test_singleton_clusters_use_stratum_within_variance():
    pop = FinitePopulation.from_units([[[0.0, 2.0], [5.0]]])
    vc = variance_components(pop, mean_ee(), [0.0])
    # sigma2 = 2 from the size-2 cluster; singleton borrows it: corr = (2/2 + 2/1)/2
    raw = np.var([1.0, 5.0], ddof=1)
    assert vc.gamma[0, 0, 0] == pytest.approx(raw - 1.5, abs=1e-14)


def test_components_need_some_multi_unit_cluster():
    pop = FinitePopulation.from_cluster_totals([[1.0, 2.0, 3.0]])
    with pytest.raises(ConfigError):
        variance_components(pop, mean_ee(), [0.0])


def test_sample_components_match_population_on_census_draw():
    pop = FinitePopulation.from_units([[[0.0, 2.0], [4.0, 6.0]]])
    d = StratPPSWR((2,))
    s = sample_from_labels(d, pop, [(0, 0), (0, 1)])
    vc = variance_components(s, mean_ee(), [0.0], pop)
    assert vc.sigma2[0, 0, 0] == 2.0 and vc.gamma[0, 0, 0] == 7.0 and vc.clamped == []


def test_negative_sample_gamma_is_clamped():
    pop = FinitePopulation.from_units([[[0.0, 10.0], [1.0, 9.0]]])
    s = sample_from_labels(StratPPSWR((2,)), pop, [(0, 0), (0, 1)])
    vc = variance_components(s, mean_ee(), [0.0], pop)
    assert vc.gamma_raw[0, 0, 0] == 0.0
    assert vc.gamma[0, 0, 0] == 0.0 and vc.clamped == [0]


# model variance and sandwich ---------------------------------------------------------------------------


def test_model_variance_examples():
    pop = FinitePopulation.from_cluster_totals([[1.0, 2.0, 3.0], [4.0, 5.0]])
    s = np.array([2.5, 2.5])
    assert model_variance((s, np.zeros(2)), pop)[0, 0] == pytest.approx(2.5, abs=1e-14)
    same = FinitePopulation.from_units([[[0.0] * 3] * 4])
    assert model_variance((np.zeros(1), np.array([1.7])), same)[0, 0] == pytest.approx(1.7, abs=1e-14)
    assert np.all(model_variance((np.zeros(2), np.zeros(2)), pop) == 0)


def test_sandwich_examples():
    gd = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(sandwich(-np.eye(2), gd, np.eye(2), 0.0), gd)
    assert np.allclose(sandwich(-np.eye(2), np.eye(2), np.eye(2), 1.0), 2 * np.eye(2))
    with pytest.raises(ConfigError):
        sandwich(-np.eye(2), gd, gd, 1.5)


psd = st.lists(st.floats(-3, 3), min_size=4, max_size=4).map(lambda v: np.array(v).reshape(2, 2))


@given(a=psd, b=psd, c=psd, f=st.floats(0, 1))
def test_sandwich_sign_flip_invariance_and_psd(a, b, c, f):
    jac = a + 4 * np.eye(2)
    gd, gm = b @ b.T, c @ c.T
    g1 = sandwich(jac, gd, gm, f)
    g2 = sandwich(-jac, gd, gm, f)
    assert np.allclose(g1, g2, atol=1e-10)
    assert np.min(np.linalg.eigvalsh(g1)) >= -1e-8


def test_singular_jacobian_is_an_error():
    with pytest.raises(SingularJacobianError):
        sandwich(np.zeros((1, 1)), np.eye(1), np.eye(1), 0.0)
    pop = pop_with_x((3,), [1, 1, 1], [1.0, 2.0, 3.0], np.column_stack([np.ones(3), 2 * np.ones(3)]))
    with pytest.raises(SingularJacobianError):
        solve_finite_pop_ee(pop, regression_ee(2))


def test_newton_without_root_raises():
    with pytest.raises(ConvergenceError):
        newton(lambda t: np.sqrt(t * t + 1.0), lambda t: np.diag(t / np.sqrt(t * t + 1.0)), np.full(1, 2.0), max_iter=3)


# design variance of the EE ---------------------------------------------------------------------------


def test_gamma_d_examples(two_cluster_pop):
    prop = FinitePopulation.from_cluster_totals([[2.0, 6.0]], sizes=[[1, 3]])
    assert gamma_d_ee([2.0], prop, StratPPSWR((2,)), mean_ee())[0, 0] == pytest.approx(0.0, abs=1e-14)
    d = StratPPSWR((1,))
    gd = gamma_d_ee([0.3], two_cluster_pop, d, mean_ee())
    exact = exact_design_variance(d, two_cluster_pop, "mean", method="enumerate").gamma_d
    assert np.allclose(gd, exact, atol=1e-10)
    scaled = EEFunction(1, lambda y, x, t: 3.0 * (y - t), None, "scaled")
    assert gamma_d_ee([0.3], two_cluster_pop, d, scaled)[0, 0] == pytest.approx(9 * gd[0, 0], abs=1e-12)


@given(pop=populations_with_x(), m=st.integers(1, 2), two_stage=st.booleans(), theta=st.floats(-1, 1))
def test_gamma_d_closed_equals_enumeration(pop, m, two_stage, theta):
    n_h = tuple(1 for _ in pop.n_clusters)
    if two_stage:
        sizes = pop.cluster_sizes.tolist()
        rows, k = [], 0
        for nc in pop.n_clusters:
            rows.append(tuple(min(m, v) for v in sizes[k : k + nc]))
            k += nc
        d = StratTwoStagePPSWR(n_h, m=tuple(rows))
    else:
        d = StratPPSWR(n_h)
    for ee in (mean_ee(), logistic_ee(1)):
        closed = gamma_d_ee([theta], pop, d, ee)
        enum = gamma_d_ee([theta], pop, d, ee, method="enumerate")
        assert np.allclose(closed, enum, atol=1e-10, rtol=0)
        assert closed[0, 0] >= -1e-8


# full fit ------------------------------------------------------------------------------------------------


def hierarchy_pop(seed):
    model = ModelSpec(
        (
            StratumModel(40, sizes=FixedSizes(3), hierarchy=Hierarchy(10.0, 4.0, 1.0)),
            StratumModel(30, sizes=FixedSizes(4), hierarchy=Hierarchy(12.0, 2.0, 1.5)),
        )
    )
    return realize_population(model, Seed(seed))


@given(seed=st.integers(0, 2**20))
def test_fit_variances_are_psd(seed):
    pop = hierarchy_pop(seed)
    s = draw_sample(StratTwoStagePPSWR((6, 5), m=2), pop, Seed(seed).child("s"))
    res = fit_sample_ee(s, pop, builtin_ee("mean", pop))
    for m in (res.gamma_d, res.gamma_m, res.gamma):
        assert np.min(np.linalg.eigvalsh(m)) >= -1e-8
    assert res.f == pytest.approx(11 / 70)


def test_fit_result_serializes_with_diagnostics():
    pop = hierarchy_pop(1)
    s = draw_sample(StratTwoStagePPSWR((6, 5), m=2), pop, Seed(2))
    res = fit_sample_ee(s, pop, mean_ee(), with_target=True)
    d = res.to_dict()
    assert d["diagnostics"]["iterations"] == 1
    assert d["theta_N"][0] == pytest.approx(solve_finite_pop_ee(pop, mean_ee()).theta[0])
    lo, hi = res.ci()[0]
    assert lo < res.theta_hat[0] < hi
    no_model = fit_sample_ee(s, pop, mean_ee(), include_model=False)
    assert no_model.gamma[0, 0] < res.gamma[0, 0]
    assert np.allclose(no_model.gamma, res.gamma_d / res.jacobian[0, 0] ** 2)


def test_builtin_lookup():
    pop = hierarchy_pop(0)
    assert builtin_ee("mean", pop).name == "mean"
    with pytest.raises(ConfigError):
        builtin_ee("regression", pop)
    with pytest.raises(ConfigError):
        builtin_ee("quantile", pop)
    assert isinstance(variance_components(pop, mean_ee(), [0.0]), VarianceComponents)
