import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twophase.designs import (
    SRSWOR,
    SRSWR,
    StratPPSWR,
    StratTwoStagePPSWR,
    count_samples,
    design_from_dict,
    design_pmf,
    draw_sample,
    enumerate_samples,
    sample_from_labels,
    selection_probabilities,
)
from twophase.errors import ConfigError, EnumerationCapError
from twophase.population import FinitePopulation
from twophase.rng import Seed


def flat_pop(n):
    return FinitePopulation.from_cluster_totals([[float(i) for i in range(n)]])


def sized_pop(sizes_per_stratum):
    units = [[[float(j) for j in range(m)] for m in sizes] for sizes in sizes_per_stratum]
    return FinitePopulation.from_units(units)


# draw_sample --------------------------------------------------------------------------


def test_srswor_census_contains_every_label_once():
    pop = flat_pop(7)
    s = draw_sample(SRSWOR(7), pop, Seed(3))
    assert sorted(s.global_labels(pop).tolist()) == list(range(7))


def test_draws_are_deterministic_given_seed():
    pop = sized_pop([[1, 3, 2], [2, 2]])
    d = StratTwoStagePPSWR((3, 2), m=1)
    a, b = draw_sample(d, pop, Seed(11)), draw_sample(d, pop, Seed(11))
    assert a.key() == b.key()


@pytest.mark.slow
def test_srswr_repeat_frequency_over_many_seeds():
    pop = flat_pop(2)
    r = 10**6
    hits = sum(draw_sample(SRSWR(2), pop, Seed(s)).key() == ((0, 0), (0, 0)) for s in range(r))
    assert abs(hits / r - 0.25) <= 4 * math.sqrt(0.25 * 0.75 / r)


@pytest.mark.slow
def test_ppswr_size_proportional_frequency_over_many_seeds():
    pop = FinitePopulation.from_cluster_totals([[2.0, 3.0]], sizes=[[1, 3]])
    r = 10**6
    hits = sum(int(draw_sample(StratPPSWR((1,)), pop, Seed(s)).cluster[0]) == 1 for s in range(r))
    assert abs(hits / r - 0.75) <= 4 * math.sqrt(0.75 * 0.25 / r)


@pytest.mark.parametrize(
    "design,pop",
    [
        (SRSWR(2), flat_pop(3)),
        (SRSWOR(2), flat_pop(4)),
        (StratPPSWR((2, 1)), sized_pop([[1, 3], [2, 1, 1]])),
        (StratTwoStagePPSWR((1, 1), m=1), sized_pop([[1, 2], [3]])),
    ],
    ids=["srswr", "srswor", "strat_ppswr", "two_stage"],
)
def test_empirical_frequencies_match_pmf(design, pop):
    r = 100_000
    counts = Counter(draw_sample(design, pop, Seed(17).child(i)).key() for i in range(r))
    table = {s.key(): p for s, p in enumerate_samples(design, pop)}
    assert set(counts) <= set(table)
    for key, p in table.items():
        assert abs(counts.get(key, 0) / r - p) <= 4 * math.sqrt(p * (1 - p) / r) + 1e-12


def test_srswr_small_population_repeats_at_enumerated_rate():
    pop = flat_pop(3)
    r = 50_000
    rep = np.mean([draw_sample(SRSWR(2), pop, Seed(2).child(i)).has_repeats() for i in range(r)])
    assert abs(rep - 1 / 3) <= 4 * math.sqrt((1 / 3) * (2 / 3) / r)


def test_design_size_mismatch_is_rejected():
    pop = sized_pop([[1, 2]])
    with pytest.raises(ConfigError):
        draw_sample(SRSWOR(3), pop, Seed(0))
    with pytest.raises(ConfigError):
        draw_sample(StratTwoStagePPSWR((1,), m=3), pop, Seed(0))
    with pytest.raises(ConfigError):
        draw_sample(StratPPSWR((1, 1)), pop, Seed(0))


@given(n=st.integers(1, 12), k=st.integers(1, 12), seed=st.integers(0, 2**32))
def test_srswor_never_repeats(n, k, seed):
    k = min(n, k)
    pop = flat_pop(n)
    s = draw_sample(SRSWOR(k), pop, Seed(seed))
    labels = s.global_labels(pop)
    assert len(set(labels.tolist())) == k and labels.min() >= 0 and labels.max() < n


# design_pmf ------------------------------------------------------------------------------


def test_pmf_examples():
    two = flat_pop(2)
    assert design_pmf(SRSWR(2), two, sample_from_labels(SRSWR(2), two, [0, 1])) == 0.25
    assert design_pmf(SRSWOR(2), two, sample_from_labels(SRSWOR(2), two, [0, 1])) == 0.5
    pop = FinitePopulation.from_cluster_totals([[2.0, 3.0]], sizes=[[1, 3]])
    d = StratPPSWR((2,))
    assert design_pmf(d, pop, sample_from_labels(d, pop, [(0, 1), (0, 1)])) == pytest.approx(0.5625, abs=1e-15)


def test_impossible_sample_has_zero_mass():
    pop = flat_pop(3)
    assert design_pmf(SRSWOR(2), pop, sample_from_labels(SRSWOR(2), pop, [1, 1])) == 0.0
    assert design_pmf(SRSWR(3), pop, sample_from_labels(SRSWR(3), pop, [1, 1])) == 0.0
    sp = sized_pop([[2, 2]])
    d = StratTwoStagePPSWR((1,), m=1)
    assert design_pmf(d, sp, sample_from_labels(d, sp, [(0, 0)], units=[(0, 1)])) == 0.0


def test_two_stage_pmf_multiplies_second_stage_masses():
    pop = sized_pop([[1, 3]])
    d = StratTwoStagePPSWR((2,), m=((1, 2),))
    s = sample_from_labels(d, pop, [(0, 1), (0, 1)], units=[(0, 2), (1, 2)])
    assert design_pmf(d, pop, s) == pytest.approx((3 / 4) ** 2 / 9, abs=1e-15)


# enumeration ----------------------------------------------------------------------------------


def test_enumeration_examples():
    srswr = enumerate_samples(SRSWR(2), flat_pop(2))
    assert len(srswr) == 4 and all(p == 0.25 for _, p in srswr)
    srswor = enumerate_samples(SRSWOR(2), flat_pop(3))
    assert len(srswor) == 6 and all(p == pytest.approx(1 / 6, abs=1e-15) for _, p in srswor)
    pop = FinitePopulation.from_cluster_totals([[2.0, 3.0]], sizes=[[1, 3]])
    masses = {s.key(): p for s, p in enumerate_samples(StratPPSWR((2,)), pop)}
    expected = {((0, 0), (0, 0)): 1 / 16, ((0, 0), (0, 1)): 3 / 16, ((0, 1), (0, 0)): 3 / 16, ((0, 1), (0, 1)): 9 / 16}
    assert masses.keys() == expected.keys()
    for k, v in expected.items():
        assert masses[k] == pytest.approx(v, abs=1e-15)


def test_enumeration_cap_refuses_with_required_size():
    pop = flat_pop(10)
    with pytest.raises(EnumerationCapError) as exc:
        enumerate_samples(SRSWR(4), pop, cap=1000)
    assert exc.value.required == 10**4


small_sizes = st.lists(st.lists(st.integers(1, 3), min_size=1, max_size=3), min_size=1, max_size=2)


@given(sizes=small_sizes, n=st.integers(1, 2), m=st.integers(1, 2), two_stage=st.booleans())
def test_stratified_pmf_normalizes_and_matches_enumeration(sizes, n, m, two_stage):
    pop = sized_pop(sizes)
    n_h = tuple(n for _ in sizes)
    if two_stage:
        d = StratTwoStagePPSWR(n_h, m=tuple(tuple(min(m, v) for v in row) for row in sizes))
    else:
        d = StratPPSWR(n_h)
    table = enumerate_samples(d, pop)
    assert len(table) == count_samples(d, pop)
    assert len({s.key() for s, _ in table}) == len(table)
    assert abs(math.fsum(p for _, p in table) - 1.0) <= 1e-10
    for s, p in table:
        assert design_pmf(d, pop, s) == pytest.approx(p, rel=1e-12)


@given(n_units=st.integers(1, 5), n=st.integers(1, 3), wor=st.booleans())
def test_srs_pmf_normalizes(n_units, n, wor):
    pop = flat_pop(n_units)
    d = SRSWOR(min(n, n_units)) if wor else SRSWR(n)
    table = enumerate_samples(d, pop)
    assert abs(math.fsum(p for _, p in table) - 1.0) <= 1e-10


@given(sizes=small_sizes)
def test_selection_probabilities_sum_to_one_per_stratum(sizes):
    pop = sized_pop(sizes)
    p = selection_probabilities(StratPPSWR(tuple(1 for _ in sizes)), pop)
    for h in range(pop.L):
        assert abs(p[pop.stratum_slice(h)].sum() - 1.0) <= 1e-12


def test_design_json_round_trip_and_csv(tmp_path):
    for d in (SRSWR(3), SRSWOR(2), StratPPSWR((2, 3)), StratTwoStagePPSWR((1, 2), m=2)):
        assert design_from_dict(d.to_dict()) == d
    pop = sized_pop([[2, 3]])
    d = StratTwoStagePPSWR((2,), m=2)
    s = draw_sample(d, pop, Seed(1))
    path = tmp_path / "s.csv"
    s.to_csv(path, "seed=1")
    rows = path.read_text().splitlines()
    assert rows[:2] == ["# seed=1", "h,k,i,units"] and len(rows) == 4
    with pytest.raises(ConfigError):
        design_from_dict({"type": "poisson"})


def test_z_based_and_custom_selection_probabilities():
    base = sized_pop([[1, 2, 3], [2, 2]])
    z = np.array([1.0, 3.0, 1.0, 2.0, 2.0, 1.0, 0.5, 0.5, 4.0, 1.0])
    pop = FinitePopulation(base.n_clusters, base.cluster_sizes, base.y[:, 0], base.x, z)
    p = selection_probabilities(StratPPSWR((1, 1), measure="z"), pop)
    assert np.allclose(p, [1 / 10, 4 / 10, 5 / 10, 1 / 6, 5 / 6], atol=1e-15)
    square = StratPPSWR((2, 1), prob=lambda zt: zt**2)
    q = selection_probabilities(square, pop)
    assert np.allclose(q[:3], np.array([1.0, 16.0, 25.0]) / 42, atol=1e-15)
    table = enumerate_samples(square, pop)
    assert abs(math.fsum(pr for _, pr in table) - 1.0) <= 1e-12
    with pytest.raises(ConfigError):
        selection_probabilities(StratPPSWR((1, 1), prob=lambda zt: zt - 1.0), pop)
    with pytest.raises(ConfigError):
        square.to_dict()
