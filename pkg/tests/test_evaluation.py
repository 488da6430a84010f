import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from epns import evaluation, nbody
from epns.cpm import CPMConfig, Lattice, init_random_culture
from epns.evaluation import (EmpiricalDistribution, StabilityCriterion, cluster_count, dks_at_times, ks_statistic,
                             ks_test, ks_two_sample_pvalue, quantile_bands, stability_fraction)

samples = st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=30)


# ---------------------------------------------------------------- KS statistic


def test_ks_hand_enumerated_case():
    assert ks_statistic([1, 2, 3, 4], [3, 4, 5, 6]) == 0.5


def test_ks_trivial_cases():
    assert ks_statistic([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]) == 0.0
    assert ks_statistic(np.linspace(0, 1, 7), np.linspace(10, 11, 5)) == 1.0
    with pytest.raises(ValueError):
        EmpiricalDistribution([])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=200, deadline=None)
@given(samples, samples)
def test_ks_matches_brute_force_and_scipy(a, b):
    d = ks_statistic(a, b)
    assert d == pytest.approx(oracles.ks_brute(a, b), abs=1e-15)
    assert d == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12)
    assert d == ks_statistic(b, a)


@settings(max_examples=50, deadline=None)
@given(samples, samples)
def test_ks_invariant_under_increasing_maps(a, b):
    f = lambda xs: [math.exp(x / 7.0) * 3 - 1 for x in xs]
    assert ks_statistic(f(a), f(b)) == ks_statistic(a, b)


def test_empirical_cdf_steps():
    dist = EmpiricalDistribution([3.0, 1.0, 2.0, 2.0])
    assert dist.cdf([0.5, 1.0, 2.0, 2.5, 3.0]).tolist() == [0.0, 0.25, 0.75, 0.75, 1.0]


# ---------------------------------------------------------------- KS p-value


def test_pvalue_trivial_ends():
    assert ks_two_sample_pvalue(0.0, 100, 100) == 1.0
    assert ks_two_sample_pvalue(1.0, 100, 100) < 1e-12


@pytest.mark.parametrize("d,n,m", [(0.192, 100, 100), (0.1, 50, 80), (0.3, 20, 30), (0.05, 1000, 1000)])
def test_pvalue_matches_kolmogorov_survival_function(d, n, m):
    ne = math.sqrt(n * m / (n + m))
    lam = (ne + 0.12 + 0.11 / ne) * d
    assert ks_two_sample_pvalue(d, n, m) == pytest.approx(stats.kstwobign.sf(lam), rel=1e-8)


def test_pvalue_at_the_five_percent_critical_value():
    d = 1.36 * math.sqrt(2 / 100)
    assert ks_two_sample_pvalue(d, 100, 100) == pytest.approx(0.05, abs=0.01)


def test_ks_test_returns_statistic_and_pvalue(rng):
    a, b = rng.normal(size=200), rng.normal(size=150) + 1.0
    d, p = ks_test(a, b)
    assert d == ks_statistic(a, b) and p < 1e-6


# ---------------------------------------------------------------- clusters


def lattice(rows, types):
    return Lattice(np.array(rows, dtype=np.int32), np.array(types, dtype=np.int32))


def test_cluster_count_examples():
    # three cells of one type in a row: one cluster
    assert cluster_count(lattice([[1, 2, 3]], [0, 1, 1, 1])) == 1
    # separated by medium: three clusters
    assert cluster_count(lattice([[1, 0, 2, 0, 3]], [0, 1, 1, 1])) == 3
    # diagonal contact is not 4-adjacency
    assert cluster_count(lattice([[1, 0], [0, 2]], [0, 1, 1])) == 2
    assert cluster_count(lattice([[1, 0], [0, 2]], [0, 1, 1]), neighborhood=8) == 1
    # adjacent but of different types
    assert cluster_count(lattice([[1, 2]], [0, 1, 2])) == 2


@pytest.mark.parametrize("seed", range(5))
def test_cluster_count_matches_graph_oracle(seed):
    r = np.random.default_rng(seed)
    cfg = CPMConfig(h=24, w=24, n_cells=12, target_volume=25, burn_in=3, mcs_per_frame=1)
    lat = init_random_culture(cfg, r)
    assert cluster_count(lat) == oracles.cluster_count_graph(lat.sites, lat.cell_types)


def test_cluster_count_invariant_under_relabeling_and_translation(rng):
    cfg = CPMConfig(h=24, w=24, n_cells=8, target_volume=16, burn_in=2, mcs_per_frame=1)
    lat = init_random_culture(cfg, rng)
    base = cluster_count(lat)
    assert cluster_count(lat.relabeled(rng.permutation(8))) == base
    # shift inside the bounds: pad medium, move the content by one row and column
    shifted = np.zeros((26, 26), dtype=lat.sites.dtype)
    shifted[1:25, 1:25] = lat.sites
    assert cluster_count(Lattice(shifted, lat.cell_types)) == base


# ---------------------------------------------------------------- observables and D_KS tables


def test_observable_series_matches_direct_calls(rng):
    cfg = nbody.NBodyConfig()
    frames = nbody.simulate(nbody.sample_initial_condition(cfg, rng), cfg, 5, rng)
    series = evaluation.observable_series(frames, "kinetic_energy")
    assert series.shape == (6,)
    assert series.tolist() == [float(nbody.kinetic_energy(f)) for f in frames]
    pe = evaluation.observable_series(frames, "potential_energy", cfg)
    assert pe.tolist() == [float(nbody.potential_energy(f, cfg)) for f in frames]
    static = evaluation.observable_series([frames[0]] * 4, "kinetic_energy")
    assert np.all(static == static[0])
    with pytest.raises(ValueError):
        evaluation.observable_series(frames, "entropy")


def test_ensemble_series_pads_ragged_members(rng):
    cfg = nbody.NBodyConfig()
    frames = nbody.simulate(nbody.sample_initial_condition(cfg, rng), cfg, 3, rng)
    out = evaluation.ensemble_series([frames, frames[:2]], "kinetic_energy")
    assert out.shape == (2, 4) and np.isnan(out[1, 2:]).all() and np.isfinite(out[0]).all()


def test_dks_at_times_examples(rng):
    gt = rng.normal(size=(100, 6))
    assert dks_at_times(gt, gt, [0, 3, 5]) == {0: 0.0, 3: 0.0, 5: 0.0}
    assert dks_at_times(gt + 10 + np.ptp(gt), gt, [2]) == {2: 1.0}
    with pytest.raises(IndexError):
        dks_at_times(gt, gt, [6])


def test_dks_counts_diverged_members_as_infinite():
    gt = np.arange(10.0)[:, None]
    model = gt.copy()
    model[:5] = np.nan
    assert dks_at_times(model, gt, [0])[0] == pytest.approx(0.5)


# ---------------------------------------------------------------- equivariance protocol


def test_verify_equivariance_flags_small_samples(rng):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = evaluation.verify_equivariance(
            lambda x0, count, r: list(x0 + r.normal(size=count)), [0.0, 1.0], lambda r: r.normal(),
            lambda g, x: x + g, lambda gx0, f: f - gx0, rng, rollouts_per_x0=5)
    assert res.low_sample_warning and res.n_samples == 10 and caught


def test_translation_equivariant_toy_passes_and_biased_toy_fails(rng):
    x0s = list(rng.normal(size=50))
    rollout = lambda x0, count, r: list(x0 + r.normal(size=count))
    biased = lambda x0, count, r: list(x0 + abs(x0) * r.normal(size=count))   # spread depends on the origin
    args = (x0s, lambda r: r.normal() * 5, lambda g, x: x + g, lambda gx0, f: f - gx0)
    assert evaluation.verify_equivariance(rollout, *args, rng, 10).p_value > 0.01
    assert evaluation.verify_equivariance(biased, *args, rng, 10).p_value < 0.01


# ---------------------------------------------------------------- stability


def test_energy_spike_marks_rest_of_rollout_unstable(rng):
    cfg = nbody.NBodyConfig()
    frames = nbody.simulate(nbody.sample_initial_condition(cfg, rng), cfg, 8, rng)
    spiked = [f.copy() for f in frames]
    spiked[5].velocities = spiked[5].velocities * 40.0
    crit = StabilityCriterion("energy_jump", nbody_cfg=cfg)
    frac = stability_fraction([frames, spiked], crit)
    assert frac.tolist() == [1.0] * 5 + [0.5] * 4


def test_nonfinite_and_truncated_rollouts_are_unstable(rng):
    cfg = nbody.NBodyConfig()
    frames = nbody.simulate(nbody.sample_initial_condition(cfg, rng), cfg, 4, rng)
    bad = [f.copy() for f in frames]
    bad[2].positions = bad[2].positions * np.nan
    crit = StabilityCriterion("energy_jump", nbody_cfg=cfg)
    assert stability_fraction([bad], crit).tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]
    assert stability_fraction([frames[:2], frames], crit, 5).tolist() == [1.0, 1.0, 0.5, 0.5, 0.5]


def test_volume_criterion_uses_training_range():
    lat = lattice([[1, 1, 2, 2, 0]], [0, 1, 1])
    crit = StabilityCriterion.volume_range_from([lat])
    assert (crit.vmin, crit.vmax) == (2.0, 2.0)
    grown = lattice([[1, 1, 1, 2, 2]], [0, 1, 1])
    assert stability_fraction([[lat, lat, grown]], crit).tolist() == [1.0, 1.0, 0.0]
    with pytest.raises(ValueError):
        StabilityCriterion("energy_jump", threshold=0.0)
    with pytest.raises(ValueError):
        stability_fraction([[lat]], StabilityCriterion("other"))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=12), min_size=1, max_size=8))
def test_stability_is_monotone_and_starts_at_one(pattern):
    """Feed volume-range rollouts whose frames are in or out of range by construction."""
    ok, out = lattice([[1, 1]], [0, 1]), lattice([[1, 1, 1]], [0, 1])
    crit = StabilityCriterion("volume_range", vmin=2, vmax=2)
    rollouts = [[ok] + [out if flag else ok for flag in row] for row in pattern]
    frac = stability_fraction(rollouts, crit)
    assert frac[0] == 1.0
    assert np.all(np.diff(frac) <= 0)


# ---------------------------------------------------------------- quantile bands and test ELBO


def test_quantile_bands_examples(rng):
    med, lo, hi = quantile_bands(np.full((12, 3), 2.5))
    assert np.array_equal(lo, hi) and np.array_equal(med, lo)
    vals = rng.normal(size=(50, 4))
    med, lo, hi = quantile_bands(vals)
    assert np.all(lo <= med) and np.all(med <= hi)
    assert np.allclose(lo, np.quantile(vals, 0.1, axis=0))
    with pytest.raises(ValueError):
        quantile_bands(np.zeros((9, 2)))


def test_quantile_band_of_uniform_samples(rng):
    _, lo, hi = quantile_bands(rng.uniform(size=(100, 1)))
    assert lo[0] == pytest.approx(0.1, abs=0.05) and hi[0] == pytest.approx(0.9, abs=0.05)


def test_test_elbo_averages_every_pair_and_ignores_order():
    trajs = [[0.0, 1.0, 3.0], [5.0, 5.5]]
    fn = lambda a, b: -(b - a) ** 2
    assert evaluation.test_elbo(fn, trajs) == pytest.approx(-(1 + 4 + 0.25) / 3)
    assert evaluation.test_elbo(fn, trajs[::-1]) == evaluation.test_elbo(fn, trajs)
