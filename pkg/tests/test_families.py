"""Item families: likelihood values, transforms and normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from spice_irt.errors import DomainError
from spice_irt.families import get_family, log_likelihood, to_natural, to_unconstrained

FAMILY_TAGS = ["1PL", "2PL", "3PL", "4PL", "GPCM(2)", "GPCM(3)", "GPCM(5)", "GAUSSIAN", "BOUNDED"]


def random_natural(family, rng, n):
    """Admissible natural parameters via the unconstrained scale."""
    return family.to_natural(rng.normal(0.0, 1.0, size=(n, family.param_count)))


class TestLogLikelihoodExamples:
    def test_2pl_midpoint(self):
        assert log_likelihood("TWO_PL", [0.0, 1.0], 0.0, 1) == pytest.approx(-0.693147, abs=1e-6)

    def test_3pl_midpoint(self):
        assert log_likelihood("THREE_PL", [0.0, 1.0, 0.2], 0.0, 1) == pytest.approx(np.log(0.6), abs=1e-12)

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_gpcm_uniform(self, k):
        assert log_likelihood("GPCM(3)", [1.0, 0.0, 0.0], 0.0, k) == pytest.approx(np.log(1 / 3), abs=1e-12)

    def test_4pl_upper_asymptote(self):
        u = 0.9
        p = np.exp(log_likelihood("FOUR_PL", [0.0, 1.0, 0.1, u], 50.0, 1))
        assert abs(p - u) < 1e-6

    def test_4pl_lower_asymptote(self):
        c = 0.15
        p = np.exp(log_likelihood("FOUR_PL", [0.0, 1.0, c, 0.9], -50.0, 1))
        assert abs(p - c) < 1e-6

    def test_1pl_is_2pl_with_unit_slope(self):
        for theta in (-2.0, 0.3, 1.7):
            assert log_likelihood("1PL", [0.4], theta, 0) == pytest.approx(
                log_likelihood("2PL", [0.4, 1.0], theta, 0), abs=1e-14
            )

    def test_2pl_matches_logistic(self):
        theta = np.linspace(-4, 4, 41)
        for d, a in [(0.3, 1.2), (-1.0, 0.5), (2.0, 2.5)]:
            p = np.exp([log_likelihood("2PL", [d, a], t, 1) for t in theta])
            np.testing.assert_allclose(p, expit(a * theta + d), rtol=1e-13)

    def test_2pl_extreme_logit_stays_finite(self):
        fam = get_family("2PL")
        out = fam.loglik(np.array([[0.0, 1.0]] * 2), np.array([800.0, -800.0]), np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, [-800.0, -800.0])

    def test_gaussian_density(self):
        from scipy.stats import norm

        val = log_likelihood("GAUSSIAN", [0.5, 2.0, 0.7], 0.25, 1.3)
        assert val == pytest.approx(norm.logpdf(1.3, 0.5 + 2.0 * 0.25, 0.7), abs=1e-12)

    def test_bounded_density(self):
        from scipy.integrate import quad

        fam = get_family("BOUNDED")
        psi = np.array([[0.2, 1.1, 3.0]])
        total, _ = quad(lambda y: np.exp(fam.loglik(psi, np.array([0.4]), np.array([y]))[0]), 0, 1)
        assert total == pytest.approx(1.0, abs=1e-8)


class TestValidation:
    def test_unknown_family(self):
        with pytest.raises(DomainError):
            get_family("5PL")

    def test_aliases(self):
        assert get_family("two_pl") == get_family("2PL")
        assert get_family("gpcm(4)").param_names == ("a", "b1", "b2", "b3")

    def test_category_out_of_range(self):
        with pytest.raises(DomainError):
            log_likelihood("GPCM(3)", [1.0, 0.0, 0.0], 0.0, 3)

    def test_binary_value(self):
        with pytest.raises(DomainError):
            log_likelihood("2PL", [0.0, 1.0], 0.0, 0.5)

    def test_bounded_value(self):
        with pytest.raises(DomainError):
            log_likelihood("BOUNDED", [0.0, 1.0, 1.0], 0.0, 1.0)

    def test_nonpositive_slope(self):
        with pytest.raises(DomainError):
            to_unconstrained("2PL", [0.0, -1.0])

    def test_guessing_outside_unit_interval(self):
        with pytest.raises(DomainError):
            to_unconstrained("3PL", [0.0, 1.0, 1.0])

    def test_4pl_needs_c_below_u(self):
        with pytest.raises(DomainError):
            to_unconstrained("4PL", [0.0, 1.0, 0.6, 0.5])

    def test_wrong_length(self):
        with pytest.raises(DomainError):
            to_natural("2PL", [0.0, 1.0, 2.0])


class TestTransforms:
    def test_2pl_example(self):
        np.testing.assert_allclose(to_unconstrained("TWO_PL", [0.3, 1.0]), [0.3, 0.0])

    def test_3pl_logit_component(self):
        assert to_unconstrained("THREE_PL", [0.1, 1.0, 0.5])[2] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("tag", FAMILY_TAGS)
    def test_round_trip_1000(self, tag):
        fam = get_family(tag)
        rng = np.random.default_rng(1)
        nat = random_natural(fam, rng, 1000)
        back = fam.to_natural(fam.to_unconstrained(nat))
        assert np.max(np.abs(back - nat)) < 1e-10

    @pytest.mark.parametrize("tag", FAMILY_TAGS)
    def test_param_counts(self, tag):
        expected = {"1PL": 1, "2PL": 2, "3PL": 3, "4PL": 4, "GAUSSIAN": 3, "BOUNDED": 3}
        fam = get_family(tag)
        want = expected.get(tag, getattr(fam, "m", None))
        assert fam.param_count == want


@pytest.mark.parametrize("tag", [t for t in FAMILY_TAGS if get_family(t).discrete])
class TestDiscreteProperties:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), theta=st.floats(-6, 6))
    def test_normalization(self, tag, seed, theta):
        fam = get_family(tag)
        psi = random_natural(fam, np.random.default_rng(seed), 1)
        m = fam.n_categories
        total = sum(np.exp(fam.loglik(psi, np.array([theta]), np.array([float(k)]))[0]) for k in range(m))
        assert abs(total - 1.0) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_top_category_monotone_in_theta(self, tag, seed):
        fam = get_family(tag)
        psi = random_natural(fam, np.random.default_rng(seed), 1)
        grid = np.linspace(-5, 5, 101)
        top = float(fam.n_categories - 1)
        ll = fam.loglik(np.repeat(psi, grid.size, axis=0), grid, np.full(grid.size, top))
        assert np.all(np.diff(ll) >= -1e-12)

    def test_simulated_frequencies(self, tag):
        fam = get_family(tag)
        rng = np.random.default_rng(5)
        psi = np.repeat(random_natural(fam, rng, 1), 40000, axis=0)
        theta = np.full(40000, 0.3)
        y = fam.simulate(psi, theta, rng)
        for k in range(fam.n_categories):
            p = np.exp(fam.loglik(psi[:1], theta[:1], np.array([float(k)]))[0])
            se = np.sqrt(p * (1 - p) / y.size)
            assert abs(np.mean(y == k) - p) < 4 * se + 1e-12


@settings(max_examples=50, deadline=None)
@given(tag=st.sampled_from(FAMILY_TAGS), seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(tag, seed):
    fam = get_family(tag)
    psi = np.random.default_rng(seed).normal(0.0, 2.0, size=(5, fam.param_count))
    np.testing.assert_allclose(fam.to_unconstrained(fam.to_natural(psi)), psi, atol=1e-9)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    for tag in FAMILY_TAGS:
        fam = get_family(tag)
        psi = random_natural(fam, rng, 20)
        theta = rng.normal(size=20)
        y = fam.simulate(psi, theta, rng)
        vec = fam.loglik(psi, theta, y)
        scal = [log_likelihood(fam, psi[n], theta[n], y[n]) for n in range(20)]
        np.testing.assert_allclose(vec, scal, rtol=1e-14)
