"""R-hat, WAIC, summaries and posterior predictive checks."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spice_irt.diagnostics import (
    PointwiseAccumulator,
    PPCDraw,
    gelman_rubin,
    gelman_rubin_all,
    item_mean_score,
    item_pair_odds_ratios,
    person_score_quantiles,
    pointwise_loglik,
    posterior_predictive_check,
    simulate_responses,
    summarize,
    waic,
)
from spice_irt.errors import DiagnosticError
from spice_irt.model import BlockSpec
from spice_irt.regression import BlockDesign
from spice_irt.sampler import CalibrationData, Constraints, RegressionFix, SamplerConfig, run
from spice_irt.simgen import SimBlock, SimSpec, generate
from spice_irt.workflow import DrawUnpacker

ID_FIX = Constraints(regression={0: RegressionFix(B=[[0.0]], S=[1.0])})


def truth_draw(sim):
    psi = {b.block_id: b.family.to_natural(sim.latents[b.block_id]) for b in sim.data.blocks if b.side == "item"}
    return PPCDraw(sim.latents[0], psi)


class TestGelmanRubin:
    def test_identical_chains(self):
        x = np.array([[1, 2, 3, 4, 5], [1, 2, 3, 4, 5]], dtype=float)
        with pytest.warns(UserWarning, match="unreliable"):
            assert gelman_rubin(x) == pytest.approx(np.sqrt(0.8), abs=1e-12)

    def test_iid_chains(self):
        x = np.random.default_rng(0).normal(size=(2, 10_000))
        assert 0.99 <= gelman_rubin(x) <= 1.05

    def test_separated_chains(self):
        rng = np.random.default_rng(1)
        x = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
        assert gelman_rubin(x) > 3

    def test_zero_within_variance(self):
        with pytest.raises(DiagnosticError):
            gelman_rubin(np.ones((2, 20)))

    def test_single_chain(self):
        with pytest.raises(DiagnosticError):
            gelman_rubin(np.ones((1, 20)))

    def test_split_detects_drift(self):
        # each chain drifts, which the classic statistic cannot see
        x = np.tile(np.linspace(0, 10, 200), (2, 1)) + np.random.default_rng(2).normal(0, 0.1, (2, 200))
        assert gelman_rubin(x) < 1.01
        assert gelman_rubin(x, split=True) > 2

    def test_all_flags_bad_parameters(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 50, 3))
        x[:, :, 1] = 4.0
        out = gelman_rubin_all(x)
        assert np.isnan(out[1])
        assert np.isfinite(out[[0, 2]]).all()

    def test_all_warns_once(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            gelman_rubin_all(np.random.default_rng(4).normal(size=(2, 5, 4)))
        assert len(rec) == 1

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.01, 100), b=st.floats(-1e3, 1e3), sign=st.sampled_from([-1, 1]))
    def test_affine_invariance(self, seed, a, b, sign):
        x = np.random.default_rng(seed).normal(size=(3, 40)) + np.array([[0.0], [0.5], [1.0]])
        assert gelman_rubin(sign * a * x + b) == pytest.approx(gelman_rubin(x), rel=1e-8)


class TestWAIC:
    def test_identical_draws(self):
        ll = np.tile(np.log([0.2, 0.7, 0.9]), (5, 1))
        elpd, p, w = waic(ll)
        assert p == pytest.approx(0.0, abs=1e-15)
        assert elpd == pytest.approx(np.log([0.2, 0.7, 0.9]).sum(), abs=1e-12)
        assert w == -2 * elpd

    def test_two_draw_example(self):
        ll = np.log([[0.5], [0.25]])
        elpd, p, w = waic(ll)
        want_p = np.var(np.log([0.5, 0.25]), ddof=1)
        assert p == pytest.approx(want_p, abs=1e-14)
        assert elpd == pytest.approx(np.log(0.375) - want_p, abs=1e-14)
        assert w == -2 * elpd

    def test_constant_shift(self):
        ll = np.tile(np.log([0.2, 0.7]), (4, 1))
        assert waic(ll + 1.5)[0] == pytest.approx(waic(ll)[0] + 2 * 1.5, abs=1e-12)

    def test_single_draw(self):
        with pytest.raises(DiagnosticError):
            waic(np.zeros((1, 3)))

    def test_non_finite(self):
        with pytest.raises(DiagnosticError):
            waic(np.array([[0.0, -np.inf], [0.0, 0.0]]))

    def test_more_spread_lowers_elpd(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(200, 10))
        z = (z - z.mean(axis=0)) / z.std(axis=0)
        assert waic(-1.0 + 0.5 * z)[0] < waic(-1.0 + 0.1 * z)[0]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), S=st.integers(2, 60), N=st.integers(1, 20))
    def test_streaming_matches_batch(self, seed, S, N):
        ll = np.random.default_rng(seed).normal(-2, 3, size=(S, N))
        acc = PointwiseAccumulator(N)
        for row in ll:
            acc.update(row)
        np.testing.assert_allclose(acc.result(), waic(ll), rtol=1e-9, atol=1e-9)
        assert acc.result()[1] >= 0


class TestSummaries:
    def test_pooled_moments(self):
        sim = generate(SimSpec([SimBlock("person", 30, [[0.0]], [1.0]), SimBlock("item", 6, [[0.0, 0.0]], [0.5, 0.3], family="2PL")], 4, seed=1))
        cfg = SamplerConfig(M1=10, M2=10, M3=10, M4=60, n_chains=3, seed=1, store_trace=True)
        res = run(cfg, sim.data, constraints=ID_FIX)
        summ = summarize(res)
        pooled = np.concatenate([r.trace for r in res])
        np.testing.assert_allclose(summ.mean, pooled.mean(axis=0), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(summ.sd, pooled.std(axis=0), rtol=1e-6, atol=1e-12)
        assert np.all((summ.acceptance >= 0) & (summ.acceptance <= 1))
        assert summ.names == res[0].names

    def test_single_chain_rhat_nan(self):
        sim = generate(SimSpec([SimBlock("person", 10, [[0.0]], [1.0]), SimBlock("item", 3, [[0.0, 0.0]], [0.5, 0.3], family="2PL")], 2, seed=2))
        res = run(SamplerConfig(M1=5, M2=5, M3=5, M4=20, seed=1), sim.data, constraints=ID_FIX)
        assert np.all(np.isnan(summarize(res).rhat))


class TestStatistics:
    def setup_method(self):
        self.sim = generate(
            SimSpec([SimBlock("person", 200, [[0.0]], [1.0]), SimBlock("item", 10, [[0.0, 0.0]], [0.8, 0.3], family="2PL")], 10, seed=3)
        )

    def test_item_mean(self):
        resp = self.sim.data.responses
        got = item_mean_score(resp.value, self.sim.data)
        for j in range(resp.n_items):
            assert got[j] == pytest.approx(resp.value[resp.item == j].mean())

    def test_item_mean_subset(self):
        resp = self.sim.data.responses
        mask = np.arange(resp.n_persons) < 50
        got = item_mean_score(resp.value, self.sim.data, persons=mask)
        keep = resp.person < 50
        assert got[0] == pytest.approx(resp.value[keep & (resp.item == 0)].mean())

    def test_score_quantiles(self):
        q = person_score_quantiles(self.sim.data.responses.value, self.sim.data)
        assert np.all(np.diff(q) >= 0) and q.shape == (5,)

    def test_odds_ratio_hand(self):
        data = self.sim.data
        resp = data.responses
        v = resp.value
        out = item_pair_odds_ratios(v, data, [(0, 1)])
        a = {int(i): v[n] for n, (i, j) in enumerate(zip(resp.person, resp.item)) if j == 0}
        b = {int(i): v[n] for n, (i, j) in enumerate(zip(resp.person, resp.item)) if j == 1}
        tab = np.zeros((2, 2))
        for i in a:
            tab[int(a[i]), int(b[i])] += 1
        assert out[0] == pytest.approx(np.log(tab[1, 1] * tab[0, 0] / (tab[1, 0] * tab[0, 1])))

    def test_pointwise_loglik_at_truth(self):
        draw = truth_draw(self.sim)
        ll = pointwise_loglik(draw, self.sim.data)
        assert ll.shape == (self.sim.data.responses.n_obs,) and np.all(ll <= 0)

    def test_replicates_keep_linkage(self):
        y = simulate_responses(truth_draw(self.sim), self.sim.data, np.random.default_rng(0))
        assert set(np.unique(y)) <= {0.0, 1.0}


class TestPPP:
    def setup_method(self):
        self.sim = generate(
            SimSpec([SimBlock("person", 300, [[0.0]], [1.0]), SimBlock("item", 15, [[0.0, 0.0]], [0.8, 0.3], family="2PL")], 15, seed=4)
        )

    def test_constant_statistic(self):
        draws = [truth_draw(self.sim)] * 20
        ppp, skipped = posterior_predictive_check(draws, self.sim.data, lambda v, d: 3.0, np.random.default_rng(0))
        assert ppp == 1.0 and skipped == 0

    def test_monotone_transform_invariance(self):
        draws = [truth_draw(self.sim)] * 50
        p1, _ = posterior_predictive_check(draws, self.sim.data, item_mean_score, np.random.default_rng(1))
        p2, _ = posterior_predictive_check(
            draws, self.sim.data, lambda v, d: np.exp(3 * item_mean_score(v, d)) - 7, np.random.default_rng(1)
        )
        np.testing.assert_array_equal(p1, p2)

    def test_undefined_statistic_skipped(self):
        calls = iter(range(100))

        def flaky(v, d):
            return np.nan if next(calls) % 3 == 1 else float(np.mean(v))

        ppp, skipped = posterior_predictive_check([truth_draw(self.sim)] * 9, self.sim.data, flaky, np.random.default_rng(2))
        # the observed call is index 0; replicate calls 1..9 fail at 1, 4, 7
        assert skipped == 3 and 0 <= ppp <= 1

    def test_calibrated_at_truth(self):
        # replicates and the observed data come from the same distribution
        draws = [truth_draw(self.sim)] * 200
        ppp, _ = posterior_predictive_check(draws, self.sim.data, item_mean_score, np.random.default_rng(3))
        assert np.mean((ppp >= 0.05) & (ppp <= 0.95)) >= 0.8


def test_ppp_calibration_after_fit():
    sim = generate(
        SimSpec([SimBlock("person", 600, [[0.0]], [1.0]), SimBlock("item", 20, [[0.0, 0.2]], [0.7, 0.2], family="2PL")], 20, seed=5)
    )
    res = run(SamplerConfig(M1=50, M2=100, M3=100, M4=300, thin=3, seed=1), sim.data, constraints=ID_FIX)
    unpack = DrawUnpacker(sim.data, ID_FIX, res[0].names)
    ppp, _ = posterior_predictive_check([unpack(r) for r in res[0].draws], sim.data, item_mean_score, np.random.default_rng(0))
    assert np.mean((ppp >= 0.05) & (ppp <= 0.95)) >= 0.8


def test_ppp_detects_guessing_floor():
    # five hard items carry a guessing floor near 0.35; forty clean items anchor theta
    sim = generate(
        SimSpec(
            [
                SimBlock("person", 1200, [[0.0]], [1.0]),
                SimBlock("item", 5, [[-1.0, 0.9, -0.6]], [0.3, 0.1, 0.0], family="3PL"),
                SimBlock("item", 40, [[0.0, 0.9, -9.0]], [0.6, 0.1, 0.0], family="3PL"),
            ],
            45,
            seed=4,
        )
    )
    d = sim.data
    affected = d.blocks[1].unit_ids
    data = CalibrationData(
        d.responses,
        [d.blocks[0], BlockSpec(1, "item", 2, 1, np.arange(45), family="2PL")],
        {0: d.designs[0], 1: BlockDesign(np.ones((45, 1)))},
    )
    res = run(SamplerConfig(M1=50, M2=100, M3=100, M4=300, thin=3, seed=1), data, constraints=ID_FIX)
    unpack = DrawUnpacker(data, ID_FIX, res[0].names)
    low = sim.latents[0][:, 0] < -1

    def low_group_mean(v, dd):
        return item_mean_score(v, dd, persons=low)

    ppp, _ = posterior_predictive_check([unpack(r) for r in res[0].draws], data, low_group_mean, np.random.default_rng(0))
    assert np.sum(ppp[affected] < 0.05) >= 3
    clean = np.setdiff1d(np.arange(45), affected)
    assert np.mean(ppp[clean] < 0.05) == 0.0
