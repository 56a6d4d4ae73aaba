"""Synthetic data generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from spice_irt.errors import ValidationError
from spice_irt.simgen import SimBlock, SimSpec, generate


def spec(n_persons=100, n_items=20, t=5, seed=0, person_S=(1.0,), item_S=(0.5, 0.3), **kw):
    return SimSpec(
        [
            SimBlock("person", n_persons, [[0.0] * len(person_S)], person_S),
            SimBlock("item", n_items, [[0.0, 0.2]], item_S, family="2PL"),
        ],
        responses_per_person=t,
        seed=seed,
        **kw,
    )


class TestCounting:
    def test_exact_response_count(self):
        sim = generate(spec(t=5))
        assert sim.data.responses.n_obs == 500

    def test_each_person_distinct_items(self):
        r = generate(spec(t=7)).data.responses
        for i in range(100):
            items = r.item[r.person == i]
            assert items.size == 7 and np.unique(items).size == 7

    def test_infeasible_sparsity(self):
        with pytest.raises(ValidationError):
            generate(spec(n_items=4, t=5))

    def test_zipf_skews_exposure(self):
        r = generate(spec(n_persons=400, n_items=40, t=5, zipf_exponent=1.2)).data.responses
        counts = np.sort(np.bincount(r.item, minlength=40))
        assert counts[-1] > 5 * max(counts[0], 1)


class TestLatents:
    def test_zero_noise(self):
        sb_items = SimBlock("item", 30, [[0.1, 0.2], [0.5, -0.3]], [0.0, 0.0], family="2PL", n_features=1)
        sim = generate(SimSpec([SimBlock("person", 50, [[0.0], [1.0]], [0.0], n_features=1), sb_items], 3, seed=1))
        for bid in (0, 1):
            X = sim.data.designs[bid].X0
            B = [[0.0], [1.0]] if bid == 0 else [[0.1, 0.2], [0.5, -0.3]]
            np.testing.assert_array_equal(sim.latents[bid], X @ np.asarray(B))

    def test_moments_converge(self):
        R = np.array([[1.0, -0.4], [-0.4, 1.0]])
        S = np.array([0.7, 1.3])
        B = np.array([[0.5, -1.0]])
        n = 40_000
        sim = generate(SimSpec([SimBlock("person", n, B, S, R=R), SimBlock("item", 2, [[0.0, 0.0]], [0.1, 0.1], family="2PL")], 1, seed=2))
        U = sim.latents[0]
        Gamma = np.diag(S) @ R @ np.diag(S)
        z = (U.mean(axis=0) - B[0]) / np.sqrt(np.diag(Gamma) / n)
        assert np.all(np.abs(z) < 4)
        np.testing.assert_allclose(np.cov(U, rowvar=False), Gamma, atol=5 * Gamma.max() / np.sqrt(n))

    def test_bad_R(self):
        with pytest.raises(ValidationError):
            SimBlock("person", 5, [[0.0, 0.0]], [1.0, 1.0], R=[[1.0, 1.2], [1.2, 1.0]])

    def test_item_dim_must_match_family(self):
        with pytest.raises(ValidationError):
            SimBlock("item", 5, [[0.0]], [1.0], family="2PL")

    def test_truth_names(self):
        sim = generate(spec(n_persons=3, n_items=4, t=2))
        assert sim.truth["person2.dim0"] == sim.latents[0][2, 0]
        assert sim.truth["item3.a"] == pytest.approx(np.exp(sim.latents[1][3, 1]))
        assert sim.truth["block1.B[0,1]"] == 0.2


class TestResponses:
    def test_proportion_correct_matches_model(self):
        sim = generate(spec(n_persons=5000, n_items=10, t=10, seed=3))
        r = sim.data.responses
        theta = sim.latents[0][:, 0]
        d, loga = sim.latents[1][:, 0], sim.latents[1][:, 1]
        for j in range(10):
            rows = r.item == j
            p = expit(np.exp(loga[j]) * theta[r.person[rows]] + d[j])
            se = np.sqrt(np.sum(p * (1 - p))) / rows.sum()
            assert abs(r.value[rows].mean() - p.mean()) < 3 * se

    def test_reproducible(self):
        a, b = generate(spec(seed=9)), generate(spec(seed=9))
        np.testing.assert_array_equal(a.data.responses.value, b.data.responses.value)
        np.testing.assert_array_equal(a.data.responses.item, b.data.responses.item)
        assert a.truth == b.truth

    def test_seed_changes_data(self):
        assert not np.array_equal(generate(spec(seed=1)).data.responses.item, generate(spec(seed=2)).data.responses.item)

    def test_weights_normalized(self):
        w = generate(spec(weight_sd=0.5)).data.responses.person_weight
        assert w.sum() == pytest.approx(100)

    def test_mixed_families(self):
        sim = generate(
            SimSpec(
                [
                    SimBlock("person", 50, [[0.0]], [1.0]),
                    SimBlock("item", 5, [[0.0, 0.0]], [0.5, 0.2], family="2PL"),
                    SimBlock("item", 5, [[0.0, 0.0, 0.0]], [0.5, 0.2, 0.3], family="GPCM(3)"),
                ],
                6,
                seed=4,
            )
        )
        r = sim.data.responses
        gpcm = np.isin(r.item, sim.data.blocks[2].unit_ids)
        assert set(np.unique(r.value[gpcm])) <= {0.0, 1.0, 2.0}
        assert set(np.unique(r.value[~gpcm])) <= {0.0, 1.0}


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(1, 12), n=st.integers(1, 30))
def test_counts_property(seed, t, n):
    sim = generate(spec(n_persons=n, n_items=12, t=t, seed=seed))
    assert sim.data.responses.n_obs == n * t
    # persons, item parameters, then B and S per block plus one correlation
    assert len(sim.truth) == n + 12 * 2 + 2 + 5
