import numpy as np
import pytest

import oracles
from dyadnet import (
    DgpSpec,
    DyadicDataset,
    ModelSpec,
    build_covariates,
    simulate,
    simulate_custom,
)
from dyadnet.matching import (
    DegenerateDataError,
    ImputationConfig,
    ImputationGapError,
    OverlapError,
    build_neighborhoods,
    compatibility,
    d2_heteroskedastic,
    d2_homoskedastic,
    d_infty_matrix,
    denoise,
    denoise_row_average,
    denoise_unique_pairs,
    impute_sequential,
    neighborhood_size,
    pairwise_lsq,
    q2_matrix,
    sigma2_hat,
)


def _random(n, seed, discrete=False, mask_rate=0.0):
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(n, n))
    Y = Y + Y.T
    np.fill_diagonal(Y, 0.0)
    X = rng.integers(0, 2, n).astype(float) if discrete else rng.normal(size=n)
    D = ~np.eye(n, dtype=bool)
    if mask_rate:
        iu = np.triu_indices(n, 1)
        keep = rng.random(iu[0].size) >= mask_rate
        D[iu] = keep
        D.T[iu] = keep
    return DyadicDataset(Y=np.where(D, Y, 0.0), D=D, X=X[:, None], discrete=[discrete])


def _noiseless_twins(n=5, seed=0):
    """Noiseless gaussian-homophily data where agents 0 and 1 share xi but not X."""
    def xi_sampler(rng, n):
        xi = rng.normal(size=n)
        xi[1] = xi[0]
        return xi

    model = ModelSpec((("sqdiff", 0),))
    return simulate_custom(n, model, -1.0, lambda a, b: -float(np.sum((a - b) ** 2)), xi_sampler=xi_sampler,
                           seed=seed), model


class TestPairwiseLsq:
    def test_identical_rows(self):
        Y = np.ones((4, 4))
        W = np.zeros((4, 4, 1))
        val, beta = pairwise_lsq(0, 1, Y, W)
        assert val == 0.0
        np.testing.assert_array_equal(beta, [0.0])

    def test_noiseless_twins_recover_beta(self):
        (ds, truth), model = _noiseless_twins()
        W = build_covariates(ds.X, model)
        val, beta = pairwise_lsq(0, 1, ds.Y, W)
        assert val == pytest.approx(0.0, abs=1e-20)
        assert beta[0] == pytest.approx(-1.0, abs=1e-10)

    def test_matches_grid_minimum(self):
        ds = _random(8, 3)
        W = build_covariates(ds.X, ModelSpec())
        for i, j in [(0, 1), (2, 7), (5, 3)]:
            val, _ = pairwise_lsq(i, j, ds.Y, W)
            ks = oracles.overlap_ks(ds.D, i, j)
            dy = np.array([ds.Y[i, k] - ds.Y[j, k] for k in ks])
            dw = np.array([W[i, k] - W[j, k] for k in ks])
            assert val == pytest.approx(oracles.grid_min(dy, dw), abs=1e-8)

    def test_no_overlap(self):
        D = np.zeros((4, 4), dtype=bool)
        D[0, 1] = D[1, 0] = True
        with pytest.raises(OverlapError):
            pairwise_lsq(0, 1, np.zeros((4, 4)), np.zeros((4, 4, 1)), mask=D)


class TestQ2:
    def test_matches_per_pair_calls(self):
        ds = _random(6, 1)
        W = build_covariates(ds.X, ModelSpec())
        q = q2_matrix(ds, W, overlap_floor=1).q2
        for i in range(6):
            for j in range(6):
                if i != j:
                    assert q[i, j] == pytest.approx(pairwise_lsq(i, j, ds.Y, W)[0], abs=1e-12)

    def test_matches_oracle_with_missing(self):
        ds = _random(10, 4, mask_rate=0.2)
        W = build_covariates(ds.X, ModelSpec())
        np.testing.assert_allclose(q2_matrix(ds, W, overlap_floor=3).q2, oracles.q2(ds.Y, ds.D, W, 3), atol=1e-10)

    @pytest.mark.parametrize("gap", [1e-2, 1e-4, 1e-6])
    def test_nearly_equal_covariates(self, gap):
        ds = _random(10, 12)
        X = ds.X.copy()
        X[1, 0] = X[0, 0] + gap
        ds = DyadicDataset(Y=ds.Y * 20, D=ds.D, X=X, discrete=[False])
        W = build_covariates(ds.X, ModelSpec())
        res = q2_matrix(ds, W)
        np.testing.assert_allclose(res.q2, oracles.q2(ds.Y, ds.D, W), atol=1e-9)
        val, beta = pairwise_lsq(0, 1, ds.Y, W)
        assert res.beta[0, 1, 0] == pytest.approx(beta[0], rel=1e-8)

    def test_sigma_halving(self):
        q = np.array([[0, 2.0, 3.0], [2.0, 0, 5.0], [3.0, 5.0, 0]])
        assert sigma2_hat(q) == 1.0

    def test_noiseless_twins_zero(self):
        (ds, truth), model = _noiseless_twins(8, seed=2)
        d2 = d2_homoskedastic(ds, build_covariates(ds.X, model))
        assert d2.sigma2hat == pytest.approx(0.0, abs=1e-12)
        assert d2.d2[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_self_centering(self):
        ds, truth = simulate(DgpSpec(n=30, seed=3))
        d2 = d2_homoskedastic(ds, build_covariates(ds.X, truth.model))
        assert d2.pair_values().min() == 0.0

    def test_all_pairs_undefined(self):
        ds = _random(6, 0, mask_rate=0.7)
        with pytest.raises(DegenerateDataError):
            q2_matrix(ds, build_covariates(ds.X, ModelSpec()), overlap_floor=5)

    def test_sigma_estimate_increases_toward_truth(self):
        # the minimum over pairs is biased down at moderate n but improves with n
        meds = []
        for n in (100, 200, 400):
            vals = []
            for s in range(10):
                ds, truth = simulate(DgpSpec(n=n, seed=500 + s))
                vals.append(d2_homoskedastic(ds, build_covariates(ds.X, truth.model)).sigma2hat)
            meds.append(np.median(vals))
        assert meds[0] < meds[1] < meds[2] < 1.0
        assert meds[1] > 0.6


class TestDInfinity:
    def test_identical_rows_zero(self):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(7, 7))
        Y = Y + Y.T
        Y[1] = Y[0]
        Y[:, 1] = Y[:, 0]
        Y[0, 1] = Y[1, 0] = 0.3
        np.fill_diagonal(Y, 0.0)
        ds = DyadicDataset.from_arrays(Y, np.zeros(7), mask=~np.eye(7, dtype=bool))
        assert d_infty_matrix(ds)[0, 1] == pytest.approx(0.0, abs=1e-14)

    def test_seven_agent_oracle(self):
        ds = _random(7, 5)
        np.testing.assert_allclose(d_infty_matrix(ds), oracles.d_infty(ds.Y, ds.D), atol=1e-12)

    def test_missing_oracle(self):
        ds = _random(10, 6, mask_rate=0.15)
        np.testing.assert_allclose(d_infty_matrix(ds, overlap_floor=3), oracles.d_infty(ds.Y, ds.D, floor=3),
                                   atol=1e-12)

    def test_compatibility_restricts(self):
        ds = _random(9, 7, discrete=True)
        C = compatibility(ds)
        dinf = d_infty_matrix(ds, C)
        assert np.all(np.isinf(dinf[~C]))
        np.testing.assert_allclose(dinf, oracles.d_infty(ds.Y, ds.D, compatible=C), atol=1e-12)

    def test_tracks_latent_distance(self):
        from scipy import stats

        rhos = []
        for s in range(5):
            ds, truth = simulate(DgpSpec("logistic", n=200, seed=600 + s))
            dinf = d_infty_matrix(ds)
            xi = truth.xi[:, 0]
            iu = np.triu_indices(200, 1)
            gap = np.abs(xi[:, None] - xi[None, :])[iu]
            edges = np.quantile(gap, np.linspace(0, 1, 11))
            bucket = np.clip(np.searchsorted(edges, gap, side="right") - 1, 0, 9)
            means = [dinf[iu][bucket == b].mean() for b in range(10)]
            rhos.append(stats.spearmanr(np.arange(10), means)[0])
        assert np.mean(rhos) > 0.5


class TestNeighborhoods:
    def test_size_rule(self):
        assert neighborhood_size(100) == 21

    def test_self_only(self):
        ds = _random(8, 1)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=1)
        assert [list(v) for v in nb.neighbors] == [[i] for i in range(8)]

    def test_exact_rule_groups(self):
        ds = _random(10, 2, discrete=True)
        nb = build_neighborhoods(ds, d_infty_matrix(ds, compatibility(ds)), size=4)
        x = ds.X[:, 0]
        for i, v in enumerate(nb.neighbors):
            assert v[0] == i
            assert np.all(x[v] == x[i])

    def test_truncation_flagged(self):
        X = np.array([0, 0, 1, 1, 1, 1, 1, 1], dtype=float)
        ds = DyadicDataset(Y=_random(8, 3).Y, D=~np.eye(8, dtype=bool), X=X, discrete=[True])
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=3)
        assert nb.truncated[0] and nb.truncated[1] and not nb.truncated[2:].any()
        assert nb.sizes[0] == 2

    def test_ties_by_index(self):
        ds = _random(6, 0)
        dinf = np.zeros((6, 6))
        nb = build_neighborhoods(ds, dinf, size=3)
        assert list(nb.neighbors[4]) == [4, 0, 1]

    def test_matches_oracle(self):
        ds = _random(10, 8)
        dinf = d_infty_matrix(ds)
        nb = build_neighborhoods(ds, dinf, size=4)
        ref, _ = oracles.neighborhoods(dinf, 4)
        assert [list(v) for v in nb.neighbors] == ref


class TestDenoise:
    def test_self_neighborhood_returns_data(self):
        ds = _random(7, 2)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=1)
        den = denoise_row_average(ds, nb)
        np.testing.assert_array_equal(den.Ystar, ds.Y0)

    def test_constant_matrix(self):
        n, c = 9, 2.5
        Y = np.full((n, n), c)
        np.fill_diagonal(Y, 0.0)
        ds = DyadicDataset.from_arrays(Y, np.random.default_rng(0).normal(size=n), mask=~np.eye(n, dtype=bool))
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=3)
        raw = denoise_row_average(ds, nb, symmetric=False).Ystar
        for i in range(n):
            for j in range(n):
                assert raw[i, j] == pytest.approx(c * (3 - (j in nb.neighbors[i])) / 3)

    def test_row_average_oracle(self):
        ds = _random(9, 4)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=3)
        nbs, orders = oracles.neighborhoods(nb.dInf, 3)
        ref = oracles.symmetrize(oracles.row_average(ds.Y, ds.D, nbs, orders, 3))
        np.testing.assert_allclose(denoise_row_average(ds, nb).Ystar, ref, atol=1e-12)

    def test_disjoint_neighborhoods_double_average(self):
        ds = _random(8, 5)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=2)
        nb.neighbors[0] = np.array([0, 1])
        nb.neighbors[5] = np.array([5, 6])
        Yt = denoise_unique_pairs(ds, nb).Ystar
        expected = np.mean([ds.Y[a, b] for a in (0, 1) for b in (5, 6)])
        assert Yt[0, 5] == pytest.approx(expected, abs=1e-12)

    def test_shared_pair_neighborhood(self):
        ds = _random(6, 6)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=2)
        nb.neighbors[2] = np.array([2, 3])
        nb.neighbors[3] = np.array([3, 2])
        assert oracles.unique_pair_set(nb.neighbors[2], nb.neighbors[3], ds.D) == {frozenset((2, 3))}
        assert denoise_unique_pairs(ds, nb).Ystar[2, 3] == pytest.approx(ds.Y[2, 3], abs=1e-12)

    def test_unique_pairs_oracle(self):
        ds = _random(10, 9, mask_rate=0.1)
        nb = build_neighborhoods(ds, d_infty_matrix(ds, overlap_floor=3), size=4)
        ref = oracles.unique_pairs(ds.Y, ds.D, [list(v) for v in nb.neighbors])
        got = denoise_unique_pairs(ds, nb)
        np.testing.assert_allclose(np.where(got.mask, got.Ystar, np.nan), ref, atol=1e-12)


class TestImputation:
    def test_complete_is_row_average(self):
        ds = _random(8, 1)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=3)
        a = impute_sequential(ds, nb)
        np.testing.assert_array_equal(a.Ystar, denoise_row_average(ds, nb).Ystar)
        assert a.rounds == 1

    def test_single_gap_donor_average(self):
        ds = _random(9, 2)
        D = ds.D.copy()
        D[0, 5] = D[5, 0] = False
        ds = ds.replace_outcomes(ds.Y, D)
        nb = build_neighborhoods(ds, d_infty_matrix(ds, overlap_floor=3), size=4)
        den = impute_sequential(ds, nb)
        donors = [a for a in nb.order[0] if ds.D[a, 5]][:4]
        row = np.mean([ds.Y[a, 5] for a in donors])
        donors_t = [a for a in nb.order[5] if ds.D[a, 0]][:4]
        col = np.mean([ds.Y[a, 0] for a in donors_t])
        assert den.Ystar[0, 5] == pytest.approx(0.5 * (row + col), abs=1e-12)

    def test_matches_oracle(self):
        ds = _random(10, 3, mask_rate=0.35)
        nb = build_neighborhoods(ds, d_infty_matrix(ds, overlap_floor=2), size=4)
        den = impute_sequential(ds, nb)
        ref, hist = oracles.impute(ds.Y, ds.D, nb.order, 4)
        np.testing.assert_allclose(np.where(den.mask, den.Ystar, np.nan), ref, atol=1e-12)
        assert den.history == hist

    def test_two_stage_mask_unlocks_round_two(self):
        ds, nb = two_stage_instance()
        den = impute_sequential(ds, nb, ImputationConfig(min_donors=3))
        assert len(den.history) >= 2
        assert sum(den.history[:2]) > den.history[0]
        assert den.complete

    def test_hetero_requires_complete(self):
        ds = _random(8, 4)
        nb = build_neighborhoods(ds, d_infty_matrix(ds), size=2)
        den = denoise_unique_pairs(ds, nb)
        den.mask[0, 1] = False
        with pytest.raises(ImputationGapError):
            d2_heteroskedastic(den, build_covariates(ds.X, ModelSpec()))


def two_stage_instance(n=12, seed=0):
    """Mask where the last agent is observed with only two others.

    Column ``n-1`` has two donors, below the threshold of three, so round 1
    cannot impute any ``(i, n-1)`` entry. It does impute the transposed
    entries ``(n-1, a)`` from their rich columns; after symmetric
    augmentation column ``n-1`` has donors and round 2 fills it.
    """
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(n, n))
    Y = Y + Y.T
    np.fill_diagonal(Y, 0.0)
    D = ~np.eye(n, dtype=bool)
    D[n - 1, 2:] = D[2:, n - 1] = False
    ds = DyadicDataset(Y=np.where(D, Y, 0.0), D=D, X=np.zeros(n), discrete=[False])
    dinf = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    return ds, build_neighborhoods(ds, dinf, size=4)


class TestHetero:
    def test_oracle_injection_zero_for_twins(self):
        (ds, truth), model = _noiseless_twins(10, seed=4)
        W = build_covariates(ds.X, model)
        d2 = d2_heteroskedastic(truth.Ystar, W)
        assert d2.d2[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_grid_minimum(self):
        rng = np.random.default_rng(7)
        Ys = rng.normal(size=(8, 8))
        Ys = Ys + Ys.T
        W = build_covariates(rng.normal(size=8), ModelSpec())
        d2 = d2_heteroskedastic(Ys, W).d2
        for i, j in [(0, 1), (3, 6), (7, 2)]:
            dy = Ys[i] - Ys[j]
            dw = W[i] - W[j]
            assert d2[i, j] == pytest.approx(oracles.grid_min(dy, dw), abs=1e-8)

    @pytest.mark.parametrize("exclude_self", [False, True])
    def test_matches_lstsq_oracle(self, exclude_self):
        rng = np.random.default_rng(8)
        Ys = rng.normal(size=(9, 9))
        Ys = Ys + Ys.T
        W = build_covariates(rng.normal(size=(9, 2)), ModelSpec((("sqdiff", 0), ("absdiff", 1))))
        np.testing.assert_allclose(d2_heteroskedastic(Ys, W, exclude_self).d2,
                                   oracles.d2_hetero(Ys, W, exclude_self), atol=1e-10)


def test_denoise_dispatch():
    ds = _random(10, 1, mask_rate=0.2)
    den, nb = denoise(ds, size=4, overlap_floor=2)
    assert den.kind == "row-average" and hasattr(den, "history")
    den2, _ = denoise(ds, size=4, overlap_floor=2, kind="unique-pair-average")
    assert den2.kind == "unique-pair-average"
