import numpy as np
import pytest
from scipy import special

from dyadnet import DgpSpec, ModelSpec, build_covariates, fe_additive_beta, simulate, simulate_custom
from dyadnet.core import ParameterError
from dyadnet.simulate import SymmetryError, gaussian_nodes, redraw_outcomes


def _logistic_population(alpha=-1.5, beta=0.1, kappa=2.0, pi=0.2, grid=2000):
    """Linking probabilities for same-X and cross-X pairs by midpoint quadrature over V_i, V_j."""
    v = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    gap = np.abs(v[:, None] - v[None, :])
    p_same = special.expit(alpha + beta - kappa * gap).mean()
    p_cross = special.expit(alpha - kappa * np.abs(v[:, None] + pi - v[None, :])).mean()
    return p_same, p_cross


class TestGaussian:
    def test_noiseless_no_heterogeneity(self):
        ds, truth = simulate(DgpSpec(n=12, params={"sigma": 0.0, "xi_scale": 0.0}, seed=3))
        x = ds.X[:, 0]
        expected = -1.0 * np.subtract.outer(x, x) ** 2
        off = ~np.eye(12, dtype=bool)
        np.testing.assert_array_equal(ds.Y[off], expected[off])

    def test_deterministic(self):
        a, ta = simulate(DgpSpec(n=4, seed=11))
        b, tb = simulate(DgpSpec(n=4, seed=11))
        np.testing.assert_array_equal(a.Y, b.Y)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(ta.xi, tb.xi)

    def test_symmetric_complete(self):
        ds, truth = simulate(DgpSpec(n=20, rho=0.5, seed=1))
        np.testing.assert_array_equal(ds.Y, ds.Y.T)
        assert ds.complete
        np.testing.assert_array_equal(truth.gMatrix, truth.gMatrix.T)

    def test_missing_mask_symmetric(self):
        ds, _ = simulate(DgpSpec(n=60, missing_rate=0.3, seed=2))
        np.testing.assert_array_equal(ds.D, ds.D.T)
        rate = 1 - ds.D[np.triu_indices(60, 1)].mean()
        assert 0.25 < rate < 0.35

    def test_mask_does_not_change_outcomes(self):
        full, _ = simulate(DgpSpec(n=30, seed=5))
        part, _ = simulate(DgpSpec(n=30, seed=5, missing_rate=0.4))
        np.testing.assert_array_equal(full.Y[part.D], part.Y[part.D])

    @pytest.mark.parametrize("rho", [1.0, -1.5])
    def test_rho_out_of_range(self, rho):
        with pytest.raises(ParameterError):
            DgpSpec(rho=rho)

    def test_node_correlation(self):
        x, xi = gaussian_nodes(np.random.default_rng(0), 10_000, 0.6)
        assert np.corrcoef(x, xi)[0, 1] == pytest.approx(0.6, abs=0.03)

    def test_redraw_keeps_truth(self):
        ds, truth = simulate(DgpSpec(n=15, seed=4))
        Y2 = redraw_outcomes(truth, "gaussian-homophily", seed=9)
        assert not np.allclose(Y2, ds.Y)
        np.testing.assert_array_equal(Y2, Y2.T)

    def test_fe_unbiased_when_uncorrelated(self):
        est = []
        for s in range(200):
            ds, truth = simulate(DgpSpec(n=30, rho=0.0, seed=1000 + s))
            est.append(fe_additive_beta(ds, build_covariates(ds.X, truth.model)).beta[0])
        est = np.array(est)
        assert abs(est.mean() + 1.0) < 4 * est.std(ddof=1) / np.sqrt(est.size)


class TestLogistic:
    def test_no_heterogeneity_constant_probability(self):
        spec = DgpSpec("logistic", n=40, params={"kappa0": 0.0, "pi0": 0.0, "beta0": 0.0}, seed=0)
        ds, truth = simulate(spec)
        off = ~np.eye(40, dtype=bool)
        np.testing.assert_allclose(truth.Ystar[off], special.expit(-1.5))

    def test_binary_symmetric(self):
        ds, truth = simulate(DgpSpec("logistic", n=50, seed=3))
        assert set(np.unique(ds.Y)) <= {0.0, 1.0}
        np.testing.assert_array_equal(ds.Y, ds.Y.T)
        assert ds.discrete.tolist() == [True]

    def test_same_group_links_more(self):
        ds, truth = simulate(DgpSpec("logistic", n=300, params={"beta0": 2.0}, seed=8))
        iu = np.triu_indices(300, 1)
        same = (ds.X[:, 0][:, None] == ds.X[:, 0][None, :])[iu]
        y = ds.Y[iu]
        p = truth.Ystar[iu]
        assert y[same].mean() > y[~same].mean()
        # empirical rates track the linking probabilities computed directly
        for grp in (same, ~same):
            se = np.sqrt(p[grp].mean() * (1 - p[grp].mean()) / grp.sum())
            assert abs(y[grp].mean() - p[grp].mean()) < 4 * se

    def test_population_values(self):
        p_same, p_cross = _logistic_population()
        degree = 549 * 0.5 * (p_same + p_cross)
        pseudo_bias = special.logit(p_same) - special.logit(p_cross) - 0.1
        assert degree == pytest.approx(42.496, abs=1e-3)
        assert pseudo_bias == pytest.approx(0.01938, abs=1e-5)

    def test_mean_degree_matches_population(self):
        p_same, p_cross = _logistic_population()
        n = 300
        degs = [simulate(DgpSpec("logistic", n=n, seed=s))[0].Y.sum(axis=1).mean() for s in range(20)]
        expected = (n - 1) * 0.5 * (p_same + p_cross)
        assert abs(np.mean(degs) - expected) < 4 * np.std(degs, ddof=1) / np.sqrt(len(degs))


class TestCustom:
    def test_noiseless_linear(self):
        model = ModelSpec((("sqdiff", 0),))
        ds, truth = simulate_custom(8, model, 0.7, lambda a, b: 0.0, seed=1)
        W = build_covariates(ds.X, model)
        off = ~np.eye(8, dtype=bool)
        np.testing.assert_allclose(ds.Y[off], 0.7 * W[:, :, 0][off])

    def test_additive_double_difference(self):
        model = ModelSpec((("sqdiff", 0), ("absdiff", 0)))
        beta0 = np.array([0.5, -2.0])
        ds, truth = simulate_custom(9, model, beta0, lambda a, b: float(a[0] + b[0]), seed=2)
        W = build_covariates(ds.X, model)
        Y = ds.Y
        for i, j, k, l in [(0, 1, 2, 3), (4, 5, 6, 7), (8, 2, 5, 0)]:
            lhs = Y[i, k] - Y[j, k] - Y[i, l] + Y[j, l]
            rhs = (W[i, k] - W[j, k] - W[i, l] + W[j, l]) @ beta0
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_psi_form_zero_on_diagonal(self):
        ds, truth = simulate_custom(10, ModelSpec(), 1.0, lambda a, b: -float(np.abs(a - b).sum()),
                                    noise_fn=lambda r, m: r.standard_normal(m.shape), seed=3)
        np.testing.assert_array_equal(truth.gMatrix, truth.gMatrix.T)
        np.testing.assert_array_equal(np.diag(truth.gMatrix), 0.0)

    def test_asymmetric_coupling_rejected(self):
        with pytest.raises(SymmetryError):
            simulate_custom(6, ModelSpec(), 1.0, lambda a, b: float(a[0] - 2 * b[0]), seed=0)
