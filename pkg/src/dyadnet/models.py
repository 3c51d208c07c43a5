"""scikit-learn style wrappers around the functional estimators.

The estimators take node covariates ``X`` of shape ``(n, k)`` and an
outcome matrix ``Y`` of shape ``(n, n)``; ``fit(X, Y, mask=None)`` mirrors
``fit(X, y)`` with a square target. A ready :class:`DyadicDataset` may be
passed as ``X`` with ``Y`` omitted.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DimensionError, DyadicDataset, KernelSpec, LinkSpec, ModelSpec, build_covariates
from .estimators import (
    BandwidthRule,
    NeighborhoodConfig,
    denoise_outcomes,
    fe_additive_beta,
    g_hat,
    kernel_beta,
    logit_mle_beta,
    nn1_beta,
    single_index_beta,
)
from .matching import d2_heteroskedastic, d2_homoskedastic, denoise, pair_moments


def check_dyadic(X, Y=None, mask=None, discrete=None) -> DyadicDataset:
    """Validate inputs and return a :class:`DyadicDataset`.

    ``Y`` must be square with one row per row of ``X``; non-finite entries
    count as unobserved unless ``mask`` says otherwise.
    """
    if isinstance(X, DyadicDataset):
        if Y is not None:
            raise ValueError("pass either a DyadicDataset or (X, Y), not both")
        return X
    if Y is None:
        raise ValueError("an outcome matrix Y is required")
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
        raise DimensionError(f"Y must be a square matrix, got shape {Y.shape}")
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows but Y describes {Y.shape[0]} agents")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(Y)
    return DyadicDataset.from_arrays(np.where(np.isfinite(Y), Y, 0.0), X,
                                     mask=np.isfinite(Y) if mask is None else mask, discrete=discrete)


def _model_spec(covariates, ds, link="identity") -> ModelSpec:
    if covariates is None:
        return ModelSpec.default_for(ds.discrete, link)
    if isinstance(covariates, ModelSpec):
        return covariates
    if isinstance(covariates, str):
        return ModelSpec.parse(covariates, None, link)
    return ModelSpec(terms=tuple(covariates), link=LinkSpec(link))


def _distances(method, ds, W, ni_const):
    if method == "homo":
        return d2_homoskedastic(ds, W)
    if method != "hetero":
        raise ValueError(f"distance must be 'homo' or 'hetero', got {method!r}")
    den, _ = denoise_outcomes(ds, NeighborhoodConfig(c=ni_const))
    return d2_heteroskedastic(den, W)


class _DyadicRegressor(BaseEstimator):
    """Shared ``predict``/``score`` for estimators with a linear index."""

    _link = "identity"

    def _prepare(self, X, Y, mask):
        ds = check_dyadic(X, Y, mask, getattr(self, "discrete", None))
        self.model_ = _model_spec(getattr(self, "covariates", None), ds, self._link_kind())
        self.n_agents_ = ds.n
        return ds, build_covariates(ds.X, self.model_)

    def _link_kind(self):
        return getattr(self, "link", self._link)

    def _finish(self, report):
        self.report_ = report
        self.coef_ = np.asarray(report.beta, dtype=float)
        return self

    def predict(self, X):
        """Covariate index ``W_ij' coef_`` for node covariates ``X`` (no heterogeneity term)."""
        check_is_fitted(self, "coef_")
        if isinstance(X, DyadicDataset):
            X = X.X
        W = build_covariates(X, self.model_)
        return W @ self.coef_


class KernelPairwiseDifference(_DyadicRegressor):
    """Kernel-weighted pairwise-difference estimator.

    Parameters
    ----------
    distance : {"homo", "hetero"}
        Homoskedastic pseudo-distances from raw outcomes, or heteroskedastic
        ones computed on neighborhood-denoised outcomes.
    bandwidth : "rot" or float
        Rule of thumb or a fixed squared bandwidth.
    kernel : str
    covariates : str, sequence of (map, column) or ModelSpec, optional
    ni_const : float
        Neighborhood size constant, used by ``distance="hetero"``.
    """

    def __init__(self, distance="homo", bandwidth="rot", kernel="epanechnikov", covariates=None, ni_const=1.0,
                 discrete=None):
        self.distance = distance
        self.bandwidth = bandwidth
        self.kernel = kernel
        self.covariates = covariates
        self.ni_const = ni_const
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds, W = self._prepare(X, Y, mask)
        self.d2_ = _distances(self.distance, ds, W, self.ni_const)
        rep = kernel_beta(ds, W, self.d2_, KernelSpec(self.kernel), BandwidthRule.parse(self.bandwidth),
                          pair_moments(ds.Y0, ds.D, W))
        self.bandwidth2_ = rep.bandwidth2
        return self._finish(rep)


class NearestNeighborPairwiseDifference(_DyadicRegressor):
    """Pairwise differences over each agent and its single closest match."""

    def __init__(self, distance="homo", covariates=None, ni_const=1.0, discrete=None):
        self.distance = distance
        self.covariates = covariates
        self.ni_const = ni_const
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds, W = self._prepare(X, Y, mask)
        self.d2_ = _distances(self.distance, ds, W, self.ni_const)
        rep = nn1_beta(ds, W, self.d2_)
        self.matches_ = rep.extras["matches"]
        return self._finish(rep)


class AdditiveFixedEffects(_DyadicRegressor):
    """Least squares with additive agent effects ``a_i + a_j``."""

    def __init__(self, covariates=None, discrete=None):
        self.covariates = covariates
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds, W = self._prepare(X, Y, mask)
        rep = fe_additive_beta(ds, W)
        self.agent_effects_ = rep.extras["agent_effects"]
        return self._finish(rep)


class DyadicLogit(_DyadicRegressor):
    """Logistic MLE with an intercept, ignoring latent heterogeneity."""

    _link = "logistic"

    def __init__(self, covariates=None, max_iter=100, tol=1e-8, discrete=None):
        self.covariates = covariates
        self.max_iter = max_iter
        self.tol = tol
        self.discrete = discrete

    def _link_kind(self):
        return "logistic"

    def fit(self, X, Y=None, mask=None):
        ds, W = self._prepare(X, Y, mask)
        rep = logit_mle_beta(ds, W, max_iter=self.max_iter, tol=self.tol)
        self.intercept_ = rep.extras["intercept"]
        return self._finish(rep)

    def predict_proba(self, X):
        return LinkSpec("logistic").forward(self.predict(X) + self.intercept_)


class SingleIndexKernel(_DyadicRegressor):
    """Kernel estimator on ``F^{-1}`` of denoised outcomes for a known link ``F``."""

    def __init__(self, link="logistic", ni_const=1.0, bandwidth="rot", kernel="epanechnikov", clamp_eps=1e-3,
                 covariates=None, discrete=None):
        self.link = link
        self.ni_const = ni_const
        self.bandwidth = bandwidth
        self.kernel = kernel
        self.clamp_eps = clamp_eps
        self.covariates = covariates
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds, W = self._prepare(X, Y, mask)
        link = LinkSpec(self.link, self.clamp_eps)
        rep = single_index_beta(ds, W, link, NeighborhoodConfig(c=self.ni_const), KernelSpec(self.kernel),
                                BandwidthRule.parse(self.bandwidth))
        self.n_clamped_ = rep.extras["clamped"]
        self._finish(rep)
        Yt, _ = denoise(ds, c=self.ni_const, kind="unique-pair-average")
        self.g_hat_ = g_hat(Yt, W, self.coef_, link)
        return self


class NeighborhoodDenoiser(TransformerMixin, BaseEstimator):
    """Estimate the error-free outcome matrix by neighborhood averaging.

    ``fit_transform(X, Y)`` returns the denoised ``(n, n)`` matrix; entries
    that could not be imputed are NaN.
    """

    def __init__(self, ni_const=1.0, kind="row-average", x_rule="exact", discrete=None):
        self.ni_const = ni_const
        self.kind = kind
        self.x_rule = x_rule
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds = check_dyadic(X, Y, mask, self.discrete)
        self.denoised_, self.neighborhoods_ = denoise(ds, c=self.ni_const, x_rule=self.x_rule, kind=self.kind)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "denoised_")
        return np.where(self.denoised_.mask, self.denoised_.Ystar, np.nan)

    def fit_transform(self, X, Y=None, mask=None):
        return self.fit(X, Y, mask).transform(X)


class PseudoDistance(TransformerMixin, BaseEstimator):
    """Pairwise pseudo-distance matrix; ``inf`` where a pair cannot be compared."""

    def __init__(self, method="homo", covariates=None, ni_const=1.0, discrete=None):
        self.method = method
        self.covariates = covariates
        self.ni_const = ni_const
        self.discrete = discrete

    def fit(self, X, Y=None, mask=None):
        ds = check_dyadic(X, Y, mask, self.discrete)
        self.model_ = _model_spec(self.covariates, ds)
        self.d2_ = _distances(self.method, ds, build_covariates(ds.X, self.model_), self.ni_const)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "d2_")
        return self.d2_.d2.copy()

    def fit_transform(self, X, Y=None, mask=None):
        return self.fit(X, Y, mask).transform(X)
