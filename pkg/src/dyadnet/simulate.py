"""Synthetic dyadic datasets with retained ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import special

from .core import DyadicDataset, LinkSpec, ModelSpec, ParameterError, build_covariates, DyadnetError


class SymmetryError(DyadnetError, ValueError):
    pass


GAUSSIAN_DEFAULTS = {"beta0": -1.0, "sigma": 1.0, "xi_scale": 1.0}
# (alpha0, beta0, kappa0, pi0) calibrated to a college friendship network
LOGISTIC_DEFAULTS = {"alpha0": -1.5, "beta0": 0.1, "kappa0": 2.0, "pi0": 0.2}


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "gaussian-homophily"
    n: int = 100
    rho: float = 0.0
    params: dict = field(default_factory=dict)
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        kind = {"gauss": "gaussian-homophily", "gaussian": "gaussian-homophily",
                "logit": "logistic-homophily", "logistic": "logistic-homophily"}.get(self.kind, self.kind)
        if kind not in ("gaussian-homophily", "logistic-homophily", "custom"):
            raise ParameterError(f"unknown DGP kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not -1.0 < self.rho < 1.0:
            raise ParameterError(f"rho must lie in (-1, 1), got {self.rho}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ParameterError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.n < 2:
            raise ParameterError("at least two agents are required")

    def param(self, key):
        defaults = GAUSSIAN_DEFAULTS if self.kind == "gaussian-homophily" else LOGISTIC_DEFAULTS
        return float(self.params.get(key, defaults[key]))

    def with_seed(self, seed: int) -> "DgpSpec":
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class SimTruth:
    xi: np.ndarray
    Ystar: np.ndarray
    beta0: np.ndarray
    gMatrix: np.ndarray
    model: ModelSpec

    def to_dict(self) -> dict:
        return {
            "xi": self.xi.tolist(),
            "beta0": self.beta0.tolist(),
            "Ystar": self.Ystar.tolist(),
            "g": self.gMatrix.tolist(),
            "covariates": [list(t) for t in self.model.terms],
            "link": self.model.link.kind,
        }


def _streams(seed: int):
    """Independent generators for agents, idiosyncratic errors and the mask."""
    children = np.random.SeedSequence(int(seed)).spawn(3)
    return [np.random.default_rng(c) for c in children]


def _symmetric_noise(rng, n, draw):
    iu = np.triu_indices(n, k=1)
    E = np.zeros((n, n))
    E[iu] = draw(rng, iu[0].size)
    return E + E.T


def mcar_mask(rng, n, rate) -> np.ndarray:
    """Symmetric observation mask with each dyad missing independently w.p. ``rate``."""
    iu = np.triu_indices(n, k=1)
    D = np.zeros((n, n), dtype=bool)
    D[iu] = rng.random(iu[0].size) >= rate
    return D | D.T


def gaussian_nodes(rng, n, rho):
    """Draw ``(X_i, xi_i)`` bivariate standard normal with correlation ``rho``."""
    z = rng.standard_normal((n, 2))
    x = z[:, 0]
    xi = rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]
    return x, xi


def simulate_gaussian_homophily(spec: DgpSpec, mask_fn: Callable | None = None):
    """``Y_ij = beta0 (X_i - X_j)^2 - (xi_i - xi_j)^2 + sigma eps_ij`` with normal errors.

    ``params`` accepts ``beta0`` (default -1), ``sigma`` (1) and ``xi_scale``
    (1; 0 switches the latent heterogeneity off). ``mask_fn(rng, x, xi)``
    overrides the default MCAR mask.
    """
    if spec.kind != "gaussian-homophily":
        raise ParameterError(f"expected gaussian-homophily spec, got {spec.kind}")
    node_rng, err_rng, mask_rng = _streams(spec.seed)
    n = spec.n
    x, xi = gaussian_nodes(node_rng, n, spec.rho)
    xi = spec.param("xi_scale") * xi
    beta0 = np.array([spec.param("beta0")])
    model = ModelSpec(terms=(("sqdiff", 0),))
    W = build_covariates(x[:, None], model)
    g = -np.subtract.outer(xi, xi) ** 2
    Ystar = W @ beta0 + g
    E = _symmetric_noise(err_rng, n, lambda r, m: r.standard_normal(m))
    Y = Ystar + spec.param("sigma") * E
    np.fill_diagonal(Y, 0.0)
    D = _mask(mask_rng, spec, mask_fn, x, xi)
    ds = DyadicDataset(Y=np.where(D, Y, 0.0), D=D, X=x[:, None], discrete=[False])
    return ds, SimTruth(xi=xi[:, None], Ystar=Ystar, beta0=beta0, gMatrix=g, model=model)


def simulate_logistic_homophily(spec: DgpSpec, mask_fn: Callable | None = None):
    """Binary links ``Y_ij = 1{beta0 1{X_i = X_j} + alpha0 - kappa0 |xi_i - xi_j| >= U_ij}``.

    ``X ~ Bernoulli(0.5)``, ``xi = pi0 X + V`` with ``V ~ U[-1, 1]`` and
    logistic ``U``. The truth holds linking probabilities.
    """
    if spec.kind != "logistic-homophily":
        raise ParameterError(f"expected logistic-homophily spec, got {spec.kind}")
    node_rng, err_rng, mask_rng = _streams(spec.seed)
    n = spec.n
    alpha0, beta0, kappa0, pi0 = (spec.param(k) for k in ("alpha0", "beta0", "kappa0", "pi0"))
    x = (node_rng.random(n) < 0.5).astype(float)
    v = node_rng.uniform(-1.0, 1.0, n)
    xi = pi0 * x + v
    model = ModelSpec(terms=(("eq", 0),), link=LinkSpec("logistic"))
    W = build_covariates(x[:, None], model)
    g = alpha0 - kappa0 * np.abs(np.subtract.outer(xi, xi))
    index = W[:, :, 0] * beta0 + g
    Ystar = special.expit(index)
    U = _symmetric_noise(err_rng, n, lambda r, m: r.logistic(size=m))
    Y = (index - U >= 0).astype(float)
    np.fill_diagonal(Y, 0.0)
    D = _mask(mask_rng, spec, mask_fn, x, xi)
    ds = DyadicDataset(Y=np.where(D, Y, 0.0), D=D, X=x[:, None], discrete=[True])
    return ds, SimTruth(xi=xi[:, None], Ystar=Ystar, beta0=np.array([beta0]), gMatrix=g, model=model)


def _mask(rng, spec, mask_fn, x, xi):
    n = spec.n
    if mask_fn is not None:
        D = np.asarray(mask_fn(rng, x, xi), dtype=bool)
        D = D & D.T
    elif spec.missing_rate > 0:
        D = mcar_mask(rng, n, spec.missing_rate)
    else:
        D = np.ones((n, n), dtype=bool)
    np.fill_diagonal(D, False)
    return D


def simulate(spec: DgpSpec, mask_fn: Callable | None = None):
    if spec.kind == "gaussian-homophily":
        return simulate_gaussian_homophily(spec, mask_fn)
    if spec.kind == "logistic-homophily":
        return simulate_logistic_homophily(spec, mask_fn)
    raise ParameterError("custom DGPs go through simulate_custom")


def redraw_outcomes(truth: SimTruth, kind: str, seed: int, sigma: float = 1.0) -> np.ndarray:
    """Fresh outcome matrix from the same agents (errors redrawn only)."""
    rng = np.random.default_rng(seed)
    n = truth.Ystar.shape[0]
    if kind == "gaussian-homophily":
        Y = truth.Ystar + sigma * _symmetric_noise(rng, n, lambda r, m: r.standard_normal(m))
    else:
        U = _symmetric_noise(rng, n, lambda r, m: r.logistic(size=m))
        index = special.logit(truth.Ystar)
        Y = (index - U >= 0).astype(float)
    np.fill_diagonal(Y, 0.0)
    return Y


def simulate_custom(n, model: ModelSpec, beta0, g_fn, noise_fn=None, xi_sampler=None, x_sampler=None,
                    seed: int = 0, discrete=None, mask_fn=None, symmetry_checks: int = 5):
    """Simulate ``Y_ij = F(W_ij' beta0 + g(xi_i, xi_j)) + eps_ij`` from user callbacks.

    Parameters
    ----------
    g_fn : callable ``(xi_a, xi_b) -> float``
        Coupling function; checked for symmetry on a few random pairs.
    noise_fn : callable ``(rng, Ystar_upper) -> eps_upper``, optional
        Idiosyncratic errors for the upper triangle; zero when omitted.
    xi_sampler, x_sampler : callable ``(rng, n) -> array``
        Latent and observed agent characteristics (standard normal by default).
    """
    node_rng, err_rng, mask_rng = _streams(seed)
    xi = np.asarray(xi_sampler(node_rng, n) if xi_sampler else node_rng.standard_normal(n), dtype=float)
    xi = xi.reshape(n, -1)
    X = np.asarray(x_sampler(node_rng, n) if x_sampler else node_rng.standard_normal(n))
    if X.ndim == 1:
        X = X[:, None]
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if beta0.shape[0] != model.p:
        raise ParameterError(f"beta0 has length {beta0.shape[0]}, model has p={model.p}")

    check_rng = np.random.default_rng(0)
    for _ in range(symmetry_checks if n > 1 else 0):
        a, b = check_rng.choice(n, size=2, replace=False)
        if not np.isclose(g_fn(xi[a], xi[b]), g_fn(xi[b], xi[a]), rtol=1e-12, atol=1e-12):
            raise SymmetryError(f"coupling function is not symmetric on agents ({a}, {b})")

    g = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            g[i, j] = g[j, i] = g_fn(xi[i], xi[j])
    W = build_covariates(X, model)
    index = W @ beta0 + g
    Ystar = model.link.forward(index)
    Y = Ystar.copy()
    if noise_fn is not None:
        iu = np.triu_indices(n, k=1)
        eps = np.zeros((n, n))
        eps[iu] = noise_fn(err_rng, Ystar[iu])
        Y = Y + eps + eps.T
    np.fill_diagonal(Y, 0.0)
    spec = DgpSpec(kind="custom", n=n)
    D = _mask(mask_rng, spec, mask_fn, X, xi)
    if discrete is None:
        discrete = [X.dtype.kind not in "fc"] * X.shape[1]
    ds = DyadicDataset(Y=np.where(D, Y, 0.0), D=D, X=X, discrete=discrete)
    return ds, SimTruth(xi=xi, Ystar=Ystar, beta0=beta0, gMatrix=g, model=model)
