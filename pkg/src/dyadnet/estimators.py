"""Homophily parameter estimators, baselines and fixed-effect recovery."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, special
from scipy.sparse import csgraph

from .core import DyadicDataset, DyadnetError, KernelSpec, LinkSpec, ParameterError
from .matching import (
    DEFAULT_OVERLAP_FLOOR,
    DenoisedMatrix,
    ImputationConfig,
    ImputationGapError,
    PairMoments,
    PseudoDistanceMatrix,
    build_neighborhoods,
    compatibility,
    d2_heteroskedastic,
    d_infty_matrix,
    denoise_row_average,
    impute_sequential,
    pair_moments,
)

log = logging.getLogger(__name__)

GRAM_TOL = 1e-10
MAX_BANDWIDTH_DOUBLINGS = 10


class SingularDesignError(DyadnetError, np.linalg.LinAlgError):
    pass


class BandwidthError(DyadnetError, ValueError):
    pass


class IdentificationError(DyadnetError, ValueError):
    pass


class SeparationError(DyadnetError, ValueError):
    pass


class LinkDomainError(DyadnetError, ValueError):
    pass


class GroupError(DyadnetError, ValueError):
    pass


@dataclass
class EstimateReport:
    beta: np.ndarray
    estimator: str
    bandwidth2: float | None = None
    active_pairs: int = 0
    gram_min_eigen: float | None = None
    g_hat: np.ndarray | None = None
    partial_effects: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self, include_matrices: bool = True) -> dict:
        out = {
            "estimator": self.estimator,
            "beta": np.asarray(self.beta).tolist(),
            "bandwidth2": self.bandwidth2,
            "active_pairs": int(self.active_pairs),
            "gram_min_eigen": self.gram_min_eigen,
        }
        if include_matrices and self.g_hat is not None:
            out["g_hat"] = np.where(np.isfinite(self.g_hat), self.g_hat, np.nan).tolist()
        if self.partial_effects is not None:
            out["partial_effects"] = {"average": np.asarray(self.partial_effects["average"]).tolist()}
        out.update({k: _jsonable(v) for k, v in self.extras.items() if not k.startswith("_")})
        return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True)
class BandwidthRule:
    kind: str = "rule-of-thumb"
    value: float | None = None

    def __post_init__(self):
        kind = {"rot": "rule-of-thumb"}.get(self.kind, self.kind)
        if kind not in ("rule-of-thumb", "fixed"):
            raise ParameterError(f"unknown bandwidth rule {self.kind!r}")
        if (kind == "fixed") != (self.value is not None):
            raise ParameterError("a value is required exactly when the bandwidth is fixed")
        if self.value is not None and not self.value > 0:
            raise ParameterError("fixed bandwidth must be positive")
        object.__setattr__(self, "kind", kind)

    @classmethod
    def parse(cls, text) -> "BandwidthRule":
        if text in (None, "rot", "rule-of-thumb"):
            return cls()
        return cls("fixed", float(text))


def bandwidth_rot(d2) -> float:
    """Squared bandwidth ``0.9 min(sd, IQR/1.349) m^(-1/5)`` over the ``m`` defined pairs.

    Falls back to half the largest distance when both dispersion measures
    vanish.
    """
    v = d2.pair_values() if isinstance(d2, PseudoDistanceMatrix) else np.asarray(d2, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise BandwidthError("the rule of thumb needs at least two defined pseudo-distances")
    sd = float(np.std(v, ddof=1))
    q75, q25 = np.percentile(v, [75, 25])
    iqr = float(q75 - q25) / 1.349
    spread = min(sd, iqr) if iqr > 0 else sd
    if not spread > 0:
        top = float(v.max())
        h2 = top / 2.0 if top > 0 else 1.0
        log.warning("pseudo-distances have no dispersion; falling back to h^2 = %g", h2)
        return h2
    return 0.9 * spread * v.size ** (-0.2)


def _is_singular(A) -> bool:
    w = np.linalg.eigvalsh(0.5 * (A + A.T))
    return not w[0] > GRAM_TOL * max(abs(w[-1]), np.finfo(float).tiny)


def _solve_spd(A, b, what):
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    scale = max(abs(w[-1]), np.finfo(float).tiny)
    if w[0] <= GRAM_TOL * scale:
        raise SingularDesignError(
            f"{what}: weighted Gram matrix is singular (min eigenvalue {w[0]:.3g}, max {w[-1]:.3g}); "
            "the matched pairs carry no variation in some covariate direction")
    return np.linalg.solve(A, b), float(w[0])


def _upper(n):
    return np.triu_indices(n, k=1)


def kernel_beta(ds: DyadicDataset, W, d2: PseudoDistanceMatrix, kernel: KernelSpec | None = None,
                bw: BandwidthRule | None = None, moments: PairMoments | None = None) -> EstimateReport:
    """Kernel-weighted pooled pairwise-difference regression.

    Pair ``(i, j)`` enters with weight ``K(d2_ij / h^2)`` and contributes its
    regression of ``Y_ik - Y_jk`` on ``W_ik - W_jk`` over the common observed
    partners ``k``. When the rule of thumb leaves no active pair, or the
    active pairs leave the weighted Gram matrix singular, the squared
    bandwidth is doubled, up to ten times.
    """
    kernel = kernel or KernelSpec()
    bw = bw or BandwidthRule()
    n = ds.n
    if moments is None:
        moments = pair_moments(ds.Y0, ds.D, W)
    iu = _upper(n)
    dv = d2.d2[iu]
    G = moments.sww[iu]
    b = moments.swy[iu]
    h2 = bandwidth_rot(d2) if bw.kind == "rule-of-thumb" else float(bw.value)
    finite = np.isfinite(dv)
    doublings = 0
    while True:
        with np.errstate(invalid="ignore"):
            wts = kernel(dv / h2)
        wts[~finite] = 0.0
        active = wts > 0
        wa = wts[active]
        A = np.einsum("m,mab->ab", wa, G[active])
        if active.any() and not _is_singular(A):
            break
        if bw.kind == "fixed" or doublings == MAX_BANDWIDTH_DOUBLINGS:
            if not active.any():
                raise BandwidthError(f"no pair has positive kernel weight at h^2 = {h2:.4g}")
            break
        h2 *= 2.0
        doublings += 1
        log.info("active pairs carry no covariate variation; doubling h^2 to %g", h2)
    c = np.einsum("m,ma->a", wa, b[active])
    beta, lam = _solve_spd(A, c, "kernel estimator")
    return EstimateReport(beta=beta, estimator="kernel", bandwidth2=h2, active_pairs=int(active.sum()),
                          gram_min_eigen=lam, extras={"weight_sum": float(wa.sum()),
                                                      "weight_max": float(wa.max()),
                                                      "bandwidth_doublings": doublings})


def nn1_beta(ds: DyadicDataset, W, d2: PseudoDistanceMatrix, moments: PairMoments | None = None) -> EstimateReport:
    """Pairwise-difference OLS pooling each agent with its single nearest match."""
    n = ds.n
    if moments is None:
        moments = pair_moments(ds.Y0, ds.D, W)
    dd = d2.d2.copy()
    np.fill_diagonal(dd, np.inf)
    match = np.argmin(dd, axis=1)
    has = np.isfinite(dd[np.arange(n), match])
    if not has.all():
        raise IdentificationError(f"agents without a defined partner: {np.flatnonzero(~has)[:20].tolist()}")
    rows = np.arange(n)
    A = moments.sww[rows, match].sum(axis=0)
    c = moments.swy[rows, match].sum(axis=0)
    beta, lam = _solve_spd(A, c, "nearest-neighbor estimator")
    return EstimateReport(beta=beta, estimator="nn1", active_pairs=n, gram_min_eigen=lam,
                          extras={"matches": np.stack([rows, match], axis=1)})


def fe_additive_beta(ds: DyadicDataset, W) -> EstimateReport:
    """OLS of ``Y_ij`` on ``W_ij`` with additive agent effects ``a_i + a_j``.

    Solved through the normal equations with the agent block partialled out.

    Raises
    ------
    IdentificationError
        When the observation graph is disconnected or bipartite.
    """
    n = ds.n
    W = np.asarray(W, dtype=float)
    Dm = ds.D
    ncomp, _ = csgraph.connected_components(sparse.csr_matrix(Dm), directed=False)
    if ncomp > 1:
        raise IdentificationError(f"observation graph has {ncomp} connected components")
    iu = _upper(n)
    obs = Dm[iu]
    Wp = W[iu][obs]
    y = ds.Y[iu][obs]
    Df = Dm.astype(float)
    AtA = np.diag(Df.sum(axis=1)) + Df
    Aty = (Df * ds.Y0).sum(axis=1)
    AtW = np.einsum("ij,ija->ia", Df, W)
    try:
        cho = np.linalg.cholesky(AtA)
    except np.linalg.LinAlgError:
        raise IdentificationError("agent effects are not identified (bipartite observation graph)") from None
    if np.min(np.diag(cho)) ** 2 <= GRAM_TOL * np.max(np.diag(AtA)):
        raise IdentificationError("agent effects are not identified (bipartite observation graph)")
    sol_w = np.linalg.solve(AtA, AtW)
    sol_y = np.linalg.solve(AtA, Aty)
    A = Wp.T @ Wp - AtW.T @ sol_w
    c = Wp.T @ y - AtW.T @ sol_y
    beta, lam = _solve_spd(A, c, "additive fixed effects")
    effects = sol_y - sol_w @ beta
    return EstimateReport(beta=beta, estimator="fe-additive", active_pairs=int(obs.sum()),
                          gram_min_eigen=lam, extras={"agent_effects": effects})


def logit_mle_beta(ds: DyadicDataset, W, max_iter: int = 100, tol: float = 1e-8,
                   separation_bound: float = 30.0) -> EstimateReport:
    """Logit MLE of binary ``Y_ij`` on ``(1, W_ij)`` by Newton-Raphson (IRLS).

    Convergence is declared when the gradient of the average log-likelihood
    has norm at most ``tol``.
    """
    n = ds.n
    iu = _upper(n)
    obs = ds.D[iu]
    y = ds.Y[iu][obs]
    if not np.all((y == 0) | (y == 1)):
        raise ParameterError("logit MLE requires binary outcomes")
    Wp = np.asarray(W, dtype=float)[iu][obs]
    R = np.column_stack([np.ones(y.size), Wp])
    m = y.size
    theta = np.zeros(R.shape[1])
    ybar = y.mean()
    if 0 < ybar < 1:
        theta[0] = special.logit(ybar)
    for it in range(1, max_iter + 1):
        eta = R @ theta
        p = special.expit(eta)
        grad = R.T @ (y - p) / m
        if np.linalg.norm(grad) <= tol:
            break
        H = (R * (p * (1 - p))[:, None]).T @ R / m
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SingularDesignError("logit Hessian is singular") from None
        theta = theta + step
        if np.max(np.abs(theta)) > separation_bound:
            raise SeparationError(f"coefficients diverge (|theta| > {separation_bound}); data look separated")
    else:
        raise SeparationError(f"IRLS did not converge in {max_iter} iterations")
    H = (R * (p * (1 - p))[:, None]).T @ R / m
    return EstimateReport(beta=theta[1:], estimator="logit-mle", active_pairs=m,
                          gram_min_eigen=float(np.linalg.eigvalsh(H)[0]),
                          extras={"intercept": float(theta[0]), "iterations": it,
                                  "gradient_norm": float(np.linalg.norm(grad))})


@dataclass
class NeighborhoodConfig:
    """How similar agents are grouped before denoising."""

    size: int | None = None
    c: float = 1.0
    x_rule: str = "exact"
    delta: float | None = None
    overlap_floor: int = DEFAULT_OVERLAP_FLOOR
    min_donors: int = 3
    max_rounds: int = 10


def denoise_outcomes(ds: DyadicDataset, config: NeighborhoodConfig | None = None):
    """Row-average denoised outcomes (sequentially imputed when outcomes are missing)."""
    config = config or NeighborhoodConfig()
    C = compatibility(ds, config.x_rule, config.delta)
    dinf = d_infty_matrix(ds, C, config.overlap_floor)
    nbhd = build_neighborhoods(ds, dinf, size=config.size, c=config.c, compatible=C)
    if ds.complete:
        return denoise_row_average(ds, nbhd), nbhd
    return impute_sequential(ds, nbhd, ImputationConfig(config.min_donors, config.max_rounds)), nbhd


def single_index_beta(ds: DyadicDataset, W, link: LinkSpec | None = None,
                      nbhd_config: NeighborhoodConfig | None = None, kernel: KernelSpec | None = None,
                      bw: BandwidthRule | None = None, denoised: DenoisedMatrix | None = None,
                      exclude_self: bool = False, max_clamp_share: float = 0.5) -> EstimateReport:
    """Kernel estimator on the inverse-link transform of denoised outcomes.

    Denoise, clamp into the interior of the link's range, map through the
    inverse link, then compute pseudo-distances and the kernel estimator
    with the transformed values standing in for the outcomes. A
    ``denoised`` matrix may be supplied to plug in another denoiser.
    """
    link = link or LinkSpec("identity")
    if denoised is None:
        denoised, _ = denoise_outcomes(ds, nbhd_config)
    if not denoised.complete:
        missing = np.argwhere(~denoised.mask)
        raise ImputationGapError([tuple(int(v) for v in b) for b in missing[:50]], len(missing))
    clamped, n_clamped = link.clamp(denoised.Ystar)
    n = ds.n
    if n_clamped > max_clamp_share * n * n:
        raise LinkDomainError(f"{n_clamped} of {n * n} denoised entries fall outside the link's range")
    index = link.inverse(clamped)
    d2 = d2_heteroskedastic(index, W, exclude_self=exclude_self)
    full = ~np.eye(n, dtype=bool)
    proxy = DyadicDataset(Y=np.where(full, index, 0.0), D=full, X=ds.X, discrete=ds.discrete, ids=ds.ids)
    rep = kernel_beta(proxy, W, d2, kernel, bw)
    rep.estimator = "single-index-kernel"
    rep.extras.update({"clamped": n_clamped, "link": link.kind, "imputation_rounds": denoised.rounds})
    rep.extras["_d2"] = d2
    rep.extras["_index"] = index
    return rep


def g_hat(Ytilde, W, beta, link: LinkSpec | None = None) -> np.ndarray:
    """Pair fixed effects ``F^{-1}(Ytilde_ij) - W_ij' beta``; unimputed entries are NaN."""
    if isinstance(Ytilde, DenoisedMatrix):
        vals = np.where(Ytilde.mask, Ytilde.Ystar, np.nan)
    else:
        vals = np.asarray(Ytilde, dtype=float)
    if link is not None and link.kind != "identity":
        vals, _ = link.clamp(vals)
        vals = link.inverse(vals)
    g = vals - np.asarray(W, dtype=float) @ np.asarray(beta, dtype=float)
    return 0.5 * (g + g.T)


def partial_effects(W, g, beta, link: LinkSpec | None = None) -> dict:
    """Per-pair effects ``F'(W_ij' beta + g_ij) beta_r`` and their average over ``i != j``."""
    link = link or LinkSpec("identity")
    W = np.asarray(W, dtype=float)
    beta = np.asarray(beta, dtype=float)
    slope = link.derivative(W @ beta + np.asarray(g, dtype=float))
    per_pair = slope[:, :, None] * beta[None, None, :]
    n = W.shape[0]
    off = ~np.eye(n, dtype=bool) & np.isfinite(slope)
    return {"per_pair": per_pair, "average": per_pair[off].mean(axis=0)}


@dataclass
class HResult:
    value: float
    d2: float
    pair: tuple
    dispersion: float
    candidates: list


def h_nonparametric(Ystar, X, x, x_tilde, top: int = 5) -> HResult:
    """Nonparametric covariate effect for discrete ``X`` from denoised outcomes.

    For ``i`` with ``X_i = x`` and ``j`` with ``X_j = x_tilde`` the two-term
    criterion (reference agents with ``X_k = x`` and with ``X_k = x_tilde``)
    is minimized over a location shift in closed form; the shift of the pair
    with the smallest criterion is returned. The spread of the shifts across
    the ``top`` best pairs is reported as an overidentification check.
    """
    Y = Ystar.Ystar if isinstance(Ystar, DenoisedMatrix) else np.asarray(Ystar, dtype=float)
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ParameterError("h_nonparametric takes a single discrete covariate")
        X = X[:, 0]
    if x == x_tilde:
        return HResult(value=0.0, d2=0.0, pair=(), dispersion=0.0, candidates=[])
    A = np.flatnonzero(X == x)
    B = np.flatnonzero(X == x_tilde)
    if A.size == 0 or B.size == 0:
        raise GroupError(f"no agents with X = {x if A.size == 0 else x_tilde}")
    YA = Y[:, A]
    YB = Y[:, B]
    mA, mB = YA.mean(axis=1), YB.mean(axis=1)
    sA = (YA * YA).mean(axis=1)
    sB = (YB * YB).mean(axis=1)
    cA = YA @ YA.T / A.size
    cB = YB @ YB.T / B.size
    ii, jj = A[:, None], B[None, :]
    meanA = mA[ii] - mA[jj]
    meanB = mB[ii] - mB[jj]
    sqA = sA[ii] + sA[jj] - 2 * cA[ii, jj]
    sqB = sB[ii] + sB[jj] - 2 * cB[ii, jj]
    mu = 0.5 * (meanB - meanA)
    crit = (sqA + 2 * mu * meanA + mu * mu) + (sqB - 2 * mu * meanB + mu * mu)
    crit = np.maximum(crit, 0.0)
    flat = crit.ravel()
    order = np.lexsort((np.arange(flat.size), flat))[:top]
    best = order[0]
    a, b = np.unravel_index(best, crit.shape)
    cands = [(int(A[k // B.size]), int(B[k % B.size]), float(mu.ravel()[k]), float(flat[k])) for k in order]
    shifts = np.array([c[2] for c in cands])
    return HResult(value=float(mu[a, b]), d2=float(crit[a, b]), pair=(int(A[a]), int(B[b])),
                   dispersion=float(shifts.max() - shifts.min()), candidates=cands)
