"""Pseudo-distances, similarity distances, neighborhoods and denoised outcomes.

All-pairs quantities are assembled from masked matrix products: for a
mask ``M`` and agent-by-agent arrays ``A``, ``B``,

    sum_k M_ik M_jk (A_ik - A_jk)(B_ik - B_jk)
        = (ABM) M' + M (ABM)' - (AM)(BM)' - (BM)(AM)'

which turns every pairwise-difference regression into a handful of GEMMs.
Pairs with nearly equal covariate rows, where that expansion cancels badly,
are recomputed from explicit differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DyadicDataset, DyadnetError, ParameterError

log = logging.getLogger(__name__)

RCOND = 1e-10
# Absolute floor relative to the uncancelled magnitude of sum(dW^2). Pairs
# this close are always computed from explicit differences, whose round-off
# is of order (eps * magnitude)^2, so the floor sits just above that.
_CANCEL_FLOOR = 1e-24
# Pairs whose sum(dW^2) is below this fraction of that magnitude are
# recomputed from explicit differences.
_REFINE_RATIO = 1e-3
DEFAULT_OVERLAP_FLOOR = 5


class OverlapError(DyadnetError, ValueError):
    pass


class DegenerateDataError(DyadnetError, ValueError):
    pass


class ImputationGapError(DyadnetError, ValueError):
    def __init__(self, pairs, total):
        self.pairs = pairs
        super().__init__(f"{total} denoised entries are missing, e.g. {pairs[:10]}")


# ---------------------------------------------------------------------------
# Pairwise-difference least squares
# ---------------------------------------------------------------------------


def overlap(mask, i, j):
    """Agents ``k`` (other than i, j) with both ``(i, k)`` and ``(j, k)`` observed."""
    mask = np.asarray(mask, dtype=bool)
    o = mask[i] & mask[j]
    o[[i, j]] = False
    return np.flatnonzero(o)


def _min_norm(G, b, floor=0.0):
    """Min-norm solution of ``G beta = b`` for stacked symmetric PSD ``G``."""
    p = G.shape[-1]
    if p == 1:
        g = G[..., 0, 0]
        ok = g > np.maximum(RCOND * np.abs(g), floor)
        return np.where(ok, b[..., 0] / np.where(ok, g, 1.0), 0.0)[..., None]
    w, V = np.linalg.eigh(G)
    cut = np.maximum(RCOND * np.abs(w[..., -1:]), np.asarray(floor)[..., None] if np.ndim(floor) else floor)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    proj = np.einsum("...ba,...b->...a", V, b)
    return np.einsum("...ab,...b->...a", V, inv * proj)


def pairwise_lsq(i, j, outcomes, W, mask=None):
    """Min-norm regression of ``Y_ik - Y_jk`` on ``W_ik - W_jk`` over the overlap.

    Returns ``(value, beta)`` where ``value`` is the minimized mean squared
    residual.

    Raises
    ------
    OverlapError
        If no third agent has both outcomes observed.
    """
    Y = np.asarray(outcomes, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim == 2:
        W = W[:, :, None]
    n = Y.shape[0]
    if mask is None:
        mask = ~np.eye(n, dtype=bool)
    ks = overlap(mask, i, j)
    if ks.size == 0:
        raise OverlapError(f"agents {i} and {j} share no observed third agent")
    dy = Y[i, ks] - Y[j, ks]
    dw = W[i, ks, :] - W[j, ks, :]
    G = dw.T @ dw
    floor = _CANCEL_FLOOR * float(np.sum(W[i, ks, :] ** 2 + W[j, ks, :] ** 2))
    beta = _min_norm(G, dw.T @ dy, floor)
    resid = dy - dw @ beta
    return float(np.mean(resid * resid)), beta


@dataclass
class PairMoments:
    """Per-pair sums over the overlap: count, sum dY^2, sum dW dY, sum dW dW'."""

    count: np.ndarray
    syy: np.ndarray
    swy: np.ndarray
    sww: np.ndarray
    wscale: np.ndarray

    @property
    def p(self) -> int:
        return self.swy.shape[-1]


def _cross(A, B, M):
    """``sum_k M_ik M_jk (A_ik - A_jk)(B_ik - B_jk)`` for all (i, j)."""
    ABM = A * B * M
    AM = A * M
    BM = B * M
    t = ABM @ M.T
    c = AM @ BM.T
    return t + t.T - c - c.T


def _square_sum(A, M):
    """``sum_k M_ik M_jk (A_ik^2 + A_jk^2)``: the magnitude before cancellation."""
    t = (A * A * M) @ M.T
    return t + t.T


def pair_moments(outcomes, mask, W) -> PairMoments:
    Y = np.where(mask, outcomes, 0.0)
    M = np.asarray(mask, dtype=float)
    W = np.asarray(W, dtype=float)
    p = W.shape[2]
    n = Y.shape[0]
    count = M @ M.T
    syy = _cross(Y, Y, M)
    swy = np.empty((n, n, p))
    sww = np.empty((n, n, p, p))
    wscale = np.zeros((n, n))
    for a in range(p):
        Wa = W[:, :, a]
        swy[:, :, a] = _cross(Wa, Y, M)
        wscale += _square_sum(Wa, M)
        for b in range(a, p):
            s = _cross(Wa, W[:, :, b], M)
            sww[:, :, a, b] = s
            sww[:, :, b, a] = s
    m = PairMoments(count=count, syy=syy, swy=swy, sww=sww, wscale=wscale)
    # the expanded sums lose relative accuracy when covariate rows nearly coincide;
    # recompute those pairs from explicit differences
    tr = np.trace(sww, axis1=2, axis2=3)
    severe = (tr > 0) & (tr < _REFINE_RATIO * wscale)
    if severe.any():
        _refine_pairs(m, Y, M, W, np.triu(severe, k=1))
    return m


def _refine_pairs(m: PairMoments, Y, M, W, pairs):
    for i in np.flatnonzero(pairs.any(axis=1)):
        js = np.flatnonzero(pairs[i])
        Mij = M[i][None, :] * M[js]
        dy = (Y[i][None, :] - Y[js]) * Mij
        dW = (W[i][None, :, :] - W[js]) * Mij[:, :, None]
        syy = np.einsum("jk,jk->j", dy, dy)
        swy = np.einsum("jka,jk->ja", dW, dy)
        sww = np.einsum("jka,jkb->jab", dW, dW)
        m.syy[i, js] = m.syy[js, i] = syy
        m.swy[i, js] = m.swy[js, i] = swy
        m.sww[i, js] = m.sww[js, i] = sww


def _fit_pairs(m: PairMoments):
    beta = _min_norm(m.sww, m.swy, _CANCEL_FLOOR * m.wscale)
    rss = m.syy - np.einsum("...a,...a->...", m.swy, beta)
    return beta, np.maximum(rss, 0.0)


# ---------------------------------------------------------------------------
# Pseudo-distances
# ---------------------------------------------------------------------------


@dataclass
class PseudoDistanceMatrix:
    """Symmetric pseudo-distances; ``inf`` marks pairs that could not be estimated."""

    d2: np.ndarray
    provenance: str
    sigma2hat: float | None = None
    per_pair_beta: np.ndarray | None = None
    moments: PairMoments | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.d2.shape[0]

    @property
    def defined(self) -> np.ndarray:
        ok = np.isfinite(self.d2)
        np.fill_diagonal(ok, False)
        return ok

    def pair_values(self) -> np.ndarray:
        """Finite values over unordered pairs ``i < j``."""
        iu = np.triu_indices(self.n, k=1)
        v = self.d2[iu]
        return v[np.isfinite(v)]


@dataclass
class Q2Result:
    q2: np.ndarray
    beta: np.ndarray
    moments: PairMoments


def q2_matrix(ds: DyadicDataset, W, overlap_floor: int = DEFAULT_OVERLAP_FLOOR) -> Q2Result:
    """Mean squared pairwise-difference residual for every pair of agents.

    Pairs whose overlap is below ``overlap_floor`` are set to ``inf``.
    """
    m = pair_moments(ds.Y0, ds.D, W)
    beta, rss = _fit_pairs(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        q2 = rss / m.count
    q2[m.count < max(overlap_floor, 1)] = np.inf
    q2 = np.minimum(q2, q2.T)  # bit-exact symmetry
    np.fill_diagonal(q2, 0.0)
    if not np.isfinite(q2[np.triu_indices(ds.n, k=1)]).any():
        raise DegenerateDataError(f"no pair of agents has at least {overlap_floor} common observed partners")
    return Q2Result(q2=q2, beta=beta, moments=m)


def sigma2_hat(q2) -> float:
    """Half the smallest defined off-diagonal ``q^2``."""
    q2 = q2.q2 if isinstance(q2, Q2Result) else np.asarray(q2, dtype=float)
    iu = np.triu_indices(q2.shape[0], k=1)
    v = q2[iu]
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise DegenerateDataError("no defined pair to estimate the error variance")
    return float(v.min()) / 2.0


def d2_homoskedastic(ds: DyadicDataset, W, overlap_floor: int = DEFAULT_OVERLAP_FLOOR) -> PseudoDistanceMatrix:
    res = q2_matrix(ds, W, overlap_floor)
    s2 = sigma2_hat(res.q2)
    d2 = np.maximum(res.q2 - 2.0 * s2, 0.0)
    np.fill_diagonal(d2, 0.0)
    return PseudoDistanceMatrix(d2=d2, provenance="homoskedastic", sigma2hat=s2,
                                per_pair_beta=res.beta, moments=res.moments)


def d2_heteroskedastic(Ystar, W, exclude_self: bool = False) -> PseudoDistanceMatrix:
    """Pseudo-distances computed on denoised outcomes.

    Every ``k`` (including ``i`` and ``j``) enters the average unless
    ``exclude_self`` is set.

    Raises
    ------
    ImputationGapError
        If any denoised entry is missing.
    """
    if isinstance(Ystar, DenoisedMatrix):
        values, ok = Ystar.Ystar, Ystar.mask
    else:
        values = np.asarray(Ystar, dtype=float)
        ok = np.isfinite(values)
    if not ok.all():
        bad = np.argwhere(~ok)
        raise ImputationGapError([tuple(int(v) for v in b) for b in bad[:50]], len(bad))
    n = values.shape[0]
    M = np.ones((n, n))
    if exclude_self:
        np.fill_diagonal(M, 0.0)
    m = pair_moments(values, M.astype(bool), W)
    beta, rss = _fit_pairs(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(m.count > 0, rss / m.count, np.inf)
    d2 = np.minimum(d2, d2.T)
    np.fill_diagonal(d2, 0.0)
    return PseudoDistanceMatrix(d2=d2, provenance="heteroskedastic", per_pair_beta=beta, moments=m)


# ---------------------------------------------------------------------------
# Similarity distance and neighborhoods
# ---------------------------------------------------------------------------


def compatibility(ds: DyadicDataset, x_rule: str = "exact", delta=None) -> np.ndarray:
    """Boolean matrix of agents that may be matched under an X-matching rule.

    ``exact``: discrete coordinates equal (continuous ones treated as latent).
    ``ball``: discrete coordinates equal and continuous ones within ``delta``
    (per agent; default distance to the ceil(n^(3/4))-th nearest neighbor).
    ``ignore``: everyone is compatible.
    """
    n = ds.n
    C = np.ones((n, n), dtype=bool)
    if x_rule == "ignore":
        return C
    if x_rule not in ("exact", "ball"):
        raise ParameterError(f"unknown X-matching rule {x_rule!r}")
    for c in np.flatnonzero(ds.discrete):
        C &= np.equal.outer(ds.X[:, c], ds.X[:, c])
    cont = np.flatnonzero(~ds.discrete)
    if x_rule == "ball" and cont.size:
        Xc = ds.X[:, cont].astype(float)
        dist = np.sqrt(((Xc[:, None, :] - Xc[None, :, :]) ** 2).sum(-1))
        if delta is None:
            kth = min(math.ceil(n ** 0.75), n - 1)
            delta = np.sort(dist, axis=1)[:, kth]
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (n,))
        C &= dist <= delta[:, None]
    return C


def d_infty_matrix(ds: DyadicDataset, compatible=None, overlap_floor: int = DEFAULT_OVERLAP_FLOOR) -> np.ndarray:
    """Max-over-reference-agents covariance discrepancy for all pairs.

    ``compatible`` (bool matrix) restricts which pairs are computed; others
    are ``inf``. With missing outcomes each reference ``k`` averages over
    agents observed with all of ``i``, ``j`` and ``k``; references with fewer
    than ``overlap_floor`` such agents are skipped and a pair with no usable
    reference gets ``inf``.
    """
    n = ds.n
    if n < 4:
        raise DegenerateDataError("the similarity distance needs at least four agents")
    if compatible is None:
        compatible = np.ones((n, n), dtype=bool)
    Y = ds.Y0
    out = np.full((n, n), np.inf)
    np.fill_diagonal(out, 0.0)

    if ds.complete:
        P = Y @ Y
        for i in range(n - 1):
            js = np.flatnonzero(compatible[i, i + 1:]) + i + 1
            if js.size == 0:
                continue
            S = (P[i][None, :] - P[js]) + Y[i, js][:, None] * (Y[i][None, :] - Y[js])
            S = np.abs(S)
            S[:, i] = -np.inf
            S[np.arange(js.size), js] = -np.inf
            out[i, js] = S.max(axis=1) / (n - 3)
    else:
        D = ds.D.astype(float)
        DY = Y * D
        for i in range(n - 1):
            js = np.flatnonzero(compatible[i, i + 1:]) + i + 1
            if js.size == 0:
                continue
            Dij = D[i][None, :] * D[js]
            V = Dij * (Y[i][None, :] - Y[js])
            S = V @ DY.T
            C = Dij @ D.T
            valid = C >= max(overlap_floor, 1)
            valid[:, i] = False
            valid[np.arange(js.size), js] = False
            with np.errstate(divide="ignore", invalid="ignore"):
                R = np.where(valid, np.abs(S) / np.where(valid, C, 1.0), -np.inf)
            best = R.max(axis=1)
            out[i, js] = np.where(np.isfinite(best), best, np.inf)
    low = np.tril_indices(n, k=-1)
    out[low] = out.T[low]
    return out


def neighborhood_size(n: int, c: float = 1.0) -> int:
    """``round(c * sqrt(n ln n))``, at least 1."""
    return max(1, int(round(c * math.sqrt(n * math.log(n)))))


@dataclass
class NeighborhoodIndex:
    neighbors: list
    sizes: np.ndarray
    dInf: np.ndarray
    target: int
    truncated: np.ndarray
    order: list = field(default_factory=list, repr=False)

    def indicator(self) -> np.ndarray:
        n = len(self.neighbors)
        A = np.zeros((n, n))
        for i, nb in enumerate(self.neighbors):
            A[i, nb] = 1.0
        return A


def build_neighborhoods(ds: DyadicDataset, d_inf, size: int | None = None, c: float = 1.0,
                        x_rule: str = "exact", delta=None, compatible=None) -> NeighborhoodIndex:
    """The ``n_i`` most similar compatible agents for every agent.

    Agent ``i`` always comes first; remaining ties are broken by the
    similarity distance, then by index. Agents with too few compatible
    candidates get a truncated neighborhood flagged in ``truncated``.
    """
    n = ds.n
    d_inf = np.asarray(d_inf, dtype=float)
    target = int(size) if size is not None else neighborhood_size(n, c)
    if target < 1:
        raise ParameterError("neighborhood size must be at least 1")
    if compatible is None:
        compatible = compatibility(ds, x_rule, delta)
    neighbors, order = [], []
    sizes = np.zeros(n, dtype=int)
    truncated = np.zeros(n, dtype=bool)
    for i in range(n):
        cand = np.flatnonzero(compatible[i] & np.isfinite(d_inf[i]))
        cand = cand[cand != i]
        ranked = cand[np.lexsort((cand, d_inf[i, cand]))]
        ranked = np.concatenate(([i], ranked))
        order.append(ranked)
        nb = ranked[:target]
        neighbors.append(nb)
        sizes[i] = nb.size
        truncated[i] = nb.size < target
    if truncated.any():
        log.warning("%d agents have fewer than %d compatible candidates", int(truncated.sum()), target)
    return NeighborhoodIndex(neighbors=neighbors, sizes=sizes, dInf=d_inf, target=target,
                             truncated=truncated, order=order)


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------


@dataclass
class DenoisedMatrix:
    """Estimated error-free outcomes; ``mask`` marks entries actually imputed."""

    Ystar: np.ndarray
    kind: str
    mask: np.ndarray
    rounds: int = 1
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())


def symmetrize(Yhat, ok):
    """Average ``(i, j)`` and ``(j, i)``; fall back to whichever side exists."""
    both = ok & ok.T
    out = np.where(both, 0.5 * (np.where(ok, Yhat, 0.0) + np.where(ok.T, Yhat.T, 0.0)),
                   np.where(ok, Yhat, np.where(ok.T, Yhat.T, np.nan)))
    return out, ok | ok.T


def _row_average(Y, D, nbhd: NeighborhoodIndex, complete: bool):
    n = Y.shape[0]
    if complete:
        A = nbhd.indicator()
        est = (A @ Y) / nbhd.sizes[:, None]
        return est, np.ones((n, n), dtype=bool)
    est = np.full((n, n), np.nan)
    ok = np.zeros((n, n), dtype=bool)
    for i in range(n):
        cand = nbhd.order[i]
        Dc = D[cand]
        take = Dc & (np.cumsum(Dc, axis=0) <= nbhd.sizes[i])
        cnt = take.sum(axis=0)
        tot = (take * Y[cand]).sum(axis=0)
        has = cnt > 0
        est[i, has] = tot[has] / cnt[has]
        ok[i] = has
    return est, ok


def denoise_row_average(ds: DyadicDataset, nbhd: NeighborhoodIndex, symmetric: bool = True) -> DenoisedMatrix:
    """Average each column over the row agent's neighborhood.

    With complete data ``Y_jj`` counts as zero and the divisor is ``n_i``.
    With missing outcomes each entry uses its own donor pool (compatible
    agents observed with ``j``), ranked by similarity and truncated at ``n_i``.
    """
    est, ok = _row_average(ds.Y0, ds.D, nbhd, ds.complete)
    raw = est.copy()
    if symmetric:
        est, ok = symmetrize(est, ok)
    return DenoisedMatrix(Ystar=est, kind="row-average", mask=ok, raw=raw)


def _intersection_sums(A, Y, D):
    """Per pair: sum and count of observed ``Y_ab`` over ``a < b`` both in ``N_i and N_j``."""
    n = A.shape[0]
    half_sum = np.zeros((n, n))
    half_cnt = np.zeros((n, n))
    for i in range(n):
        nb = np.flatnonzero(A[i])
        B = A[:, nb]
        shared = B.sum(axis=1) >= 2
        if not shared.any():
            continue
        Bs = B[shared]
        half_sum[i, shared] = 0.5 * ((Bs @ Y[np.ix_(nb, nb)]) * Bs).sum(axis=1)
        half_cnt[i, shared] = 0.5 * ((Bs @ D[np.ix_(nb, nb)]) * Bs).sum(axis=1)
    return half_sum, half_cnt


def denoise_unique_pairs(ds: DyadicDataset, nbhd: NeighborhoodIndex) -> DenoisedMatrix:
    """Average observed outcomes over unique unordered pairs drawn across the two neighborhoods."""
    A = nbhd.indicator()
    D = ds.D.astype(float)
    Y = ds.Y0
    s = A @ Y @ A.T
    cnt = A @ D @ A.T
    hs, hc = _intersection_sums(A, Y, D)
    s = s - hs
    cnt = cnt - hc
    s = 0.5 * (s + s.T)
    cnt = np.rint(0.5 * (cnt + cnt.T))
    ok = cnt > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        est = np.where(ok, s / np.where(ok, cnt, 1.0), np.nan)
    return DenoisedMatrix(Ystar=est, kind="unique-pair-average", mask=ok)


@dataclass
class ImputationConfig:
    min_donors: int = 3
    max_rounds: int = 10


def impute_sequential(ds: DyadicDataset, nbhd: NeighborhoodIndex, config: ImputationConfig | None = None) -> DenoisedMatrix:
    """Row-average denoising that feeds its own imputations back as donors.

    Each round imputes the entries whose donor pool holds at least
    ``min_donors`` agents, then treats the new values as observed outcomes
    (symmetrically) so later rounds see larger pools. Stops at a fixpoint,
    when everything is imputed, or after ``max_rounds``.
    """
    config = config or ImputationConfig()
    if ds.complete:
        return denoise_row_average(ds, nbhd)
    n = ds.n
    Ycur = ds.Y0.copy()
    Dcur = ds.D.copy()
    est = np.full((n, n), np.nan)
    done = np.zeros((n, n), dtype=bool)
    history = []
    rounds = 0
    for rounds in range(1, config.max_rounds + 1):
        new = np.zeros((n, n), dtype=bool)
        for i in range(n):
            cand = nbhd.order[i]
            Dc = Dcur[cand]
            take = Dc & (np.cumsum(Dc, axis=0) <= nbhd.sizes[i])
            cnt = take.sum(axis=0)
            eligible = (Dc.sum(axis=0) >= config.min_donors) & ~done[i]
            if not eligible.any():
                continue
            tot = (take * Ycur[cand]).sum(axis=0)
            est[i, eligible] = tot[eligible] / cnt[eligible]
            new[i] = eligible
        history.append(int(new.sum()))
        if not new.any():
            break
        done |= new
        sym, sym_ok = symmetrize(np.where(done, est, np.nan), done)
        grow = sym_ok & ~Dcur
        np.fill_diagonal(grow, False)
        Ycur[grow] = sym[grow]
        Dcur |= grow
        if done.all():
            break
    if not done.all():
        log.warning("sequential imputation left %d entries missing after %d rounds",
                    int((~done).sum()), rounds)
    out, ok = symmetrize(np.where(done, est, np.nan), done)
    res = DenoisedMatrix(Ystar=out, kind="row-average", mask=ok, rounds=rounds, raw=est)
    res.history = history
    return res


def denoise(ds: DyadicDataset, size: int | None = None, c: float = 1.0, x_rule: str = "exact",
            delta=None, overlap_floor: int = DEFAULT_OVERLAP_FLOOR, kind: str = "row-average",
            imputation: ImputationConfig | None = None):
    """Similarity distance, neighborhoods and denoised matrix in one call."""
    C = compatibility(ds, x_rule, delta)
    dinf = d_infty_matrix(ds, C, overlap_floor)
    nbhd = build_neighborhoods(ds, dinf, size=size, c=c, compatible=C)
    if kind == "unique-pair-average":
        return denoise_unique_pairs(ds, nbhd), nbhd
    if ds.complete:
        return denoise_row_average(ds, nbhd), nbhd
    return impute_sequential(ds, nbhd, imputation), nbhd
