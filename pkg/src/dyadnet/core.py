"""Shared domain types: dyadic datasets, covariate maps, kernels and links."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special


class DyadnetError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(DyadnetError, ValueError):
    pass


class ParameterError(DyadnetError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DyadicDataset:
    """Undirected dyadic outcomes on ``n`` agents with node covariates.

    Parameters
    ----------
    Y : (n, n) array
        Outcome matrix. Entries where ``D`` is False (including the
        diagonal) carry no data and are never read.
    D : (n, n) bool array
        Observation mask, ``D[i, j]`` True when ``Y[i, j]`` is observed.
    X : (n, k) array
        Node covariates. Object dtype is allowed for discrete labels.
    discrete : (k,) bool array
        Per-coordinate flag, True for discrete covariates.
    ids : tuple of str, optional
        External agent identifiers, in index order.
    """

    Y: np.ndarray
    D: np.ndarray
    X: np.ndarray
    discrete: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
            raise DimensionError(f"Y must be square, got shape {Y.shape}")
        n = Y.shape[0]
        D = np.array(self.D, dtype=bool)
        if D.shape != (n, n):
            raise DimensionError(f"mask shape {D.shape} does not match Y {Y.shape}")
        np.fill_diagonal(D, False)
        X = np.asarray(self.X)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise DimensionError(f"X has {X.shape[0]} rows for {n} agents")
        X = X.copy()
        discrete = np.zeros(X.shape[1], dtype=bool) if self.discrete is None else np.array(self.discrete, dtype=bool).reshape(-1)
        if discrete.shape[0] != X.shape[1]:
            raise DimensionError("one discrete flag per covariate column is required")
        ids = tuple(str(s) for s in self.ids) if len(self.ids) else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DimensionError(f"{len(ids)} ids for {n} agents")
        for arr in (Y, D, X, discrete):
            arr.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "discrete", discrete)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_arrays(cls, Y, X, mask=None, discrete=None, ids=()):
        """Build a dataset; by default every finite off-diagonal entry is observed."""
        Y = np.asarray(Y, dtype=float)
        if mask is None:
            mask = np.isfinite(Y)
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[:, None]
        if discrete is None:
            discrete = np.array([X.dtype.kind not in "fc"] * X.shape[1])
        return cls(Y=Y, D=mask, X=X, discrete=discrete, ids=ids)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def Y0(self) -> np.ndarray:
        """Outcomes with every unobserved entry (and the diagonal) set to zero."""
        return np.where(self.D, self.Y, 0.0)

    @property
    def complete(self) -> bool:
        """True when every off-diagonal outcome is observed."""
        return bool(self.D.sum() == self.n * (self.n - 1))

    def replace_outcomes(self, Y, mask=None) -> "DyadicDataset":
        return DyadicDataset(Y=Y, D=self.D if mask is None else mask, X=self.X,
                             discrete=self.discrete, ids=self.ids)


@dataclass
class ValidationReport:
    ok: bool
    n: int
    symmetry_violations: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)
    isolated: list = field(default_factory=list)
    min_overlap: int = 0
    messages: list = field(default_factory=list)

    def summary(self) -> str:
        if self.ok and not self.isolated:
            return f"ok, min overlap {self.min_overlap}"
        return "; ".join(self.messages) if self.messages else "ok"

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n": self.n,
            "symmetry_violations": [list(p) for p in self.symmetry_violations],
            "nonfinite": [list(p) for p in self.nonfinite],
            "isolated": list(self.isolated),
            "min_overlap": self.min_overlap,
            "messages": list(self.messages),
        }


def validate_dataset(ds: DyadicDataset, max_listed: int = 50) -> ValidationReport:
    """Report symmetry violations, non-finite outcomes, isolated agents and overlap.

    Never raises; ``ok`` is False when a hard problem (asymmetry, non-finite
    observed outcome, asymmetric mask) is present. Isolated agents only warn.
    """
    n = ds.n
    D = ds.D
    Y = ds.Y
    iu = np.triu_indices(n, k=1)
    report = ValidationReport(ok=True, n=n)

    mask_asym = D[iu] != D.T[iu]
    if mask_asym.any():
        pairs = [(int(a), int(b)) for a, b in zip(iu[0][mask_asym], iu[1][mask_asym])]
        report.symmetry_violations.extend(pairs[:max_listed])
        report.messages.append(f"observation mask asymmetric on {len(pairs)} pairs")
        report.ok = False

    both = D[iu] & D.T[iu]
    with np.errstate(invalid="ignore"):
        asym = both & ~(Y[iu] == Y.T[iu]) & np.isfinite(Y[iu]) & np.isfinite(Y.T[iu])
    if asym.any():
        pairs = [(int(a), int(b)) for a, b in zip(iu[0][asym], iu[1][asym])]
        report.symmetry_violations.extend(pairs[:max_listed])
        report.messages.append(f"symmetry violated on {len(pairs)} pairs")
        report.ok = False

    bad = D & ~np.isfinite(Y)
    if bad.any():
        idx = np.argwhere(bad)
        report.nonfinite.extend((int(a), int(b)) for a, b in idx[:max_listed])
        report.messages.append(f"{len(idx)} observed outcomes are NaN or infinite")
        report.ok = False

    deg = D.sum(axis=1)
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        report.isolated = [int(i) for i in isolated]
        report.messages.append(f"isolated agents (no observed outcomes): {report.isolated[:max_listed]}")

    Df = D.astype(float)
    overlap = Df @ Df.T
    observed_pairs = D[iu]
    if observed_pairs.any():
        report.min_overlap = int(overlap[iu][observed_pairs].min())
    return report


# ---------------------------------------------------------------------------
# Covariate maps
# ---------------------------------------------------------------------------


def _sqdiff(a, b):
    d = np.subtract.outer(a.astype(float), b.astype(float))
    return d * d


def _absdiff(a, b):
    return np.abs(np.subtract.outer(a.astype(float), b.astype(float)))


def _equal(a, b):
    return np.equal.outer(a, b).astype(float)


COVARIATE_MAPS: dict[str, Callable] = {
    "sqdiff": _sqdiff,
    "absdiff": _absdiff,
    "eq": _equal,
}

_MAP_ALIASES = {
    "squared-difference": "sqdiff",
    "absolute-difference": "absdiff",
    "equality-indicator": "eq",
    "equal": "eq",
}


@dataclass(frozen=True)
class LinkSpec:
    """A known invertible link ``F`` with its inverse and derivative."""

    kind: str = "identity"
    clamp_eps: float = 1e-3

    def __post_init__(self):
        kind = {"logit": "logistic", "exp": "exponential"}.get(self.kind, self.kind)
        if kind not in ("identity", "logistic", "exponential"):
            raise ParameterError(f"unknown link {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    def forward(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "logistic":
            return special.expit(t)
        if self.kind == "exponential":
            return np.exp(t)
        return t

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "logistic":
            return special.logit(y)
        if self.kind == "exponential":
            return np.log(y)
        return y

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "logistic":
            p = special.expit(t)
            return p * (1.0 - p)
        if self.kind == "exponential":
            return np.exp(t)
        return np.ones_like(t)

    def clamp(self, y):
        """Clamp into the interior of the range of ``F``; returns (values, n_clamped)."""
        y = np.asarray(y, dtype=float)
        if self.kind == "logistic":
            lo, hi = self.clamp_eps, 1.0 - self.clamp_eps
        elif self.kind == "exponential":
            lo, hi = self.clamp_eps, np.inf
        else:
            return y.copy(), 0
        finite = np.isfinite(y)
        out = np.where(finite, np.clip(y, lo, hi), y)
        return out, int(np.count_nonzero(finite & (out != y)))


@dataclass(frozen=True)
class ModelSpec:
    """Covariate map ``w`` as a concatenation of ``(map, column)`` terms plus a link.

    ``terms=(("sqdiff", 0), ("eq", 1))`` gives ``W_ij = ((x_i0 - x_j0)^2, 1{x_i1 = x_j1})``.
    """

    terms: tuple = (("sqdiff", 0),)
    link: LinkSpec = field(default_factory=LinkSpec)

    def __post_init__(self):
        terms = []
        for name, col in self.terms:
            name = _MAP_ALIASES.get(name, name)
            if name not in COVARIATE_MAPS:
                raise ParameterError(f"unknown covariate map {name!r}")
            terms.append((name, int(col)))
        if not terms:
            raise ParameterError("at least one covariate term is required")
        object.__setattr__(self, "terms", tuple(terms))

    @property
    def p(self) -> int:
        return len(self.terms)

    @classmethod
    def parse(cls, text: str, columns: Sequence[str] | None = None, link: str = "identity"):
        """Parse ``"sqdiff:x1,eq:x2"``; columns may be names (from ``columns``) or indices."""
        terms = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            name, _, col = item.partition(":")
            col = col or "0"
            if columns is not None and col in columns:
                idx = list(columns).index(col)
            else:
                try:
                    idx = int(col)
                except ValueError:
                    raise ParameterError(f"unknown covariate column {col!r}") from None
            terms.append((name, idx))
        return cls(terms=tuple(terms), link=LinkSpec(link))

    @classmethod
    def default_for(cls, discrete, link: str = "identity"):
        """Equality indicator for discrete columns, squared difference otherwise."""
        terms = tuple(("eq" if d else "sqdiff", c) for c, d in enumerate(discrete))
        return cls(terms=terms, link=LinkSpec(link))

    def describe(self, columns: Sequence[str] | None = None) -> list[str]:
        return [f"{name}:{columns[c] if columns else c}" for name, c in self.terms]


def build_covariates(X, spec: ModelSpec) -> np.ndarray:
    """Pair covariates ``W[i, j, :] = w(X_i, X_j)`` as an ``(n, n, p)`` array.

    The diagonal ``W[i, i]`` is filled in as well; it is needed for the
    denoised outcomes and the fixed-effect recovery.
    """
    if isinstance(X, DyadicDataset):
        X = X.X
    if isinstance(X, (list, tuple)):
        lengths = {len(np.atleast_1d(r)) for r in X}
        if len(lengths) > 1:
            raise DimensionError(f"covariate records have mismatched lengths {sorted(lengths)}")
        X = np.array([np.atleast_1d(r) for r in X], dtype=object if _has_text(X) else float)
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    W = np.empty((n, n, spec.p))
    for a, (name, col) in enumerate(spec.terms):
        if col >= k:
            raise DimensionError(f"covariate map uses column {col} but records have length {k}")
        W[:, :, a] = COVARIATE_MAPS[name](X[:, col], X[:, col])
    if not np.all(np.isfinite(W)):
        raise DimensionError("covariate map produced non-finite values")
    return W


def _has_text(records) -> bool:
    return any(isinstance(v, str) for r in records for v in np.atleast_1d(r))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """Kernel applied to the squared standardized distance ``z = d^2 / h^2``.

    Every kind is supported on ``[0, 1]`` and scaled so that
    ``integral_{-1}^{1} K(u^2) du = 1``.
    """

    kind: str = "epanechnikov"

    def __post_init__(self):
        kind = {"epa": "epanechnikov", "epanechnikov-on-squared-argument": "epanechnikov",
                "tri": "triangular", "unif": "uniform"}.get(self.kind, self.kind)
        if kind not in ("epanechnikov", "uniform", "triangular"):
            raise ParameterError(f"unknown kernel {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        inside = (z >= 0) & (z <= 1)
        zc = np.where(inside, z, 0.0)
        if self.kind == "epanechnikov":
            k = 0.75 * (1.0 - zc)
        elif self.kind == "uniform":
            k = np.full_like(zc, 0.5)
        else:
            k = 1.0 - np.sqrt(zc)
        return np.where(inside, k, 0.0)
