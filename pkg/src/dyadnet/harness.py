"""Monte Carlo replication engine and table formatting."""

from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DyadicDataset, DyadnetError, KernelSpec, LinkSpec, ModelSpec, ParameterError, build_covariates
from .estimators import (
    BandwidthRule,
    EstimateReport,
    NeighborhoodConfig,
    denoise_outcomes,
    fe_additive_beta,
    kernel_beta,
    logit_mle_beta,
    nn1_beta,
    single_index_beta,
)
from .matching import d2_heteroskedastic, d2_homoskedastic, pair_moments
from .simulate import DgpSpec, simulate

log = logging.getLogger(__name__)

ESTIMATORS = ("kernel", "nn1", "fe", "logit-mle", "single-index")
_ESTIMATOR_ALIASES = {"fe-additive": "fe", "single-index-kernel": "single-index", "logit": "logit-mle"}


@dataclass(frozen=True)
class EstimatorConfig:
    """One estimator inside a Monte Carlo design (or a single CLI estimate)."""

    name: str = "kernel"
    distance: str = "homo"
    kernel: str = "epanechnikov"
    bandwidth: BandwidthRule = field(default_factory=BandwidthRule)
    link: str = "identity"
    ni_const: float = 1.0
    x_rule: str = "exact"
    clamp_eps: float | None = None
    label: str = ""

    def __post_init__(self):
        name = _ESTIMATOR_ALIASES.get(self.name, self.name)
        if name not in ESTIMATORS:
            raise ParameterError(f"unknown estimator {self.name!r}; choose from {', '.join(ESTIMATORS)}")
        if self.distance not in ("homo", "hetero"):
            raise ParameterError(f"distance must be 'homo' or 'hetero', got {self.distance!r}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "label", self.label or name)
        KernelSpec(self.kernel)
        LinkSpec(self.link)

    def link_spec(self) -> LinkSpec:
        if self.clamp_eps is None:
            return LinkSpec(self.link)
        return LinkSpec(self.link, float(self.clamp_eps))

    def neighborhood(self) -> NeighborhoodConfig:
        return NeighborhoodConfig(c=self.ni_const, x_rule=self.x_rule)

    def to_dict(self) -> dict:
        return {"name": self.name, "distance": self.distance, "kernel": self.kernel,
                "bandwidth": self.bandwidth.kind if self.bandwidth.value is None else self.bandwidth.value,
                "link": self.link, "ni_const": self.ni_const, "x_rule": self.x_rule,
                "clamp_eps": self.clamp_eps, "label": self.label}


def run_estimator(ds: DyadicDataset, W, cfg: EstimatorConfig, cache: dict | None = None) -> EstimateReport:
    """Dispatch one estimator; ``cache`` shares pseudo-distances and moments between calls."""
    cache = {} if cache is None else cache
    kernel = KernelSpec(cfg.kernel)
    if cfg.name == "fe":
        return fe_additive_beta(ds, W)
    if cfg.name == "logit-mle":
        return logit_mle_beta(ds, W)
    if cfg.name == "single-index":
        key = ("denoised", cfg.ni_const, cfg.x_rule)
        if key not in cache:
            cache[key] = denoise_outcomes(ds, cfg.neighborhood())[0]
        return single_index_beta(ds, W, cfg.link_spec(), kernel=kernel, bw=cfg.bandwidth,
                                 denoised=cache[key])
    if "moments" not in cache:
        cache["moments"] = pair_moments(ds.Y0, ds.D, W)
    key = ("d2", cfg.distance, cfg.ni_const, cfg.x_rule)
    if key not in cache:
        if cfg.distance == "homo":
            cache[key] = d2_homoskedastic(ds, W)
        else:
            dkey = ("denoised", cfg.ni_const, cfg.x_rule)
            if dkey not in cache:
                cache[dkey] = denoise_outcomes(ds, cfg.neighborhood())[0]
            cache[key] = d2_heteroskedastic(cache[dkey], W)
    if cfg.name == "kernel":
        return kernel_beta(ds, W, cache[key], kernel, cfg.bandwidth, cache["moments"])
    return nn1_beta(ds, W, cache[key], cache["moments"])


@dataclass(frozen=True)
class McConfig:
    dgp: DgpSpec
    estimators: tuple = (EstimatorConfig(),)
    reps: int = 100
    seed: int = 0
    workers: int = 1
    coef: int = 0
    label: str = ""

    def __post_init__(self):
        if self.reps < 1:
            raise ParameterError("reps must be at least 1")
        labels = [e.label for e in self.estimators]
        if len(set(labels)) != len(labels):
            raise ParameterError(f"estimator labels must be unique, got {labels}")
        object.__setattr__(self, "estimators", tuple(self.estimators))


def replication_seed(master: int, rep: int) -> int:
    """64-bit seed for replication ``rep``, a pure function of ``(master, rep)``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(rep),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_replication(cfg: McConfig, rep: int) -> dict:
    """Simulate and estimate one replication; estimator failures are captured, not raised."""
    seed = replication_seed(cfg.seed, rep)
    ds, truth = simulate(cfg.dgp.with_seed(seed))
    W = build_covariates(ds.X, truth.model)
    deg = float(np.where(ds.D, ds.Y, 0.0).sum(axis=1).mean())
    cache = {}
    out = {"rep": rep, "seed": seed, "beta0": float(truth.beta0[cfg.coef]), "mean_degree": deg, "results": {}}
    for est in cfg.estimators:
        t0 = time.perf_counter()
        try:
            rep_ = run_estimator(ds, W, est, cache)
            value, err = float(rep_.beta[cfg.coef]), ""
        except (DyadnetError, np.linalg.LinAlgError) as exc:
            value, err = float("nan"), f"{type(exc).__name__}: {exc}"
        out["results"][est.label] = (value, err, time.perf_counter() - t0)
    return out


def _run_chunk(cfg: McConfig, reps):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        return [run_replication(cfg, r) for r in reps]


@dataclass
class EstimatorSummary:
    label: str
    bias: float
    median_bias: float
    sd: float
    iqr: float
    successes: int
    failures: int
    failure_kinds: dict
    seconds: float
    estimates: np.ndarray

    @property
    def se(self) -> float:
        return self.sd / np.sqrt(self.successes) if self.successes else float("nan")

    def to_dict(self) -> dict:
        return {"label": self.label, "bias": self.bias, "median_bias": self.median_bias, "sd": self.sd,
                "iqr_1349": self.iqr, "successes": self.successes, "failures": self.failures,
                "failure_kinds": dict(self.failure_kinds), "seconds": self.seconds}


@dataclass
class McSummary:
    config: McConfig
    estimators: dict
    reps: int
    wall_time: float
    mean_degree: float
    seeds: np.ndarray

    def __getitem__(self, label) -> EstimatorSummary:
        return self.estimators[label]

    def to_dict(self) -> dict:
        d = self.config.dgp
        return {"dgp": {"kind": d.kind, "n": d.n, "rho": d.rho, "missing_rate": d.missing_rate,
                        "params": dict(d.params)},
                "reps": self.reps, "seed": self.config.seed, "wall_time": self.wall_time,
                "mean_degree": self.mean_degree,
                "estimators": {k: v.to_dict() for k, v in self.estimators.items()}}


def summarize_estimates(label, estimates, beta0, errors=(), seconds=0.0) -> EstimatorSummary:
    """Bias, median bias, SD and IQR/1.349 over the finite estimates, in the given order."""
    est = np.asarray(estimates, dtype=float)
    ok = est[np.isfinite(est)]
    kinds = Counter(e.split(":", 1)[0] for e in errors if e)
    if ok.size == 0:
        nan = float("nan")
        return EstimatorSummary(label, nan, nan, nan, nan, 0, int(est.size), dict(kinds), seconds, est)
    dev = ok - beta0
    q75, q25 = np.percentile(dev, [75, 25])
    return EstimatorSummary(
        label=label,
        bias=float(np.mean(dev)),
        median_bias=float(np.median(dev)),
        sd=float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0,
        iqr=float(q75 - q25) / 1.349,
        successes=int(ok.size),
        failures=int(est.size - ok.size),
        failure_kinds=dict(kinds),
        seconds=float(seconds),
        estimates=est,
    )


def run_mc(cfg: McConfig, dump: str | None = None, reps=None, append: bool = False) -> McSummary:
    """Run the replications of ``cfg`` and summarize per estimator.

    ``reps`` restricts the run to a subset of replication indices (each is
    reproducible in isolation). Results are ordered by replication index
    before any reduction, so the summary does not depend on ``workers``.
    ``dump`` writes the per-replication estimates as CSV (appending when
    ``append`` is set, so several designs can share one file).
    """
    indices = list(range(cfg.reps)) if reps is None else sorted(int(r) for r in reps)
    t0 = time.perf_counter()
    workers = max(1, int(cfg.workers))
    if workers == 1 or len(indices) == 1:
        rows = _run_chunk(cfg, indices)
    else:
        from joblib import Parallel, delayed

        chunks = [indices[k::workers] for k in range(workers)]
        parts = Parallel(n_jobs=workers, backend="loky")(delayed(_run_chunk)(cfg, c) for c in chunks if c)
        rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: r["rep"])
    wall = time.perf_counter() - t0
    log.info("%s: %d replications in %.1fs", cfg.label or cfg.dgp.kind, len(rows), wall)

    beta0 = rows[0]["beta0"]
    summaries = {}
    for est in cfg.estimators:
        vals = [r["results"][est.label][0] for r in rows]
        errs = [r["results"][est.label][1] for r in rows]
        secs = float(sum(r["results"][est.label][2] for r in rows))
        summaries[est.label] = summarize_estimates(est.label, vals, beta0, errs, secs)
        if summaries[est.label].failures:
            log.warning("%s: %d failed replications %s", est.label, summaries[est.label].failures,
                        summaries[est.label].failure_kinds)
    if dump:
        write_raw(rows, cfg, dump, append=append)
    return McSummary(config=cfg, estimators=summaries, reps=len(rows), wall_time=wall,
                     mean_degree=float(np.mean([r["mean_degree"] for r in rows])),
                     seeds=np.array([r["seed"] for r in rows], dtype=np.uint64))


RAW_FIELDS = ("n", "rho", "rep", "seed", "estimator", "beta0", "estimate", "error")


def write_raw(rows, cfg: McConfig, path, append: bool = False):
    """Per-replication estimates with full float precision."""
    new = not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RAW_FIELDS)
        for r in rows:
            for est in cfg.estimators:
                value, err, _ = r["results"][est.label]
                w.writerow([cfg.dgp.n, repr(float(cfg.dgp.rho)), r["rep"], r["seed"], est.label,
                            repr(r["beta0"]), "%.17g" % value, err])


def read_raw(path) -> dict:
    """Group a raw dump by ``(n, rho, estimator)`` into ordered estimate arrays."""
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["n"]), float(row["rho"]), row["estimator"])
            g = groups.setdefault(key, {"rep": [], "estimate": [], "beta0": float(row["beta0"]), "error": []})
            g["rep"].append(int(row["rep"]))
            g["estimate"].append(float(row["estimate"]))
            g["error"].append(row["error"])
    return groups


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

TABLE1_NS = (30, 50, 100)
TABLE1_RHOS = (0.0, 0.3, 0.5, 0.7)
TABLE2_N = 550
TABLE2_FAST_N = 200
# Denoised link rates of 0 or 1 are common in sparse networks; the logit of
# the clamp value then dominates their contribution (see the notes ledger).
TABLE2_CLAMP_EPS = 0.01


def table1_estimators():
    return (EstimatorConfig("fe", label="fe"), EstimatorConfig("kernel", label="kernel"),
            EstimatorConfig("nn1", label="nn1"))


def preset_table1(reps: int = 10_000, seed: int = 0, workers: int = 1, ns=TABLE1_NS, rhos=TABLE1_RHOS):
    """Gaussian homophily design on the ``n x rho`` grid with FE, kernel and NN1 estimators."""
    out = []
    for n in ns:
        for rho in rhos:
            # distinct master seed per cell, still a pure function of (seed, n, rho)
            cell_seed = int(np.random.SeedSequence([int(seed), int(n), int(round(rho * 1000))])
                            .generate_state(1, dtype=np.uint64)[0])
            out.append(McConfig(dgp=DgpSpec("gaussian-homophily", n=n, rho=rho), estimators=table1_estimators(),
                                reps=reps, seed=cell_seed, workers=workers, label=f"n={n} rho={rho}"))
    return out


def table2_estimators():
    return (EstimatorConfig("logit-mle", label="logit-mle"),
            EstimatorConfig("single-index", link="logistic", ni_const=0.5, clamp_eps=TABLE2_CLAMP_EPS, label="single-index"))


def preset_table2(reps: int = 10_000, seed: int = 0, workers: int = 1, fast: bool = False):
    """Calibrated logistic homophily design with the naive MLE and the single-index kernel estimator."""
    n = TABLE2_FAST_N if fast else TABLE2_N
    return [McConfig(dgp=DgpSpec("logistic-homophily", n=n), estimators=table2_estimators(), reps=reps,
                     seed=seed, workers=workers, label=f"logistic n={n}")]


PRESETS = {"table1": preset_table1, "table2": preset_table2}


def with_workers(cfgs, workers):
    return [replace(c, workers=workers) for c in cfgs]


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

_STATS = (("Bias", "bias"), ("Med Bias", "median_bias"), ("Std. Dev.", "sd"), ("IQR/1.349", "iqr"))


def _num(v, digits=3):
    if v is None or not np.isfinite(v):
        return "nan"
    return f"{v:.{digits}f}"


def format_table(summaries, layout: str = "plain") -> str:
    """Render summaries as aligned text in the ``table1``, ``table2`` or ``plain`` layout."""
    summaries = list(summaries)
    if layout == "plain":
        lines = [f"{'design':<22} {'estimator':<14} " + " ".join(f"{h:>10}" for h, _ in _STATS)
                 + f" {'failures':>8}"]
        for s in summaries:
            name = s.config.label or f"{s.config.dgp.kind} n={s.config.dgp.n}"
            for lab, e in s.estimators.items():
                lines.append(f"{name:<22} {lab:<14} " + " ".join(f"{_num(getattr(e, k), 4):>10}" for _, k in _STATS)
                             + f" {e.failures:>8}")
        return "\n".join(lines)
    if layout == "table1":
        labels = list(summaries[0].estimators) if summaries else [e.label for e in table1_estimators()]
        head1 = f"{'':>5} |" + "|".join(f"{h:^{8 * len(labels)}}" for h, _ in _STATS)
        head2 = f"{'rho':>5} |" + "|".join("".join(f"{lab:>8}" for lab in labels) for _ in _STATS)
        width = len(head2)
        lines = [head1, head2, "-" * width]
        ns = sorted({s.config.dgp.n for s in summaries})
        for n in ns:
            lines.append(f"n={n}".center(width))
            lines.append("-" * width)
            for s in sorted((s for s in summaries if s.config.dgp.n == n), key=lambda s: s.config.dgp.rho):
                cells = "|".join("".join(f"{_num(getattr(s.estimators[lab], k)):>8}" for lab in labels)
                                 for _, k in _STATS)
                lines.append(f"{s.config.dgp.rho:>5.1f} |" + cells)
            lines.append("-" * width)
        return "\n".join(lines)
    if layout == "table2":
        lines = [f"{'estimator':<14}" + "".join(f"{h:>11}" for h, _ in _STATS) + f"{'failures':>10}"]
        for s in summaries:
            for lab, e in s.estimators.items():
                lines.append(f"{lab:<14}" + "".join(f"{_num(getattr(e, k), 4):>11}" for _, k in _STATS)
                             + f"{e.failures:>10}")
            lines.append(f"n={s.config.dgp.n}, reps={s.reps}, mean degree {s.mean_degree:.1f}")
        return "\n".join(lines)
    raise ParameterError(f"unknown layout {layout!r}")
