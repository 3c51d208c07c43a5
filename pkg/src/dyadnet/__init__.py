"""Dyadic regression with nonparametric unobserved heterogeneity.

Pairwise-difference estimators that match agents on estimated
pseudo-distances, neighborhood denoising of the outcome matrix, Monte Carlo
tooling and a command-line front end.
"""

__version__ = "0.1.0"

from .core import (
    DimensionError,
    DyadicDataset,
    DyadnetError,
    KernelSpec,
    LinkSpec,
    ModelSpec,
    ParameterError,
    ValidationReport,
    build_covariates,
    validate_dataset,
)
from .simulate import DgpSpec, SimTruth, simulate, simulate_custom
from .matching import (
    PseudoDistanceMatrix,
    build_neighborhoods,
    d2_heteroskedastic,
    d2_homoskedastic,
    d_infty_matrix,
    denoise,
    denoise_row_average,
    denoise_unique_pairs,
    impute_sequential,
    pairwise_lsq,
    q2_matrix,
)
from .estimators import (
    BandwidthRule,
    EstimateReport,
    NeighborhoodConfig,
    bandwidth_rot,
    fe_additive_beta,
    g_hat,
    h_nonparametric,
    kernel_beta,
    logit_mle_beta,
    nn1_beta,
    partial_effects,
    single_index_beta,
)
from .io import ingest, write_dataset
from .harness import EstimatorConfig, McConfig, format_table, run_mc
