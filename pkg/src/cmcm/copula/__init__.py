"""Copula families: constraints, CDFs, densities, gradients and sampling."""
from ._archimedean import archimedean, generator, h_function
from .core import (
    ARCHIMEDEAN, EPS, FAMILIES, CopulaModel, CopulaParams, constrain_on_tape,
    constrain_params, copula_cdf, copula_log_density, copula_log_density_grad,
    density_grid, dependence_measure, log_density_on_tape, normalize_family,
    pairwise_dependence, param_count, sample_copula, trivariate_gumbel_log_density,
    write_density_grid,
)
from ._elliptical import cholesky_from_cpc, cpc_from_corr, gaussian_copula_log_density_m

__all__ = [
    "ARCHIMEDEAN", "EPS", "FAMILIES", "CopulaModel", "CopulaParams", "archimedean",
    "cholesky_from_cpc", "constrain_on_tape", "constrain_params", "copula_cdf",
    "copula_log_density", "copula_log_density_grad", "cpc_from_corr", "density_grid",
    "dependence_measure", "gaussian_copula_log_density_m", "generator", "h_function",
    "log_density_on_tape", "normalize_family", "pairwise_dependence", "param_count",
    "sample_copula", "trivariate_gumbel_log_density", "write_density_grid",
]
