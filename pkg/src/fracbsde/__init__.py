"""Numerical laboratory for delayed and anticipated backward equations
driven by fractional Brownian motion: exact path sampling, fractional
calculus quadrature, a least-squares Monte-Carlo Picard solver with
contraction diagnostics, and a comparison-theorem harness."""

__version__ = "0.1.0"

from .comparison import (ComparisonPair, ForwardProcess, MonotoneComparison,
                         OrderingReport, check_ordering, forward_process,
                         monotone_iterate, verify_hypotheses)
from .errors import (FracBsdeError, NonConvergenceError, NumericalError,
                     ValidationError)
from .fbm import (FbmPathSet, TimeGrid, build_covariance_matrix, check_hurst,
                  covariance, export_paths, increment_covariance, sample,
                  sample_cholesky, sample_circulant, sample_independent)
from .frcalc import (BetaNormConfig, DiscreteProcess, beta_norm,
                     covariance_density, dh_derivative_deterministic, dh_weight,
                     inner_product, phi, product_formula_residual,
                     wiener_integral)
from .problem import (DelayStructure, GeneratorSpec, ProblemSpec, TerminalData,
                      ValidationReport, lipschitz_probe, theorem_beta,
                      validate_delays, validate_problem)
from .regression import PathRegressor, RegressionBasis, regress_conditional
from .solver import (ContractionSummary, IndexMaps, PicardDiagnostics,
                     PicardSolver, SolutionPair, contraction_ratio,
                     make_index_maps, picard_step, solve)

__all__ = [
    "BetaNormConfig", "ComparisonPair", "ContractionSummary", "DelayStructure",
    "DiscreteProcess", "FbmPathSet", "ForwardProcess", "FracBsdeError",
    "GeneratorSpec", "IndexMaps", "MonotoneComparison", "NonConvergenceError",
    "NumericalError", "OrderingReport", "PathRegressor", "PicardDiagnostics",
    "PicardSolver", "ProblemSpec", "RegressionBasis", "SolutionPair",
    "TerminalData", "TimeGrid", "ValidationError", "ValidationReport",
    "beta_norm", "build_covariance_matrix", "check_hurst", "check_ordering",
    "contraction_ratio", "covariance", "covariance_density",
    "dh_derivative_deterministic", "dh_weight", "export_paths",
    "forward_process", "increment_covariance", "inner_product",
    "lipschitz_probe", "make_index_maps", "monotone_iterate", "phi",
    "picard_step", "product_formula_residual", "regress_conditional", "sample",
    "sample_cholesky", "sample_circulant", "sample_independent", "solve",
    "theorem_beta", "validate_delays", "validate_problem", "verify_hypotheses",
    "wiener_integral",
]
