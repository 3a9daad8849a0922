"""Least-squares Monte-Carlo estimation of conditional expectations.

The estimator projects per-path targets onto a polynomial basis of the
driver state at a fixed time: the path level plus, optionally, the last k
increments.  It is a scikit-learn regressor, so it composes with the usual
tooling (``get_params``, cloning, pipelines), and the backward solver uses
it time step by time step.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import NumericalError

#: features are dropped when their sample standard deviation is below this
_CONST_TOL = 1e-12


@dataclass
class RegressionBasis:
    """Configuration of the conditional-expectation estimator.

    ``features`` is "fbm_level" (level only) or "fbm_level_plus_increments"
    (level plus the last ``n_increments`` grid increments).  The driver is
    Markov in these features for the independent-increment driver; for true
    fBm paths they are a truncated summary of the filtration and introduce
    an approximation error.
    """

    degree: int = 3
    features: str = "fbm_level_plus_increments"
    n_increments: int = 2
    ridge_lambda: float = 0.0

    def __post_init__(self):
        self.degree = int(self.degree)
        if not 0 <= self.degree <= 6:
            raise ValueError(f"degree must be in [0, 6], got {self.degree}")
        if self.features not in ("fbm_level", "fbm_level_plus_increments"):
            raise ValueError(f"unknown feature set {self.features!r}")
        self.n_increments = int(self.n_increments)
        if self.n_increments < 0:
            raise ValueError("n_increments must be >= 0")
        self.ridge_lambda = float(self.ridge_lambda)
        if self.ridge_lambda < 0.0:
            raise ValueError("ridge_lambda must be >= 0")

    @property
    def effective_increments(self) -> int:
        return self.n_increments if self.features == "fbm_level_plus_increments" else 0

    def n_basis_functions(self, n_features: int) -> int:
        from math import comb
        return comb(n_features + self.degree, self.degree)


def build_state_features(paths: np.ndarray, index: int, basis: RegressionBasis) -> np.ndarray:
    """Raw state matrix at a grid index: level column plus trailing increments."""
    cols = [paths[:, index]]
    for j in range(1, basis.effective_increments + 1):
        if index - j >= 0:
            cols.append(paths[:, index - j + 1] - paths[:, index - j])
    return np.column_stack(cols)


class PathRegressor(BaseEstimator, RegressorMixin):
    """Polynomial least-squares projection, optionally ridge-stabilised.

    Features are standardised (constant columns dropped) and expanded to
    all monomials of total degree <= ``degree`` including the intercept.
    The normal equations are solved by Cholesky; a rank-deficient system
    without ridge raises :class:`~fracbsde.errors.NumericalError` telling
    the caller to set ``ridge_lambda``.
    """

    def __init__(self, degree: int = 3, ridge_lambda: float = 0.0):
        self.degree = degree
        self.ridge_lambda = ridge_lambda

    def _expand(self, X: np.ndarray) -> np.ndarray:
        Xs = (X - self.mean_) / self.scale_
        Xs = Xs[:, self.keep_]
        n = X.shape[0]
        cols = [np.ones(n)]
        for combo in self.exponents_:
            c = np.ones(n)
            for j in combo:
                c = c * Xs[:, j]
            cols.append(c)
        return np.column_stack(cols)

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.ndim != 2:
            raise ValueError("X must be 2-D (n_paths, n_features)")
        y = np.asarray(y, dtype=float)
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.keep_ = sd > _CONST_TOL
        self.scale_ = np.where(self.keep_, sd, 1.0)
        m = int(self.keep_.sum())
        self.exponents_ = [
            combo
            for d in range(1, self.degree + 1)
            for combo in combinations_with_replacement(range(m), d)
        ]
        design = self._expand(X)
        gram = design.T @ design
        if self.ridge_lambda > 0.0:
            reg = self.ridge_lambda * np.eye(gram.shape[0])
            reg[0, 0] = 0.0  # never shrink the intercept
            gram = gram + reg
        try:
            factor = cho_factor(gram)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "normal equations are rank deficient; set ridge_lambda > 0 "
                f"on the regression basis ({exc})"
            ) from exc
        self._design = design
        self._factor = factor
        self.coef_ = cho_solve(factor, design.T @ y)
        self.fitted_ = design @ self.coef_
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._expand(X) @ self.coef_

    def project(self, y) -> np.ndarray:
        """Fitted values for new targets on the already-fitted design.

        The backward solver projects many target vectors at each
        conditioning time; reusing the stored factorisation makes each one
        two small matrix products.
        """
        y = np.asarray(y, dtype=float)
        coef = cho_solve(self._factor, self._design.T @ y)
        return self._design @ coef


def regress_conditional(targets, features, basis: RegressionBasis) -> np.ndarray:
    """Fitted values of the least-squares projection of targets onto the basis.

    ``features`` is the per-path state matrix at the conditioning time.
    Requires at least 10x more paths than basis functions so the projection
    is statistically meaningful.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if features.shape[0] != targets.shape[0]:
        raise ValueError(
            f"targets ({targets.shape[0]}) and features ({features.shape[0]}) "
            "must agree on the number of paths"
        )
    n_basis = basis.n_basis_functions(features.shape[1])
    if targets.shape[0] < 10 * n_basis:
        raise ValueError(
            f"need at least {10 * n_basis} paths for {n_basis} basis functions, "
            f"got {targets.shape[0]}"
        )
    reg = PathRegressor(degree=basis.degree, ridge_lambda=basis.ridge_lambda)
    return reg.fit(features, targets).fitted_
