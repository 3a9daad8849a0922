"""Backward Picard iteration for the delayed/anticipated equation.

One Picard step applies the frozen-argument map: the delayed and
anticipated generator arguments are read from the previous iterate (the
anticipated ones through conditional-expectation regression), then a
single backward least-squares sweep recomputes (Y, Z).  Iteration stops
when the weighted pair norm of successive differences falls below the
tolerance; the per-iteration norms and their ratios are the contraction
diagnostics checked against the theoretical bound 1/sqrt(2).

Conditional-expectation semantics.  The sweep estimates E[. | F_t] by
regression across sampled paths.  On the independent-increment driver
(``sample_independent``) the regression realises the quasi-conditional
expectation under which the fractional martingale representation holds:
the terminal value of the driver itself has Z identically 1, and
deterministic data give Z identically 0.  On true fBm paths the same code
estimates classical conditional expectations, which for H > 1/2 differ
from the quasi-conditional ones (fBm increments are predictable from the
past); solutions then drift away from the fixed point of the fractional
theory.  The test suite pins both behaviours; the CLI defaults to the
independent driver.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import NonConvergenceError, NumericalError, ValidationError
from .fbm import FbmPathSet, TimeGrid
from .frcalc import BetaNormConfig, beta_norm
from .problem import DelayStructure, ProblemSpec, validate_problem
from .regression import PathRegressor, RegressionBasis, build_state_features

#: contraction bound of the fixed-point estimate, with artifact slack
CONTRACTION_BOUND = 1.0 / math.sqrt(2.0)
CONTRACTION_SLACK = 0.1

_TIE_TOL = 1e-9


@dataclass
class SolutionPair:
    """Discrete (Y, Z) fields over paths x grid points.

    On the terminal band [T, T + K] the fields equal (xi, eta) exactly;
    the solver re-pins them after every sweep.
    """

    y: np.ndarray
    z: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        shape = (self.y.shape[0], self.grid.n_steps + 1)
        if self.y.shape != shape or self.z.shape != shape:
            raise ValidationError(
                f"solution fields must both have shape {shape}, "
                f"got y{self.y.shape} z{self.z.shape}"
            )
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.z))):
            raise ValidationError("solution fields contain non-finite entries")

    def copy(self) -> "SolutionPair":
        return SolutionPair(self.y.copy(), self.z.copy(), self.grid)


@dataclass
class IndexMaps:
    """Nearest-grid-point indices of the four shifted times, per active index."""

    delayed_y: np.ndarray
    delayed_z: np.ndarray
    anticipated_y: np.ndarray
    anticipated_z: np.ndarray


def _nearest_index(tau: float, delta: float, tie_to_past: bool) -> int:
    r = tau / delta
    k = math.floor(r)
    frac = r - k
    if abs(frac - 0.5) < _TIE_TOL:
        return k if tie_to_past else k + 1
    return k if frac < 0.5 else k + 1


def make_index_maps(grid: TimeGrid, delays: DelayStructure) -> IndexMaps:
    """Discretise t - d1(t), t - d2(t), t + d3(t), t + d4(t) on the grid.

    Shifted times are rounded to the nearest grid point with ties resolved
    toward the past for delays and toward the future for anticipations, so
    the grid-level inclusions delayed <= i <= anticipated stay strict.
    Delayed indices clamp at 0 (times before the start read the initial
    value); anticipated indices must land inside the grid, which the shift
    validation guarantees.
    """
    n_t = grid.n_horizon
    t_active = grid.points[:n_t]
    d1v, d2v, d3v, d4v = delays.shift_values(t_active)
    maps = []
    for vals, sign, tie_to_past in ((d1v, -1.0, True), (d2v, -1.0, True),
                                    (d3v, +1.0, False), (d4v, +1.0, False)):
        idx = np.empty(n_t, dtype=int)
        for i in range(n_t):
            tau = t_active[i] + sign * vals[i]
            j = _nearest_index(tau, grid.delta, tie_to_past)
            if sign < 0:
                j = min(max(j, 0), i)
            else:
                if j > grid.n_steps:
                    raise RuntimeError(
                        f"anticipated time {tau} leaves the grid at index {i}; "
                        "shift validation should have rejected this"
                    )
                j = max(j, i)
            idx[i] = j
        maps.append(idx)
    return IndexMaps(*maps)


_MISSING = object()


class _SweepRegressions:
    """Per-time-index regression state reused across Picard iterations.

    The design depends only on the paths, so each conditioning time fits
    its factorisation once; every projection afterwards is two small
    matrix products.  At times where the state is degenerate (t = 0, where
    every path sits at zero) the projection is the plain mean.
    """

    def __init__(self, paths: FbmPathSet, basis: RegressionBasis):
        self.basis = basis
        self.paths = paths.paths
        self._regs: dict[int, PathRegressor | None] = {}
        n_basis = basis.n_basis_functions(1 + basis.effective_increments)
        if paths.n_paths < 10 * n_basis:
            raise ValidationError(
                f"need at least {10 * n_basis} paths for {n_basis} basis "
                f"functions, got {paths.n_paths}"
            )

    def project(self, index: int, targets: np.ndarray) -> np.ndarray:
        reg = self._regs.get(index, _MISSING)
        if reg is _MISSING:
            feats = build_state_features(self.paths, index, self.basis)
            if np.any(feats.std(axis=0) > 1e-12):
                reg = PathRegressor(self.basis.degree, self.basis.ridge_lambda)
                reg.fit(feats, targets)
            else:
                reg = None
            self._regs[index] = reg
        if reg is None:
            return np.full(targets.shape[0], targets.mean())
        return reg.project(targets)


def picard_step(prev: SolutionPair, spec: ProblemSpec, paths: FbmPathSet,
                basis: RegressionBasis, *, reference: SolutionPair | None = None,
                index_maps: IndexMaps | None = None,
                regressions: "_SweepRegressions | None" = None) -> SolutionPair:
    """One application of the frozen-argument map.

    Backward sweep for i = n_T - 1 .. 0: the delayed arguments are read
    directly from ``reference`` (default: ``prev``) at the mapped indices;
    the anticipated arguments are its regressed conditional expectations.
    Then

        Z_i = E^[(Y_{i+1} - E^[Y_{i+1}|F_i]) dB_i | F_i] / delta^{2H}
        Y_i = E^[Y_{i+1} | F_i] + f(t_i, u, v, Y-est, Z_i, phi, psi) * delta

    where the Y argument of the generator is the freshly regressed
    conditional mean (the current-slot estimates), and the Z denominator is
    the stationary increment variance delta^{2H}.  Centring the Z targets
    on the conditional mean changes nothing in exact arithmetic (the
    compensator has conditional mean zero under the independent driver)
    and collapses the Monte-Carlo variance; deterministic data then give
    Z = 0 to machine precision.  The terminal band is re-pinned to
    (xi, eta) after the sweep.
    """
    grid = spec.grid
    if paths.grid != grid:
        raise ValidationError("path set grid does not match the problem grid")
    reference = prev if reference is None else reference
    if index_maps is None:
        index_maps = make_index_maps(grid, spec.delays)
    if regressions is None:
        regressions = _SweepRegressions(paths, basis)
    n_t = grid.n_horizon
    delta = grid.delta
    var_inc = delta ** (2.0 * spec.hurst)
    xi, eta = spec.terminal.values(paths)

    y = np.empty_like(prev.y)
    z = np.empty_like(prev.z)
    y[:, n_t:] = xi
    z[:, n_t:] = eta
    t_active = grid.points

    for i in range(n_t - 1, -1, -1):
        y_next = y[:, i + 1]
        m_hat = regressions.project(i, y_next)
        d_b = paths.paths[:, i + 1] - paths.paths[:, i]
        z_i = regressions.project(i, (y_next - m_hat) * d_b) / var_inc
        u = reference.y[:, index_maps.delayed_y[i]]
        v = reference.z[:, index_maps.delayed_z[i]]
        j3 = index_maps.anticipated_y[i]
        j4 = index_maps.anticipated_z[i]
        phi_hat = reference.y[:, i] if j3 == i else regressions.project(i, reference.y[:, j3])
        psi_hat = reference.z[:, i] if j4 == i else regressions.project(i, reference.z[:, j4])
        drift = np.asarray(
            spec.generator.f(t_active[i], u, v, m_hat, z_i, phi_hat, psi_hat),
            dtype=float,
        ) * np.ones_like(m_hat)
        if not np.all(np.isfinite(drift)):
            bad = int(np.flatnonzero(~np.isfinite(drift))[0])
            raise NumericalError(
                f"generator returned non-finite output at time index {i}, path {bad}"
            )
        y[:, i] = m_hat + drift * delta
        z[:, i] = z_i
    return SolutionPair(y, z, grid)


@dataclass
class PicardDiagnostics:
    """Per-iteration difference norms of the fixed-point iteration.

    ``diff_norms[k]`` is the pair norm ||Y^{k+1}-Y^k||_beta (unweighted)
    + ||Z^{k+1}-Z^k||_beta (t^{2H-1}-weighted) after iteration k + 1, with
    the exponential weight normalised by its maximum so large beta stays
    finite; ratios are scale invariant either way.
    """

    iteration_count: int
    beta: float
    diff_norms: list[float]
    converged: bool
    tol: float

    @property
    def ratios(self) -> list[float]:
        out = []
        for a, b in zip(self.diff_norms[:-1], self.diff_norms[1:]):
            out.append(b / a if a > 0 else 0.0)
        return out

    @property
    def noise_floor(self) -> float:
        return 10.0 * self.tol

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "iterations": self.iteration_count,
            "diff_norms": list(self.diff_norms),
            "ratios": self.ratios,
            "converged": self.converged,
            "tol": self.tol,
        }


def _pair_norm(dy: np.ndarray, dz: np.ndarray, spec: ProblemSpec, beta: float) -> float:
    grid = spec.grid
    t = grid.points
    scale = math.exp(beta * grid.t_max)
    w_y = np.exp(beta * t) / scale
    w_z = w_y * np.where(t > 0.0, t, 1.0) ** (2.0 * spec.hurst - 1.0) * (t > 0.0)
    ny = math.sqrt(np.trapezoid(w_y * (dy ** 2).mean(axis=0), t))
    nz = math.sqrt(np.trapezoid(w_z * (dz ** 2).mean(axis=0), t))
    return ny + nz


def initial_guess(spec: ProblemSpec, paths: FbmPathSet) -> SolutionPair:
    """Backward-constant extension of xi_T, with z = 0 before the horizon."""
    n_t = spec.grid.n_horizon
    xi, eta = spec.terminal.values(paths)
    y = np.tile(xi[:, :1], (1, spec.grid.n_steps + 1))
    y[:, n_t:] = xi
    z = np.zeros_like(y)
    z[:, n_t:] = eta
    return SolutionPair(y, z, spec.grid)


def solve(spec: ProblemSpec, paths: FbmPathSet, basis: RegressionBasis | None = None,
          beta: float | None = None, tol: float = 1e-3, max_iter: int = 15,
          *, validate: bool = True,
          reference: SolutionPair | None = None) -> tuple[SolutionPair, PicardDiagnostics]:
    """Iterate the frozen-argument map to its fixed point.

    ``beta`` defaults to the validated contraction weight
    12 C^2 (2 L_hat + 1) M + 4 / M.  Stops when the pair norm of successive
    differences drops below ``tol``.  Reaching ``max_iter`` with the norm
    still above the noise floor (10 tol) *and* non-decreasing raises
    :class:`~fracbsde.errors.NonConvergenceError` carrying the diagnostics;
    a still-decreasing run returns with ``converged=False``.

    ``reference``, when given, freezes the delayed/anticipated arguments to
    a fixed solution instead of the running iterate (used by the comparison
    harness's outer chain).
    """
    if validate:
        report = validate_problem(spec)
        if beta is None:
            beta = report.beta
    if beta is None:
        beta = spec.beta()
    basis = basis or RegressionBasis()
    index_maps = make_index_maps(spec.grid, spec.delays)
    regressions = _SweepRegressions(paths, basis)
    current = initial_guess(spec, paths)
    diffs: list[float] = []
    converged = False
    for _ in range(max_iter):
        nxt = picard_step(current, spec, paths, basis, reference=reference,
                          index_maps=index_maps, regressions=regressions)
        diffs.append(_pair_norm(nxt.y - current.y, nxt.z - current.z, spec, beta))
        current = nxt
        if diffs[-1] < tol:
            converged = True
            break
    diag = PicardDiagnostics(len(diffs), float(beta), diffs, converged, tol)
    if not converged:
        stalled = len(diffs) >= 2 and diffs[-1] >= diffs[-2] and diffs[-1] > diag.noise_floor
        if stalled:
            raise NonConvergenceError(
                f"Picard iteration stalled at diff {diffs[-1]:.3e} after "
                f"{len(diffs)} iterations (tol {tol:g})",
                diagnostics=diag,
            )
    return current, diag


@dataclass
class ContractionSummary:
    """Ratios of successive difference norms against the 1/sqrt(2) bound."""

    ratios: list[float]
    pre_floor_ratios: list[float]
    exceed_count: int
    bound: float
    noise_floor: float

    def to_dict(self) -> dict:
        return {
            "ratios": self.ratios,
            "pre_floor_ratios": self.pre_floor_ratios,
            "exceed_count": self.exceed_count,
            "bound": self.bound,
            "noise_floor": self.noise_floor,
        }


def contraction_ratio(diag: PicardDiagnostics) -> ContractionSummary:
    """Summarise the contraction behaviour recorded by :func:`solve`.

    Only ratios whose predecessor norm exceeds the noise floor (10 tol)
    are held against the bound 1/sqrt(2) + 0.1; below the floor the
    differences are Monte-Carlo noise.
    """
    bound = CONTRACTION_BOUND + CONTRACTION_SLACK
    ratios = diag.ratios
    pre_floor = [
        r for r, prev in zip(ratios, diag.diff_norms[:-1]) if prev > diag.noise_floor
    ]
    exceed = sum(1 for r in pre_floor if r > bound)
    return ContractionSummary(ratios, pre_floor, exceed, bound, diag.noise_floor)


class PicardSolver(BaseEstimator):
    """Estimator-style wrapper: configure once, ``fit`` on a path set.

    After ``fit``, ``solution_`` holds the (Y, Z) pair, ``diagnostics_``
    the Picard record, and ``y_`` / ``z_`` alias the fields.
    """

    def __init__(self, problem: ProblemSpec, basis: RegressionBasis | None = None,
                 beta: float | None = None, tol: float = 1e-3, max_iter: int = 15):
        self.problem = problem
        self.basis = basis
        self.beta = beta
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, paths: FbmPathSet, y=None):
        solution, diagnostics = solve(
            self.problem, paths, self.basis, self.beta, self.tol, self.max_iter
        )
        self.solution_ = solution
        self.diagnostics_ = diagnostics
        self.y_ = solution.y
        self.z_ = solution.z
        return self

    def contraction_summary(self) -> ContractionSummary:
        return contraction_ratio(self.diagnostics_)


def beta_norm_pair(solution_diff: SolutionPair, spec: ProblemSpec, beta: float) -> float:
    """Pair norm of a difference field, as used for convergence decisions."""
    return _pair_norm(solution_diff.y, solution_diff.z, spec, beta)


def write_solution_csv(solution: SolutionPair, path) -> None:
    """Write ``t,mean_Y,std_Y,mean_Z,std_Z`` rows over the grid."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mean_Y", "std_Y", "mean_Z", "std_Z"])
        for i, t in enumerate(solution.grid.points):
            writer.writerow([
                f"{t:.17g}",
                f"{solution.y[:, i].mean():.17g}",
                f"{solution.y[:, i].std():.17g}",
                f"{solution.z[:, i].mean():.17g}",
                f"{solution.z[:, i].std():.17g}",
            ])


def write_diagnostics_json(diag: PicardDiagnostics, path, extra: dict | None = None) -> None:
    payload = diag.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
