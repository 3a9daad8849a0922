"""Ordering of solutions under ordered data: the monotone-iteration harness.

Given two problems sharing grid, Hurst parameter and shifts, with ordered
terminals, ordered generators and the second generator increasing in its
delayed and anticipated arguments, the solutions satisfy Y1 <= Y2.  The
harness verifies the hypotheses by sampling, reproduces the proof's
monotone chain (solve under the second generator with frozen arguments
from the previous outer iterate, repeatedly), and measures the ordering
pointwise.

Generators here use the reduced signature ``f(t, u, y, z, phi)``: no
delayed-Z and no anticipated-Z dependence.  The harness hard-codes this
restriction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ValidationError
from .fbm import FbmPathSet, TimeGrid, sample_independent
from .frcalc import BetaNormConfig, beta_norm
from .problem import DelayStructure, GeneratorSpec, ProblemSpec, TerminalData
from .regression import RegressionBasis
from .solver import SolutionPair, solve

#: geometric decay bound of the outer chain, with artifact slack
OUTER_DECAY_BOUND = 2.0 / 3.0
OUTER_DECAY_SLACK = 0.1


@dataclass
class ForwardProcess:
    """Pathwise Euler construction eta_{i+1} = eta_i + b(t_i) delta + sigma(t_i) dB_i."""

    eta0: float
    values: np.ndarray
    grid: TimeGrid


def forward_process(eta0: float, b, sigma, paths: FbmPathSet) -> ForwardProcess:
    """Euler forward process driven by the sampled paths.

    ``b`` and ``sigma`` are deterministic functions of time; ``sigma`` must
    be strictly positive on the grid.
    """
    grid = paths.grid
    t = grid.points[:-1]
    bv = np.asarray(b(t), dtype=float) * np.ones_like(t)
    sv = np.asarray(sigma(t), dtype=float) * np.ones_like(t)
    bad = np.flatnonzero(sv <= 0.0)
    if bad.size:
        raise ValidationError(
            f"sigma must be positive on the grid; sigma({t[bad[0]]}) = {sv[bad[0]]}"
        )
    inc = paths.increments()
    values = np.empty_like(paths.paths)
    values[:, 0] = eta0
    np.cumsum(bv * grid.delta + sv * inc, axis=1, out=values[:, 1:])
    values[:, 1:] += eta0
    return ForwardProcess(float(eta0), values, grid)


def reduced_generator(f, lipschitz_c: float) -> GeneratorSpec:
    """Wrap a reduced-signature generator f(t, u, y, z, phi) into a problem generator."""
    def full(t, u, v, y, z, phi, psi):
        return f(t, u, y, z, phi)
    return GeneratorSpec(full, lipschitz_c)


@dataclass
class ComparisonPair:
    """Two problems sharing grid, Hurst parameter and shifts.

    ``f1_reduced`` / ``f2_reduced`` keep the reduced callables so the
    hypothesis checks can probe exactly the arguments the ordering theorem
    constrains.  ``monotonicity_declared`` asserts that f2 is increasing in
    the delayed and anticipated slots; :func:`verify_hypotheses` spot-checks
    it.
    """

    spec1: ProblemSpec
    spec2: ProblemSpec
    f1_reduced: callable
    f2_reduced: callable
    monotonicity_declared: bool = True

    def __post_init__(self):
        if self.spec1.grid != self.spec2.grid:
            raise ValidationError("comparison requires a shared grid")
        if self.spec1.hurst != self.spec2.hurst:
            raise ValidationError("comparison requires a shared Hurst parameter")
        if self.spec1.delays is not self.spec2.delays:
            d1, d2 = self.spec1.delays, self.spec2.delays
            t = self.spec1.grid.points[: self.spec1.grid.n_horizon + 1]
            for a, b in zip(d1.shift_values(t), d2.shift_values(t)):
                if not np.allclose(a, b):
                    raise ValidationError("comparison requires shared shift functions")

    @classmethod
    def from_reduced(cls, grid: TimeGrid, hurst: float, delays: DelayStructure,
                     f1, f2, lipschitz_c: float,
                     terminal1: TerminalData, terminal2: TerminalData,
                     m_const: float = 2.0) -> "ComparisonPair":
        spec1 = ProblemSpec(grid, hurst, delays, reduced_generator(f1, lipschitz_c),
                            terminal1, m_const)
        spec2 = ProblemSpec(grid, hurst, delays, reduced_generator(f2, lipschitz_c),
                            terminal2, m_const)
        return cls(spec1, spec2, f1, f2)


def verify_hypotheses(pair: ComparisonPair, n_samples: int = 300, seed: int = 0) -> bool:
    """Spot-check the ordering hypotheses; fail fast with a witness.

    (i) f2 increasing in the delayed argument u and the anticipated
    argument phi; (ii) xi1 <= xi2 pathwise on the terminal band; (iii)
    f1 <= f2 at sampled arguments.  A counterexample raises
    ``ValidationError`` carrying the witness arguments.
    """
    rng = np.random.default_rng(seed)
    grid = pair.spec1.grid
    t_pool = grid.points[: grid.n_horizon + 1]
    tol = 1e-9

    for _ in range(n_samples):
        t = float(rng.choice(t_pool))
        u, y, z, phi = rng.normal(size=4)
        bump = abs(rng.normal()) + 1e-6
        f2 = pair.f2_reduced
        base = float(np.asarray(f2(t, np.atleast_1d(u), np.atleast_1d(y),
                                    np.atleast_1d(z), np.atleast_1d(phi)))[0])
        up_u = float(np.asarray(f2(t, np.atleast_1d(u + bump), np.atleast_1d(y),
                                    np.atleast_1d(z), np.atleast_1d(phi)))[0])
        if up_u < base - tol:
            raise ValidationError(
                "f2 is not increasing in the delayed argument",
                witnesses=[{"t": t, "u": u, "u_up": u + bump, "y": y, "z": z,
                            "phi": phi, "f2": base, "f2_up": up_u}],
            )
        up_phi = float(np.asarray(f2(t, np.atleast_1d(u), np.atleast_1d(y),
                                      np.atleast_1d(z), np.atleast_1d(phi + bump)))[0])
        if up_phi < base - tol:
            raise ValidationError(
                "f2 is not increasing in the anticipated argument",
                witnesses=[{"t": t, "u": u, "y": y, "z": z, "phi": phi,
                            "phi_up": phi + bump, "f2": base, "f2_up": up_phi}],
            )
        f1_val = float(np.asarray(pair.f1_reduced(
            t, np.atleast_1d(u), np.atleast_1d(y), np.atleast_1d(z),
            np.atleast_1d(phi)))[0])
        if f1_val > base + tol:
            raise ValidationError(
                "generator ordering f1 <= f2 fails",
                witnesses=[{"t": t, "u": u, "y": y, "z": z, "phi": phi,
                            "f1": f1_val, "f2": base}],
            )

    probe = sample_independent(grid, pair.spec1.hurst, 64, seed)
    xi1, _ = pair.spec1.terminal.values(probe)
    xi2, _ = pair.spec2.terminal.values(probe)
    gap = xi1 - xi2
    if gap.max() > tol:
        k, i = np.unravel_index(np.argmax(gap), gap.shape)
        raise ValidationError(
            "terminal ordering xi1 <= xi2 fails",
            witnesses=[{"path": int(k), "t": float(grid.points[grid.n_horizon + i]),
                        "xi1": float(xi1[k, i]), "xi2": float(xi2[k, i])}],
        )
    return True


@dataclass
class OrderingReport:
    """Pointwise ordering measurement over [0, T]."""

    violation_fraction: float
    max_violation: float
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "violation_fraction": self.violation_fraction,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
        }


def check_ordering(a: SolutionPair, b: SolutionPair, tol: float) -> OrderingReport:
    """Fraction of (path, grid point) pairs on [0, T] where a.y > b.y + tol."""
    if a.grid != b.grid:
        raise ValueError("solutions live on different grids")
    n_t = a.grid.n_horizon
    ya = a.y[:, : n_t + 1]
    yb = b.y[:, : n_t + 1]
    excess = ya - yb - tol
    return OrderingReport(
        violation_fraction=float(np.mean(excess > 0.0)),
        max_violation=float((ya - yb).max()),
        tolerance=float(tol),
    )


def monotone_iterate(pair: ComparisonPair, paths: FbmPathSet,
                     basis: RegressionBasis | None = None, n_outer: int = 12,
                     tol_outer: float = 1e-3, solver_tol: float = 1e-4,
                     max_iter: int = 30) -> list[SolutionPair]:
    """Reproduce the proof's chain: Y1, then successive solves under f2.

    The first element solves the first problem.  Every following element
    solves the second problem with the delayed and anticipated arguments
    frozen to the previous element, so the chain increases pointwise and
    its differences decay geometrically toward the second solution.  The
    chain stops when the unweighted exponential norm of consecutive Y
    differences falls below ``tol_outer`` or after ``n_outer`` steps.
    """
    basis = basis or RegressionBasis()
    y1, _ = solve(pair.spec1, paths, basis, tol=solver_tol, max_iter=max_iter)
    chain = [y1]
    current = y1
    cfg = BetaNormConfig(0.0, weighted=False, hurst=pair.spec1.hurst)
    for _ in range(n_outer):
        nxt, _ = solve(pair.spec2, paths, basis, tol=solver_tol, max_iter=max_iter,
                       validate=False, reference=current)
        chain.append(nxt)
        diff = beta_norm(nxt.y - current.y, cfg, pair.spec1.grid.horizon_t,
                         grid=pair.spec1.grid)
        current = nxt
        if diff < tol_outer:
            break
    return chain


def outer_decay_ratios(chain: list[SolutionPair], hurst: float) -> list[float]:
    """Norm ratios of successive outer differences, skipping the Y1 -> Y3 jump."""
    grid = chain[0].grid
    cfg = BetaNormConfig(0.0, weighted=False, hurst=hurst)
    diffs = [
        beta_norm(b.y - a.y, cfg, grid.horizon_t, grid=grid)
        for a, b in zip(chain[1:-1], chain[2:])
    ]
    return [d2 / d1 if d1 > 0 else 0.0 for d1, d2 in zip(diffs[:-1], diffs[1:])]


class MonotoneComparison(BaseEstimator):
    """Estimator-style wrapper around the ordering harness.

    ``fit`` verifies the hypotheses, runs both direct solves and the
    monotone chain, and records an :class:`OrderingReport` comparing the
    two direct solutions at the configured tolerance.
    """

    def __init__(self, pair: ComparisonPair, basis: RegressionBasis | None = None,
                 tol: float = 1e-6, n_outer: int = 12, tol_outer: float = 1e-3):
        self.pair = pair
        self.basis = basis
        self.tol = tol
        self.n_outer = n_outer
        self.tol_outer = tol_outer

    def fit(self, paths: FbmPathSet, y=None):
        verify_hypotheses(self.pair)
        basis = self.basis or RegressionBasis()
        self.solution1_, _ = solve(self.pair.spec1, paths, basis)
        self.solution2_, _ = solve(self.pair.spec2, paths, basis)
        self.report_ = check_ordering(self.solution1_, self.solution2_, self.tol)
        self.chain_ = monotone_iterate(self.pair, paths, basis,
                                       n_outer=self.n_outer, tol_outer=self.tol_outer)
        self.decay_ratios_ = outer_decay_ratios(self.chain_, self.pair.spec1.hurst)
        return self
