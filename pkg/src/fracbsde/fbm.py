"""Exact sampling of fractional Brownian motion on uniform time grids.

The covariance kernel is R_H(s, t) = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2.
Two exact samplers are provided (dense Cholesky and FFT circulant
embedding of the stationary increments), plus an independent-increment
driver with the same marginal variances, used by the backward solver to
realise quasi-conditional expectations (see :mod:`fracbsde.solver`).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.linalg import lapack, toeplitz

from .errors import NumericalError, ValidationError

_GRID_RTOL = 1e-9

#: eigenvalues of the circulant embedding more negative than this abort
CIRCULANT_EIG_TOL = -1e-10


def check_hurst(h: float, *, solver: bool = False) -> float:
    """Validate a Hurst parameter.

    Plain usage requires 0 < H < 1.  With ``solver=True`` the long-memory
    regime of the backward equations is enforced, 1/2 <= H < 1; H = 1/2 is
    admitted so the standard-Brownian reduction can run through the same
    pipeline.
    """
    h = float(h)
    if not 0.0 < h < 1.0:
        raise ValidationError(f"Hurst parameter must lie in (0, 1), got {h}")
    if solver and not 0.5 <= h < 1.0:
        raise ValidationError(
            f"solver-facing Hurst parameter must lie in [1/2, 1), got {h}"
        )
    return h


class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_n = t_max with a marked horizon.

    ``horizon_t`` is the time T splitting the active interval [0, T] from
    the terminal band [T, T + K]; it must land on a grid point.  Non-uniform
    grids are rejected: the circulant sampler and the stationary-increment
    variance used by the solver both require equal spacing.
    """

    def __init__(self, t_max: float, n_steps: int, horizon_t: float | None = None):
        t_max = float(t_max)
        n_steps = int(n_steps)
        if t_max <= 0.0:
            raise ValidationError(f"t_max must be positive, got {t_max}")
        if n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
        self.t_max = t_max
        self.n_steps = n_steps
        self.points = np.linspace(0.0, t_max, n_steps + 1)
        self.delta = t_max / n_steps
        if horizon_t is None:
            horizon_t = t_max
        self.horizon_t = float(horizon_t)
        if not 0.0 < self.horizon_t <= t_max:
            raise ValidationError(
                f"horizon T must lie in (0, t_max], got T={horizon_t}, t_max={t_max}"
            )
        self.n_horizon = self.index_of(self.horizon_t)

    @classmethod
    def from_horizon(cls, horizon_t: float, lookahead_k: float, n_steps: int) -> "TimeGrid":
        """Build the grid on [0, T + K] with T on a grid point."""
        return cls(float(horizon_t) + float(lookahead_k), n_steps, horizon_t)

    @property
    def lookahead_k(self) -> float:
        return self.t_max - self.horizon_t

    def index_of(self, t: float) -> int:
        """Index of a grid point; ``ValueError`` if t is off the grid."""
        r = float(t) / self.delta
        i = int(round(r))
        if i < 0 or i > self.n_steps or abs(r - i) > _GRID_RTOL * max(1.0, abs(r)) + 1e-12:
            raise ValueError(f"time {t} is not a grid point (delta={self.delta})")
        return i

    def __eq__(self, other):
        return (
            isinstance(other, TimeGrid)
            and self.n_steps == other.n_steps
            and abs(self.t_max - other.t_max) <= _GRID_RTOL * self.t_max
            and abs(self.horizon_t - other.horizon_t) <= _GRID_RTOL * self.t_max
        )

    def __hash__(self):
        return hash((self.n_steps, round(self.t_max, 12), round(self.horizon_t, 12)))

    def __repr__(self):
        return (
            f"TimeGrid(t_max={self.t_max}, n_steps={self.n_steps}, "
            f"horizon_t={self.horizon_t})"
        )


def covariance(s, t, h: float):
    """fBm covariance R_H(s, t) = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2.

    Accepts scalars or arrays; negative times raise ``ValueError``.
    """
    h = check_hurst(h)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0.0) or np.any(t < 0.0):
        raise ValueError("covariance requires nonnegative times")
    out = 0.5 * (t ** (2 * h) + s ** (2 * h) - np.abs(t - s) ** (2 * h))
    return float(out) if out.ndim == 0 else out


def build_covariance_matrix(grid: TimeGrid, h: float) -> np.ndarray:
    """Tabulate R_H on grid x grid; row/column 0 are identically zero."""
    t = grid.points
    return covariance(t[:, None], t[None, :], h)


def fgn_autocorrelation(lag, h: float):
    """Autocorrelation of unit-spacing fractional Gaussian noise."""
    k = np.abs(np.asarray(lag, dtype=float))
    out = 0.5 * ((k + 1) ** (2 * h) + np.abs(k - 1) ** (2 * h) - 2 * k ** (2 * h))
    return float(out) if out.ndim == 0 else out


def increment_covariance(grid: TimeGrid, h: float) -> np.ndarray:
    """Exact covariance matrix of the n grid increments of fBm.

    Toeplitz with entries delta^{2H} * rho(|i-j|); this matrix doubles as
    the exact quadrature weight for the fractional inner product (see
    :func:`fracbsde.frcalc.inner_product`).
    """
    h = check_hurst(h)
    first = grid.delta ** (2 * h) * fgn_autocorrelation(np.arange(grid.n_steps), h)
    return toeplitz(first)


@dataclass
class FbmPathSet:
    """Sampled paths: ``paths[k, i]`` is path k at grid point t_i.

    Column 0 is identically zero and the set is reproducible bit-exactly
    from (seed, method, grid, hurst).
    """

    paths: np.ndarray
    hurst: float
    seed: int
    method: str
    grid: TimeGrid = field(repr=False)

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=float)
        if self.paths.ndim != 2 or self.paths.shape[1] != self.grid.n_steps + 1:
            raise ValidationError(
                f"paths must be (n_paths, {self.grid.n_steps + 1}), got {self.paths.shape}"
            )
        if not np.all(self.paths[:, 0] == 0.0):
            raise ValidationError("paths must start at zero (B_0 = 0)")
        if not np.all(np.isfinite(self.paths)):
            raise ValidationError("paths contain non-finite values")

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)

    def empirical_covariance(self) -> np.ndarray:
        """Mean of outer products across paths (the process is centred)."""
        return self.paths.T @ self.paths / self.n_paths


def _path_normals(seed: int, path_index: int, count: int) -> np.ndarray:
    """Standard normals for one path from a counter-derived substream.

    Each path owns a Philox stream keyed by (seed, path index), so batches
    can be produced in any order or in parallel and still merge into the
    same path set.
    """
    key = (int(seed) % (1 << 64)) * (1 << 64) + int(path_index)
    return Generator(Philox(key=key)).standard_normal(count)


def sample_cholesky(grid: TimeGrid, h: float, n_paths: int, seed: int) -> FbmPathSet:
    """Exact fBm sampling through a Cholesky factor of the increment covariance.

    Increments are drawn jointly Gaussian with the exact Toeplitz covariance
    and prefix-summed to path levels, which keeps t = 0 exact and the factor
    well conditioned.
    """
    h = check_hurst(h)
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    sigma = increment_covariance(grid, h)
    chol, info = lapack.dpotrf(sigma, lower=1)
    if info != 0:
        raise NumericalError(
            "Cholesky factorisation of the increment covariance failed at "
            f"pivot index {info - 1} (matrix numerically not PSD)"
        )
    n = grid.n_steps
    z = np.empty((n_paths, n))
    for k in range(n_paths):
        z[k] = _path_normals(seed, k, n)
    increments = z @ np.tril(chol).T
    paths = np.zeros((n_paths, n + 1))
    np.cumsum(increments, axis=1, out=paths[:, 1:])
    return FbmPathSet(paths, h, int(seed), "cholesky", grid)


def circulant_eigenvalues(n: int, h: float) -> np.ndarray:
    """Eigenvalues of the circulant embedding of unit-spacing fGn.

    Values in [CIRCULANT_EIG_TOL, 0) are clipped to zero (rounding noise);
    anything more negative raises ``NumericalError``.
    """
    k = np.arange(n + 1)
    row = np.concatenate([fgn_autocorrelation(k, h), fgn_autocorrelation(k[1:-1][::-1], h)])
    lam = np.fft.fft(row).real
    worst = lam.min()
    if worst < CIRCULANT_EIG_TOL:
        raise NumericalError(
            f"circulant embedding has eigenvalue {worst:.3e} below tolerance "
            f"{CIRCULANT_EIG_TOL:.1e} (n={n}, H={h})"
        )
    return np.where(lam < 0.0, 0.0, lam)


def sample_circulant(grid: TimeGrid, h: float, n_paths: int, seed: int) -> FbmPathSet:
    """Exact fBm sampling by FFT circulant embedding of the fGn increments.

    O(n log n) per path.  Unit-spacing noise is generated and scaled by
    delta^H (self-similarity), so the eigenvalue tolerance check is applied
    on O(1)-sized quantities.
    """
    h = check_hurst(h)
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    n = grid.n_steps
    lam = circulant_eigenvalues(n, h)
    m2 = 2 * n
    w = np.empty((n_paths, m2), dtype=complex)
    half = np.sqrt(lam[1:n] / 2.0)
    for k in range(n_paths):
        z = _path_normals(seed, k, m2)
        w[k, 0] = np.sqrt(lam[0]) * z[0]
        w[k, n] = np.sqrt(lam[n]) * z[1]
        w[k, 1:n] = half * (z[2:n + 1] + 1j * z[n + 1:])
        w[k, n + 1:] = np.conj(w[k, 1:n][::-1])
    noise = np.sqrt(m2) * np.fft.ifft(w, axis=1).real[:, :n]
    increments = noise * grid.delta ** h
    paths = np.zeros((n_paths, n + 1))
    np.cumsum(increments, axis=1, out=paths[:, 1:])
    return FbmPathSet(paths, h, int(seed), "circulant", grid)


def sample_independent(grid: TimeGrid, h: float, n_paths: int, seed: int) -> FbmPathSet:
    """Driver paths with independent N(0, delta^{2H}) increments.

    Matches the fBm marginal variances t^{2H} on grid points but not the
    joint law for H != 1/2.  Least-squares regression over these paths
    estimates the quasi-conditional expectations under which the backward
    solver's martingale representation holds (Z = 1 for the terminal value
    of the driver itself); at H = 1/2 this is exact Brownian motion.
    """
    h = check_hurst(h)
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    n = grid.n_steps
    z = np.empty((n_paths, n))
    for k in range(n_paths):
        z[k] = _path_normals(seed, k, n)
    paths = np.zeros((n_paths, n + 1))
    np.cumsum(z * grid.delta ** h, axis=1, out=paths[:, 1:])
    return FbmPathSet(paths, h, int(seed), "independent", grid)


SAMPLERS = {
    "cholesky": sample_cholesky,
    "circulant": sample_circulant,
    "independent": sample_independent,
}


def sample(grid: TimeGrid, h: float, n_paths: int, seed: int, method: str = "cholesky") -> FbmPathSet:
    """Dispatch to a sampler by method name."""
    try:
        fn = SAMPLERS[method]
    except KeyError:
        raise ValidationError(
            f"unknown sampling method {method!r}; choose from {sorted(SAMPLERS)}"
        ) from None
    return fn(grid, h, n_paths, seed)


def export_paths(pathset: FbmPathSet, csv_path, manifest_path=None) -> None:
    """Write paths as CSV ``path_id,t,value`` plus a sidecar JSON manifest."""
    grid = pathset.grid
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "t", "value"])
        for k in range(pathset.n_paths):
            for i, t in enumerate(grid.points):
                writer.writerow([k, f"{t:.17g}", f"{pathset.paths[k, i]:.17g}"])
    if manifest_path is not None:
        manifest = {
            "seed": pathset.seed,
            "method": pathset.method,
            "hurst": pathset.hurst,
            "n_steps": grid.n_steps,
            "t_max": grid.t_max,
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
