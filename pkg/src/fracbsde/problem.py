"""Specification and validation of a delayed/anticipated backward problem.

A problem is a time grid on [0, T + K], a Hurst parameter, four shift
functions (two delays looking into [0, t], two anticipations looking into
[t, T + K]), a generator with declared Lipschitz structure, and terminal
fields (xi, eta) pinned on [T, T + K].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .fbm import FbmPathSet, TimeGrid, check_hurst

#: slack applied to grid-level inequality checks
_D1_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    """Outcome of a validation pass; ``l_hat`` / ``beta`` where applicable."""

    passed: bool
    checks: list[CheckResult] = field(default_factory=list)
    l_hat: float | None = None
    beta: float | None = None
    lipschitz_estimate: float | None = None

    def summary(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]
        return "\n".join(lines)


def _as_shift_values(fn, t: np.ndarray) -> np.ndarray:
    vals = np.asarray(fn(t), dtype=float)
    return vals * np.ones_like(t)


@dataclass
class DelayStructure:
    """Shift functions d1..d4 on [0, T] with lookahead bound K.

    d1, d2 delay (evaluation at t - d_i(t), clamped at 0 by the solver's
    index maps), d3, d4 anticipate (evaluation at t + d_i(t), which must
    stay within T + K).  ``l_hat`` is the grid-certified dominance constant
    filled in by :func:`validate_delays`.
    """

    d1: callable
    d2: callable
    d3: callable
    d4: callable
    lookahead_k: float
    l_hat: float | None = None

    def __post_init__(self):
        self.lookahead_k = float(self.lookahead_k)
        if self.lookahead_k < 0.0:
            raise ValidationError(f"K must be >= 0, got {self.lookahead_k}")

    @classmethod
    def none(cls) -> "DelayStructure":
        z = lambda t: np.zeros_like(np.asarray(t, dtype=float))
        return cls(z, z, z, z, 0.0)

    @classmethod
    def constant(cls, d1: float = 0.0, d2: float = 0.0, d3: float = 0.0,
                 d4: float = 0.0, lookahead_k: float = 0.0) -> "DelayStructure":
        def make(c):
            return lambda t: np.full_like(np.asarray(t, dtype=float), float(c))
        return cls(make(d1), make(d2), make(d3), make(d4), lookahead_k)

    @classmethod
    def linear(cls, a1: float = 0.0, a2: float = 0.0, a3: float = 0.0,
               a4: float = 0.0, lookahead_k: float = 0.0) -> "DelayStructure":
        """Proportional shifts d_i(t) = a_i * t."""
        def make(a):
            return lambda t: float(a) * np.asarray(t, dtype=float)
        return cls(make(a1), make(a2), make(a3), make(a4), lookahead_k)

    def shift_values(self, t: np.ndarray):
        return tuple(_as_shift_values(f, t) for f in (self.d1, self.d2, self.d3, self.d4))


def validate_delays(delays: DelayStructure, grid: TimeGrid) -> ValidationReport:
    """Check the pointwise shift conditions and certify the dominance constant.

    Pointwise on the active grid [0, T]: all shifts must be nonnegative
    (delayed times below zero are handled by clamping, so negativity of the
    *shift function itself* is the only delay-side failure) and anticipated
    times t + d3(t), t + d4(t) must stay within T + K.  Violations raise
    ``ValidationError`` naming the offending time and condition.

    The dominance constant is certified on the grid: for every indicator of
    a single grid cell, the mass the shifted time map deposits into that
    cell is compared with the cell's own mass; ``l_hat`` is the worst ratio
    across the four shifts.  Measure-preserving shifts (constant delays)
    give exactly 1; d(t) = t/2 gives 2.  This is a grid-level certificate,
    not a continuum proof.
    """
    n_t = grid.n_horizon
    t_active = grid.points[: n_t + 1]
    d1v, d2v, d3v, d4v = delays.shift_values(t_active)
    checks = []
    witnesses = []
    for name, vals in (("d1", d1v), ("d2", d2v), ("d3", d3v), ("d4", d4v)):
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"shift function {name} returned non-finite values")
        bad = np.where(vals < -_D1_TOL)[0]
        if bad.size:
            witnesses.append({"condition": f"(D1) {name}(t) >= 0", "t": float(t_active[bad[0]])})
    for name, vals in (("d3", d3v), ("d4", d4v)):
        over = np.where(t_active + vals > grid.t_max + _D1_TOL)[0]
        if over.size:
            witnesses.append({
                "condition": f"(D1) t + {name}(t) <= T + K",
                "t": float(t_active[over[0]]),
                "shifted": float(t_active[over[0]] + vals[over[0]]),
            })
    if witnesses:
        w = witnesses[0]
        raise ValidationError(
            f"delay condition violated: {w['condition']} fails at t = {w['t']}",
            witnesses=witnesses,
        )
    checks.append(CheckResult("(D1) pointwise shift bounds", True, f"{n_t + 1} grid points"))

    # (D2): mass each shifted time map deposits into single grid cells,
    # left-endpoint sources on [0, T), zero extension outside [0, T + K].
    src = t_active[:-1]
    l_per_shift = []
    for vals, sign in ((d1v[:-1], -1.0), (d2v[:-1], -1.0), (d3v[:-1], +1.0), (d4v[:-1], +1.0)):
        shifted = src + sign * vals
        inside = (shifted >= 0.0) & (shifted < grid.t_max + _D1_TOL)
        cells = np.floor(shifted[inside] / grid.delta + 1e-12).astype(int)
        cells = np.clip(cells, 0, grid.n_steps - 1)
        counts = np.bincount(cells, minlength=grid.n_steps)
        l_per_shift.append(float(counts.max()) if counts.size else 0.0)
    l_hat = max(l_per_shift)
    checks.append(CheckResult("(D2) grid-cell dominance", True,
                              f"L_hat = {l_hat:g} (per shift: {l_per_shift})"))
    delays.l_hat = l_hat
    return ValidationReport(True, checks, l_hat=l_hat)


@dataclass
class GeneratorSpec:
    """Generator callback and its declared Lipschitz structure.

    ``f(t, u, v, y, z, phi, psi)`` must be vectorised over path arrays:
    u, v are the delayed Y/Z values, y, z the current ones, phi, psi the
    conditional-expectation estimates of the anticipated Y/Z values.  The
    solver hands every argument as an already-evaluated array, so generator
    authors never touch raw future paths.
    """

    f: callable
    lipschitz_c: float
    zero_integrability_checked: bool = False

    def __post_init__(self):
        self.lipschitz_c = float(self.lipschitz_c)
        if self.lipschitz_c <= 0.0:
            raise ValidationError(f"lipschitz_c must be > 0, got {self.lipschitz_c}")


def lipschitz_probe(gen: GeneratorSpec, grid: TimeGrid, hurst: float,
                    n_samples: int = 400, seed: int = 0) -> float:
    """Spot-check the weighted Lipschitz bound by random difference quotients.

    Samples argument pairs (mixing joint and single-coordinate
    perturbations) at positive grid times and maximises

        |f(a) - f(b)| / (|du| + w|dv| + |dy| + w|dz| + |dphi| + w|dpsi|)

    with w = t^{H - 1/2}.  Warns when the estimate exceeds the declared
    constant by more than 5%.  Non-finite generator output raises
    ``ValidationError``.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    hurst = check_hurst(hurst)
    rng = np.random.default_rng(seed)
    t_pool = grid.points[1: grid.n_horizon + 1]
    best = 0.0
    batch = n_samples
    t = rng.choice(t_pool, size=batch)
    base = rng.normal(scale=1.0, size=(6, batch))
    pert = rng.normal(scale=0.5, size=(6, batch))
    # half the samples perturb a single coordinate: that isolates the
    # largest coefficient instead of averaging it away
    single = rng.integers(0, 2, size=batch).astype(bool)
    coord = rng.integers(0, 6, size=batch)
    for j in range(batch):
        if single[j]:
            keep = np.zeros(6)
            keep[coord[j]] = pert[coord[j], j]
            d = keep
        else:
            d = pert[:, j]
        a = base[:, j]
        b = a + d
        fa = np.asarray(gen.f(t[j], *(np.atleast_1d(x) for x in a)), dtype=float)
        fb = np.asarray(gen.f(t[j], *(np.atleast_1d(x) for x in b)), dtype=float)
        if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
            raise ValidationError(f"generator returned non-finite output at t = {t[j]}")
        w = t[j] ** (hurst - 0.5)
        denom = (abs(d[0]) + w * abs(d[1]) + abs(d[2]) + w * abs(d[3])
                 + abs(d[4]) + w * abs(d[5]))
        if denom > 0:
            best = max(best, float(np.abs(fa - fb).max()) / denom)
    if best > gen.lipschitz_c * 1.05:
        warnings.warn(
            f"Lipschitz probe estimate {best:.4g} exceeds declared constant "
            f"{gen.lipschitz_c:.4g}",
            stacklevel=2,
        )
    return best


@dataclass
class TerminalData:
    """Terminal fields on [T, T + K] as functions of the sampled paths.

    ``xi(pathset)`` and ``eta(pathset)`` must return arrays of shape
    (n_paths, n_steps - n_horizon + 1): one value per path per grid point
    of the terminal band.
    """

    xi: callable
    eta: callable

    @classmethod
    def constant(cls, xi_value: float, eta_value: float = 0.0) -> "TerminalData":
        def make(c):
            def fn(paths: FbmPathSet):
                n_term = paths.grid.n_steps - paths.grid.n_horizon + 1
                return np.full((paths.n_paths, n_term), float(c))
            return fn
        return cls(make(xi_value), make(eta_value))

    @classmethod
    def driver_level(cls, scale: float = 1.0, offset: float = 0.0,
                     eta_value: float = 0.0) -> "TerminalData":
        """xi_t = scale * B_t + offset on the terminal band."""
        def xi(paths: FbmPathSet):
            return float(scale) * paths.paths[:, paths.grid.n_horizon:] + float(offset)
        def eta(paths: FbmPathSet):
            n_term = paths.grid.n_steps - paths.grid.n_horizon + 1
            return np.full((paths.n_paths, n_term), float(eta_value))
        return cls(xi, eta)

    @classmethod
    def driver_terminal(cls, scale: float = 1.0, offset: float = 0.0,
                        eta_value: float = 0.0) -> "TerminalData":
        """xi_t frozen at scale * B_T + offset across the terminal band."""
        def xi(paths: FbmPathSet):
            n_term = paths.grid.n_steps - paths.grid.n_horizon + 1
            v = float(scale) * paths.paths[:, paths.grid.n_horizon] + float(offset)
            return np.tile(v[:, None], (1, n_term))
        def eta(paths: FbmPathSet):
            n_term = paths.grid.n_steps - paths.grid.n_horizon + 1
            return np.full((paths.n_paths, n_term), float(eta_value))
        return cls(xi, eta)

    def values(self, paths: FbmPathSet) -> tuple[np.ndarray, np.ndarray]:
        n_term = paths.grid.n_steps - paths.grid.n_horizon + 1
        shape = (paths.n_paths, n_term)
        if self.xi is None:
            raise ValidationError("terminal data is missing xi on [T, T + K]")
        if self.eta is None:
            raise ValidationError("terminal data is missing eta on [T, T + K]")
        xi = np.asarray(self.xi(paths), dtype=float)
        eta = np.asarray(self.eta(paths), dtype=float)
        for name, arr in (("xi", xi), ("eta", eta)):
            if arr.shape != shape:
                raise ValidationError(
                    f"terminal field {name} has shape {arr.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"terminal field {name} contains non-finite values")
        return xi, eta


def theorem_beta(lipschitz_c: float, l_const: float, m_const: float) -> float:
    """Contraction weight beta = 12 C^2 (2L + 1) M + 4 / M."""
    c = float(lipschitz_c)
    l = float(l_const)
    m = float(m_const)
    if m <= 0.0:
        raise ValidationError(f"M must be > 0, got {m}")
    return 12.0 * c * c * (2.0 * l + 1.0) * m + 4.0 / m


@dataclass
class ProblemSpec:
    """A complete backward problem instance.

    Immutable after validation by convention; the solver only reads it.
    ``m_const`` is the band constant M of the energy estimate (the theory
    only asserts existence of a suitable M > 0; 2 is the default).
    """

    grid: TimeGrid
    hurst: float
    delays: DelayStructure
    generator: GeneratorSpec
    terminal: TerminalData
    m_const: float = 2.0

    def __post_init__(self):
        self.hurst = check_hurst(self.hurst, solver=True)
        self.m_const = float(self.m_const)
        if self.m_const <= 0.0:
            raise ValidationError(f"m_const must be > 0, got {self.m_const}")

    def beta(self, l_const: float | None = None) -> float:
        l = self.delays.l_hat if l_const is None else l_const
        if l is None:
            raise ValidationError("delays not certified; run validate_delays first")
        return theorem_beta(self.generator.lipschitz_c, l, self.m_const)


def validate_problem(spec: ProblemSpec, n_samples: int = 400, seed: int = 0) -> ValidationReport:
    """Aggregate validation: shifts, Lipschitz probe, zero integrability,
    terminal shapes, and the contraction weight.

    Any sub-check failure raises an aggregated ``ValidationError``; on
    success the report carries the certified L_hat, the probe estimate and
    beta = 12 C^2 (2 L_hat + 1) M + 4 / M for the configured M.
    """
    checks = []
    delay_report = validate_delays(spec.delays, spec.grid)
    checks.extend(delay_report.checks)

    estimate = lipschitz_probe(spec.generator, spec.grid, spec.hurst,
                               n_samples=n_samples, seed=seed)
    checks.append(CheckResult("(H1) Lipschitz probe", True,
                              f"estimate {estimate:.4g} vs declared {spec.generator.lipschitz_c:g}"))

    # zero integrability: quadrature of |f(t, 0, ..., 0)|^2 on [0, T]
    t_active = spec.grid.points[: spec.grid.n_horizon + 1]
    zeros = np.zeros(1)
    try:
        f0 = np.array([
            float(np.asarray(spec.generator.f(t, zeros, zeros, zeros, zeros, zeros, zeros)).ravel()[0])
            for t in t_active
        ])
    except Exception as exc:  # pragma: no cover - defensive
        raise ValidationError(f"generator failed at the zero state: {exc}") from exc
    if not np.all(np.isfinite(f0)):
        raise ValidationError("generator is non-finite at the zero state")
    zero_mass = float(np.trapezoid(f0 ** 2, t_active))
    spec.generator.zero_integrability_checked = True
    checks.append(CheckResult("(H2) zero integrability", True,
                              f"int |f(t,0,...,0)|^2 dt = {zero_mass:.4g}"))

    # terminal shape / finiteness on a tiny deterministic path set
    probe_paths = FbmPathSet(
        np.zeros((2, spec.grid.n_steps + 1)), spec.hurst, 0, "independent", spec.grid
    )
    spec.terminal.values(probe_paths)
    checks.append(CheckResult("terminal data", True, "xi, eta defined on [T, T + K]"))

    beta = spec.beta(delay_report.l_hat)
    checks.append(CheckResult("contraction weight", True, f"beta = {beta:.6g}"))
    return ValidationReport(True, checks, l_hat=delay_report.l_hat, beta=beta,
                            lipschitz_estimate=estimate)
