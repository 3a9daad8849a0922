"""Builtin problem library and JSON configuration handling.

Every experiment the CLI can run is described by a plain dict (the resolved
configuration).  Builtin problems are shipped as such dicts, so running
them by name and running a user JSON file go through the same path, and the
resolved dict is what gets hashed into the run manifest.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from .comparison import ComparisonPair
from .errors import ValidationError
from .fbm import TimeGrid
from .problem import DelayStructure, GeneratorSpec, ProblemSpec, TerminalData
from .regression import RegressionBasis

_RUN_DEFAULTS = {
    "n_paths": 10000,
    "seed": 0,
    "driver": "independent",
    "tol": 1e-3,
    "max_iter": 15,
    "beta": None,
    "M": 2.0,
    "basis": {"degree": 3, "features": "fbm_level_plus_increments",
              "n_increments": 2, "ridge_lambda": 0.0},
}

_ZERO_LINEAR = {"c_u": 0.0, "c_v": 0.0, "c_y": 0.0, "c_z": 0.0,
                "c_phi": 0.0, "c_psi": 0.0, "const": 0.0}


def _linear(**kw):
    params = dict(_ZERO_LINEAR)
    params.update(kw)
    return {"kind": "linear", "params": params}


BUILTIN_PROBLEMS: dict[str, dict] = {
    # f = 0, xi = 1: fixed point reached immediately
    "constant": {
        "hurst": 0.7, "T": 1.0, "K": 0.0, "n_steps": 64,
        "delays": {"kind": "constant", "params": {}},
        "generator": _linear(lipschitz_c=1.0),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
    },
    # f = mu: Y_t = 1 + mu (T - t)
    "drift": {
        "hurst": 0.7, "T": 1.0, "K": 0.0, "n_steps": 128,
        "delays": {"kind": "constant", "params": {}},
        "generator": _linear(const=0.5, lipschitz_c=1.0),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
    },
    # f = y: Y_0 = e
    "ode-rho": {
        "hurst": 0.7, "T": 1.0, "K": 0.0, "n_steps": 256,
        "delays": {"kind": "constant", "params": {}},
        "generator": _linear(c_y=1.0, lipschitz_c=1.0),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
    },
    # f = Y_{t - 1/4}: matches a fine-grid deterministic fixed point
    "delayed-rho": {
        "hurst": 0.7, "T": 1.0, "K": 0.0, "n_steps": 256,
        "delays": {"kind": "constant", "params": {"d1": 0.25}},
        "generator": _linear(c_u=1.0, lipschitz_c=1.0),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
        "tol": 1e-5, "max_iter": 40,
    },
    # f = E[Y_{t + 1/2} | F_t]: method-of-steps value Y_0 = 2.125
    "anticipated-steps": {
        "hurst": 0.7, "T": 1.0, "K": 0.5, "n_steps": 192,
        "delays": {"kind": "constant", "params": {"d3": 0.5}},
        "generator": _linear(c_phi=1.0, lipschitz_c=1.0),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
        "tol": 1e-5, "max_iter": 20,
    },
    # f = 0, xi = B_T: martingale representation, Z = 1
    "representation-bt": {
        "hurst": 0.7, "T": 1.0, "K": 0.0, "n_steps": 128,
        "delays": {"kind": "constant", "params": {}},
        "generator": _linear(lipschitz_c=1.0),
        "terminal": {"kind": "driver-terminal",
                     "params": {"scale": 1.0, "offset": 0.0, "eta": 1.0}},
        "n_paths": 20000,
    },
    # small linear generator with delay and anticipation: contraction showcase
    "lipschitz-linear": {
        "hurst": 0.7, "T": 1.0, "K": 0.25, "n_steps": 160,
        "delays": {"kind": "constant", "params": {"d1": 0.25, "d3": 0.25}},
        "generator": _linear(c_u=0.2, c_y=0.2, c_phi=0.2, lipschitz_c=0.2),
        "terminal": {"kind": "constant", "params": {"value": 1.0, "eta": 0.0}},
        "tol": 1e-6, "max_iter": 15,
    },
}

BUILTIN_PAIRS: dict[str, dict] = {
    # ordered generators (gap 0.1) and ordered terminals (gap 0.25),
    # f2 increasing in u and phi, constant delays
    "ordered-pair": {
        "hurst": 0.7, "T": 1.0, "K": 0.25, "n_steps": 160,
        "delays": {"kind": "constant", "params": {"d1": 0.25, "d3": 0.25}},
        "generator": _linear(c_u=0.15, c_y=0.2, c_phi=0.15, lipschitz_c=0.5),
        "generator2": _linear(c_u=0.15, c_y=0.2, c_phi=0.15, const=0.1,
                              lipschitz_c=0.5),
        "terminal": {"kind": "driver-level",
                     "params": {"scale": 0.5, "offset": 0.0, "eta": 0.5}},
        "terminal2": {"kind": "driver-level",
                      "params": {"scale": 0.5, "offset": 0.25, "eta": 0.5}},
        "n_paths": 8000,
        "n_outer": 12, "tol_outer": 1e-3, "ordering_threshold": 0.01,
        "tol": 1e-4, "max_iter": 30,
    },
}


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config file {path} must contain a JSON object")
    return cfg


def _require(cfg: dict, key: str, types, where: str):
    if key not in cfg:
        raise ValidationError(f"{where}: missing required key {key!r}")
    val = cfg[key]
    if not isinstance(val, types):
        raise ValidationError(f"{where}: key {key!r} has wrong type {type(val).__name__}")
    return val


def resolve_config(cfg: dict, builtin: dict[str, dict], kind_key: str) -> dict:
    """Merge run defaults, an optional builtin base, and user overrides."""
    cfg = dict(cfg or {})
    name = cfg.pop(kind_key, None)
    base = copy.deepcopy(_RUN_DEFAULTS)
    if name is not None:
        if name not in builtin:
            raise ValidationError(
                f"unknown builtin {kind_key} {name!r}; choose from {sorted(builtin)}"
            )
        merged_builtin = copy.deepcopy(builtin[name])
        base.update(merged_builtin)
        base[kind_key] = name
    for key, val in cfg.items():
        if key == "basis" and isinstance(val, dict):
            base["basis"] = {**base["basis"], **val}
        elif key in ("delays", "generator", "generator2", "terminal", "terminal2") \
                and isinstance(val, dict) and isinstance(base.get(key), dict):
            merged = copy.deepcopy(base[key])
            if "kind" in val and val["kind"] != merged.get("kind"):
                merged = {"kind": val["kind"], "params": {}}
            merged["params"] = {**merged.get("params", {}), **val.get("params", {})}
            base[key] = merged
        else:
            base[key] = val
    return base


def _build_delays(block: dict, lookahead_k: float) -> DelayStructure:
    kind = _require(block, "kind", str, "delays")
    params = block.get("params", {})
    if kind == "constant":
        return DelayStructure.constant(
            d1=params.get("d1", 0.0), d2=params.get("d2", 0.0),
            d3=params.get("d3", 0.0), d4=params.get("d4", 0.0),
            lookahead_k=lookahead_k,
        )
    if kind == "linear":
        return DelayStructure.linear(
            a1=params.get("a1", 0.0), a2=params.get("a2", 0.0),
            a3=params.get("a3", 0.0), a4=params.get("a4", 0.0),
            lookahead_k=lookahead_k,
        )
    if kind == "table":
        times = np.asarray(_require(params, "times", list, "delays.table"), dtype=float)
        def make(key):
            vals = np.asarray(params.get(key, [0.0] * len(times)), dtype=float)
            if vals.shape != times.shape:
                raise ValidationError(f"delays.table: {key} must match times in length")
            return lambda t: np.interp(np.asarray(t, dtype=float), times, vals)
        return DelayStructure(make("d1"), make("d2"), make("d3"), make("d4"),
                              lookahead_k)
    raise ValidationError(f"unknown delay kind {kind!r}")


def _build_generator(block: dict) -> GeneratorSpec:
    kind = _require(block, "kind", str, "generator")
    params = block.get("params", {})
    if kind != "linear":
        raise ValidationError(f"unknown generator kind {kind!r}")
    coeffs = {k: float(params.get(k, 0.0)) for k in _ZERO_LINEAR}
    weighted = (coeffs["c_v"], coeffs["c_z"], coeffs["c_psi"])
    lipschitz_c = params.get("lipschitz_c")
    if lipschitz_c is None:
        if any(c != 0.0 for c in weighted):
            raise ValidationError(
                "generator.linear: lipschitz_c must be declared explicitly when "
                "the weighted coefficients c_v, c_z or c_psi are nonzero"
            )
        lipschitz_c = max(abs(coeffs["c_u"]), abs(coeffs["c_y"]), abs(coeffs["c_phi"]), 1e-6)

    def f(t, u, v, y, z, phi, psi):
        return (coeffs["c_u"] * u + coeffs["c_v"] * v + coeffs["c_y"] * y
                + coeffs["c_z"] * z + coeffs["c_phi"] * phi
                + coeffs["c_psi"] * psi + coeffs["const"])

    return GeneratorSpec(f, float(lipschitz_c))


def _build_terminal(block: dict) -> TerminalData:
    kind = _require(block, "kind", str, "terminal")
    params = block.get("params", {})
    eta = float(params.get("eta", 0.0))
    if kind == "constant":
        return TerminalData.constant(float(params.get("value", 0.0)), eta)
    if kind == "driver-level":
        return TerminalData.driver_level(float(params.get("scale", 1.0)),
                                         float(params.get("offset", 0.0)), eta)
    if kind == "driver-terminal":
        return TerminalData.driver_terminal(float(params.get("scale", 1.0)),
                                            float(params.get("offset", 0.0)), eta)
    raise ValidationError(f"unknown terminal kind {kind!r}")


@dataclass
class RunSettings:
    n_paths: int
    seed: int
    driver: str
    tol: float
    max_iter: int
    beta: float | None
    basis: RegressionBasis


def _run_settings(resolved: dict) -> RunSettings:
    basis_cfg = resolved["basis"]
    basis = RegressionBasis(
        degree=basis_cfg.get("degree", 3),
        features=basis_cfg.get("features", "fbm_level_plus_increments"),
        n_increments=basis_cfg.get("n_increments", 2),
        ridge_lambda=basis_cfg.get("ridge_lambda", 0.0),
    )
    n_paths = int(resolved["n_paths"])
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    beta = resolved.get("beta")
    return RunSettings(
        n_paths=n_paths,
        seed=int(resolved["seed"]),
        driver=str(resolved["driver"]),
        tol=float(resolved["tol"]),
        max_iter=int(resolved["max_iter"]),
        beta=None if beta is None else float(beta),
        basis=basis,
    )


def _build_grid(resolved: dict) -> TimeGrid:
    horizon = float(_require(resolved, "T", (int, float), "config"))
    lookahead = float(resolved.get("K", 0.0))
    n_steps = int(_require(resolved, "n_steps", int, "config"))
    grid = TimeGrid.from_horizon(horizon, lookahead, n_steps)
    return grid


def problem_from_config(cfg: dict) -> tuple[ProblemSpec, RunSettings, dict]:
    """Resolve a problem config (builtin name and/or explicit blocks)."""
    resolved = resolve_config(cfg, BUILTIN_PROBLEMS, "problem")
    for key in ("delays", "generator", "terminal"):
        _require(resolved, key, dict, "config")
    grid = _build_grid(resolved)
    delays = _build_delays(resolved["delays"], resolved.get("K", 0.0))
    generator = _build_generator(resolved["generator"])
    terminal = _build_terminal(resolved["terminal"])
    hurst = float(_require(resolved, "hurst", (int, float), "config"))
    spec = ProblemSpec(grid, hurst, delays, generator, terminal,
                       m_const=float(resolved.get("M", 2.0)))
    return spec, _run_settings(resolved), resolved


def comparison_from_config(cfg: dict) -> tuple[ComparisonPair, RunSettings, dict]:
    """Resolve a comparison config: a shared frame plus two generator/terminal blocks."""
    resolved = resolve_config(cfg, BUILTIN_PAIRS, "pair")
    for key in ("delays", "generator", "generator2", "terminal", "terminal2"):
        _require(resolved, key, dict, "config")
    grid = _build_grid(resolved)
    delays = _build_delays(resolved["delays"], resolved.get("K", 0.0))
    hurst = float(_require(resolved, "hurst", (int, float), "config"))
    m_const = float(resolved.get("M", 2.0))
    gen1 = _build_generator(resolved["generator"])
    gen2 = _build_generator(resolved["generator2"])
    spec1 = ProblemSpec(grid, hurst, delays, gen1, _build_terminal(resolved["terminal"]), m_const)
    spec2 = ProblemSpec(grid, hurst, delays, gen2, _build_terminal(resolved["terminal2"]), m_const)

    def reduced(gen):
        return lambda t, u, y, z, phi: gen.f(t, u, 0.0, y, z, phi, 0.0)

    pair = ComparisonPair(spec1, spec2, reduced(gen1), reduced(gen2))
    return pair, _run_settings(resolved), resolved
