"""Batch experiment runner.

Subcommands: ``fbm-sample``, ``solve``, ``contraction``, ``compare``,
``validate``.  Every run resolves its configuration (builtin name plus
overrides, or a JSON file), hashes the resolved dict into a manifest that
is written before the computation starts and finalised afterwards (also on
failure), and emits CSV/JSON outputs into the chosen directory.

Exit codes: 0 success, 2 validation failure, 3 convergence or ordering
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .comparison import (OUTER_DECAY_BOUND, OUTER_DECAY_SLACK, check_ordering,
                         monotone_iterate, outer_decay_ratios, verify_hypotheses)
from .errors import NonConvergenceError, ValidationError
from .fbm import TimeGrid, build_covariance_matrix, export_paths, sample
from .library import (comparison_from_config, load_config, problem_from_config,
                      resolve_config)
from .problem import validate_problem
from .solver import contraction_ratio, solve, write_diagnostics_json, write_solution_csv

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def config_digest(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


class RunManifest:
    """Written before long computation starts, finalised after."""

    def __init__(self, out_dir: Path, command: str, resolved: dict):
        self.path = out_dir / "manifest.json"
        digest = config_digest(resolved)
        self.data = {
            "run_id": f"{command}-{digest[:12]}",
            "command": command,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "config_digest": digest,
            "tool_version": __version__,
            "resolved_config": resolved,
            "status": "running",
            "outputs": [],
        }
        self.write()

    def write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def add_output(self, path: Path):
        self.data["outputs"].append(str(path))

    def finalize(self, status: str):
        self.data["status"] = status
        self.write()


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _error_payload(exc: Exception) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    witnesses = getattr(exc, "witnesses", None)
    if witnesses:
        payload["witnesses"] = witnesses
    return payload


@contextlib.contextmanager
def _thread_cap(n):
    if n is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn
        yield
        return
    with threadpool_limits(limits=int(n)):
        yield


def _load_base_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _prepare_out(args, command: str) -> Path:
    out = Path(args.out) if args.out else Path(f"{command}-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fbm_sample(args) -> int:
    cfg = _load_base_config(args)
    for key, val in (("hurst", args.hurst), ("n_steps", args.n_steps),
                     ("t_max", args.t_max), ("n_paths", args.n_paths),
                     ("method", args.method)):
        if val is not None:
            cfg[key] = val
    resolved = {
        "hurst": float(cfg.get("hurst", 0.7)),
        "n_steps": int(cfg.get("n_steps", 64)),
        "t_max": float(cfg.get("t_max", 1.0)),
        "n_paths": int(cfg.get("n_paths", 1000)),
        "seed": int(cfg.get("seed", 0)),
        "method": str(cfg.get("method", "cholesky")),
        "validate": bool(cfg.get("validate", False) or args.validate),
    }
    out = _prepare_out(args, "fbm-sample")
    manifest = RunManifest(out, "fbm-sample", resolved)
    try:
        grid = TimeGrid(resolved["t_max"], resolved["n_steps"])
        paths = sample(grid, resolved["hurst"], resolved["n_paths"],
                       resolved["seed"], resolved["method"])
        csv_path = out / "paths.csv"
        side_path = out / "paths-manifest.json"
        export_paths(paths, csv_path, side_path)
        manifest.add_output(csv_path)
        manifest.add_output(side_path)
        if resolved["validate"]:
            exact = build_covariance_matrix(grid, resolved["hurst"])
            emp = paths.empirical_covariance()
            err_path = out / "covariance-error.csv"
            with open(err_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["i", "j", "t_i", "t_j", "exact", "empirical", "abs_error"])
                for i in range(grid.n_steps + 1):
                    for j in range(i, grid.n_steps + 1):
                        writer.writerow([
                            i, j, f"{grid.points[i]:.17g}", f"{grid.points[j]:.17g}",
                            f"{exact[i, j]:.17g}", f"{emp[i, j]:.17g}",
                            f"{abs(exact[i, j] - emp[i, j]):.17g}",
                        ])
            summary = out / "covariance-summary.json"
            _write_json(summary, {"max_abs_error": float(np.abs(emp - exact).max())})
            manifest.add_output(err_path)
            manifest.add_output(summary)
        manifest.finalize("completed")
        return EXIT_OK
    except Exception as exc:
        _write_json(out / "error.json", _error_payload(exc))
        manifest.finalize("failed")
        raise


def _run_solve(args, command: str):
    cfg = _load_base_config(args)
    if getattr(args, "problem", None):
        cfg["problem"] = args.problem
    spec, run, resolved = problem_from_config(cfg)
    out = _prepare_out(args, command)
    manifest = RunManifest(out, command, resolved)
    try:
        report = validate_problem(spec)
        paths = sample(spec.grid, spec.hurst, run.n_paths, run.seed, run.driver)
        beta = run.beta if run.beta is not None else report.beta
        solution, diag = solve(spec, paths, run.basis, beta=beta, tol=run.tol,
                               max_iter=run.max_iter, validate=False)
        sol_path = out / "solution.csv"
        write_solution_csv(solution, sol_path)
        manifest.add_output(sol_path)
        diag_path = out / "diagnostics.json"
        extra = {
            "theorem_beta": report.beta,
            "theorem_beta_used": run.beta is None or run.beta == report.beta,
            "l_hat": report.l_hat,
        }
        write_diagnostics_json(diag, diag_path, extra=extra)
        manifest.add_output(diag_path)
        return manifest, out, solution, diag, extra
    except Exception as exc:
        _write_json(out / "error.json", _error_payload(exc))
        manifest.finalize("failed")
        raise


def cmd_solve(args) -> int:
    manifest, out, solution, diag, _ = _run_solve(args, "solve")
    manifest.finalize("completed")
    return EXIT_OK if diag.converged else EXIT_CONVERGENCE


def cmd_contraction(args) -> int:
    manifest, out, solution, diag, extra = _run_solve(args, "contraction")
    summary = contraction_ratio(diag)
    csv_path = out / "contraction.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "diff_norm", "ratio", "pre_floor", "exceeds_bound"])
        for k, d in enumerate(diag.diff_norms):
            ratio = "" if k == 0 else f"{diag.ratios[k - 1]:.17g}"
            pre = k > 0 and diag.diff_norms[k - 1] > diag.noise_floor
            exceeds = pre and diag.ratios[k - 1] > summary.bound
            writer.writerow([k + 1, f"{d:.17g}", ratio, int(pre), int(exceeds)])
    manifest.add_output(csv_path)
    summary_path = out / "contraction.json"
    _write_json(summary_path, {**summary.to_dict(), **extra})
    manifest.add_output(summary_path)
    manifest.finalize("completed")
    return EXIT_OK if diag.converged else EXIT_CONVERGENCE


def cmd_compare(args) -> int:
    cfg = _load_base_config(args)
    if getattr(args, "pair", None):
        cfg["pair"] = args.pair
    pair, run, resolved = comparison_from_config(cfg)
    out = _prepare_out(args, "compare")
    manifest = RunManifest(out, "compare", resolved)
    try:
        verify_hypotheses(pair)
        paths = sample(pair.spec1.grid, pair.spec1.hurst, run.n_paths, run.seed,
                       run.driver)
        sol1, _ = solve(pair.spec1, paths, run.basis, tol=run.tol,
                        max_iter=run.max_iter)
        sol2, _ = solve(pair.spec2, paths, run.basis, tol=run.tol,
                        max_iter=run.max_iter)
        n_t = pair.spec1.grid.n_horizon
        gap = sol2.y[:, : n_t + 1] - sol1.y[:, : n_t + 1]
        tol_cfg = resolved.get("ordering_tol", "3se")
        if tol_cfg == "3se":
            se = gap.std(axis=0).max() / np.sqrt(gap.shape[0])
            tol = 3.0 * max(float(se), 1e-12)
        else:
            tol = float(tol_cfg)
        report = check_ordering(sol1, sol2, tol)
        chain = monotone_iterate(pair, paths, run.basis,
                                 n_outer=int(resolved.get("n_outer", 12)),
                                 tol_outer=float(resolved.get("tol_outer", 1e-3)),
                                 solver_tol=run.tol, max_iter=run.max_iter)
        decay = outer_decay_ratios(chain, pair.spec1.hurst)
        csv_path = out / "gap.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "mean_Y1", "mean_Y2", "mean_gap"])
            for i, t in enumerate(pair.spec1.grid.points[: n_t + 1]):
                writer.writerow([
                    f"{t:.17g}",
                    f"{sol1.y[:, i].mean():.17g}",
                    f"{sol2.y[:, i].mean():.17g}",
                    f"{gap[:, i].mean():.17g}",
                ])
        manifest.add_output(csv_path)
        report_path = out / "ordering.json"
        _write_json(report_path, {
            **report.to_dict(),
            "outer_chain_length": len(chain),
            "outer_decay_ratios": decay,
            "outer_decay_bound": OUTER_DECAY_BOUND + OUTER_DECAY_SLACK,
        })
        manifest.add_output(report_path)
        manifest.finalize("completed")
        threshold = float(resolved.get("ordering_threshold", 0.01))
        return EXIT_OK if report.violation_fraction <= threshold else EXIT_CONVERGENCE
    except Exception as exc:
        _write_json(out / "error.json", _error_payload(exc))
        manifest.finalize("failed")
        raise


def cmd_validate(args) -> int:
    cfg = _load_base_config(args)
    if getattr(args, "problem", None):
        cfg["problem"] = args.problem
    spec, run, resolved = problem_from_config(cfg)
    out = _prepare_out(args, "validate")
    manifest = RunManifest(out, "validate", resolved)
    try:
        report = validate_problem(spec)
        payload = {
            "passed": report.passed,
            "l_hat": report.l_hat,
            "beta": report.beta,
            "lipschitz_estimate": report.lipschitz_estimate,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                       for c in report.checks],
        }
        _write_json(out / "validation.json", payload)
        manifest.add_output(out / "validation.json")
        manifest.finalize("completed")
        print(report.summary())
        return EXIT_OK
    except Exception as exc:
        _write_json(out / "error.json", _error_payload(exc))
        manifest.finalize("failed")
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracbsde",
        description="Experiments on backward equations driven by fractional noise",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="cap BLAS worker threads")

    p = sub.add_parser("fbm-sample", help="sample paths and optionally validate covariance")
    common(p)
    p.add_argument("--hurst", type=float)
    p.add_argument("--n-steps", type=int, dest="n_steps")
    p.add_argument("--t-max", type=float, dest="t_max")
    p.add_argument("--n-paths", type=int, dest="n_paths")
    p.add_argument("--method", choices=["cholesky", "circulant", "independent"])
    p.add_argument("--validate", action="store_true",
                   help="emit empirical-vs-exact covariance error table")
    p.set_defaults(func=cmd_fbm_sample)

    p = sub.add_parser("solve", help="solve a backward problem")
    common(p)
    p.add_argument("--problem", help="builtin problem name")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("contraction", help="solve and report contraction diagnostics")
    common(p)
    p.add_argument("--problem", help="builtin problem name")
    p.set_defaults(func=cmd_contraction)

    p = sub.add_parser("compare", help="run an ordering experiment")
    common(p)
    p.add_argument("--pair", help="builtin comparison pair name")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="validate a problem configuration")
    common(p)
    p.add_argument("--problem", help="builtin problem name")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap(args.threads):
            return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        for w in exc.witnesses:
            print(f"  witness: {w}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
