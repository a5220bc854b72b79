"""Command-line entry point.

Usage::

    pqsse fixed-point --mass 1 --gamma 1 --gamma-prime 0
    pqsse stability
    pqsse simulate-moments --t-final 5 --initial squeezed --squeeze 4 --output run.csv
    pqsse simulate-grid --n-points 512 --t-final 1 --output grid.csv --snapshot final.bin
    pqsse ensemble --integrator moments --n-trajectories 1000 --output stats

Settings resolve as built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .analytic import fixed_point, stability_matrix
from .core import ParamError, PqsseError, StepError, validate_params
from .ensemble import ConfigError, EnsembleConfig, InitialState, run_ensemble, stats_to_dict
from .grid import GridError, GridSpec, resolution_check
from .io import atomic_write, json_text, stats_csv, trajectory_csv
from .moments import jacobian_fd, simulate as simulate_moments
from .noise import make_path

DEFAULTS = {
    "mass": 1.0,
    "gamma": 1.0,
    "gamma_prime": 0.5,
    "dt": 1e-3,
    "t_final": 1.0,
    "seed": 0,
    "n_trajectories": 100,
    "n_points": 1024,
    "box_length": None,  # 40 stationary widths
    "output": None,
    "workers": 1,
    "record_every": 1,
    "scheme": "exponential",
    "integrator": "moments",
    "permissive": False,
    "snapshot": None,
    "noise_dump": None,
    "h": 1e-6,
    "initial": None,
}

PARAM_KEYS = {"mass", "gamma", "gamma_prime"}
ALLOWED = {
    "fixed-point": PARAM_KEYS | {"output"},
    "stability": PARAM_KEYS | {"output", "h"},
    "simulate-moments": PARAM_KEYS | {"dt", "t_final", "seed", "output", "initial", "noise_dump"},
    "simulate-grid": PARAM_KEYS | {"dt", "t_final", "seed", "output", "initial", "noise_dump",
                                   "n_points", "box_length", "record_every", "scheme", "snapshot"},
    "ensemble": PARAM_KEYS | {"dt", "t_final", "seed", "output", "initial", "n_trajectories",
                              "n_points", "box_length", "record_every", "scheme", "integrator",
                              "workers", "permissive"},
}
INITIAL_KEYS = {"kind", "factor", "q_mean", "p_mean", "deviation"}


class UsageError(Exception):
    pass


def _add_params(p):
    p.add_argument("--mass", type=float, help="particle mass (default 1)")
    p.add_argument("--gamma", type=float, help="position measurement strength (default 1)")
    p.add_argument("--gamma-prime", dest="gamma_prime", type=float,
                   help="momentum measurement strength (default 0.5)")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--output", help="output path (default: stdout)")


def _add_run(p):
    p.add_argument("--dt", type=float, help="time step (default 1e-3)")
    p.add_argument("--t-final", dest="t_final", type=float, help="end time (default 1)")
    p.add_argument("--seed", type=int, help="noise seed (default 0)")
    p.add_argument("--initial", dest="initial_kind",
                   choices=["fixed-point", "squeezed", "displaced"], help="initial state")
    p.add_argument("--squeeze", type=float, help="var_q factor for --initial squeezed")
    p.add_argument("--q0", type=float, help="initial <q>")
    p.add_argument("--p0", type=float, help="initial <p>")


def _add_grid(p):
    p.add_argument("--n-points", dest="n_points", type=int, help="grid points, power of two (default 1024)")
    p.add_argument("--box-length", dest="box_length", type=float, help="box length (default 40 sigma_inf)")
    p.add_argument("--record-every", dest="record_every", type=int, help="steps between records")
    p.add_argument("--scheme", choices=["exponential", "euler"], help="grid stepping scheme")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqsse", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixed-point", help="stationary moments, phase constants and eigenvalues as JSON")
    _add_params(p)

    p = sub.add_parser("stability", help="closed-form vs finite-difference Jacobian report")
    _add_params(p)
    p.add_argument("--h", type=float, help="finite-difference step (default 1e-6)")

    p = sub.add_parser("simulate-moments", help="one moment-equation trajectory to CSV")
    _add_params(p)
    _add_run(p)
    p.add_argument("--dump-noise", dest="noise_dump", help="write the noise path as binary float64 pairs")

    p = sub.add_parser("simulate-grid", help="one wavefunction trajectory to CSV")
    _add_params(p)
    _add_run(p)
    _add_grid(p)
    p.add_argument("--snapshot", help="write the final wavefunction to this binary file")
    p.add_argument("--dump-noise", dest="noise_dump", help="write the noise path as binary float64 pairs")

    p = sub.add_parser("ensemble", help="ensemble statistics to <output>.json and <output>.csv")
    _add_params(p)
    _add_run(p)
    _add_grid(p)
    p.add_argument("--integrator", choices=["moments", "grid"])
    p.add_argument("--n-trajectories", dest="n_trajectories", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default 1)")
    p.add_argument("--permissive", action="store_true", default=None,
                   help="drop failed trajectories instead of aborting")
    return parser


def resolve(args) -> dict:
    """Merge defaults, config file and flags; reject unknown config keys."""
    allowed = ALLOWED[args.command]
    cfg = {k: DEFAULTS[k] for k in allowed}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        cfg.update(data)
    for key in allowed:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "initial" in allowed:
        init = dict(cfg.get("initial") or {})
        unknown = sorted(set(init) - INITIAL_KEYS)
        if unknown:
            raise UsageError(f"unknown initial-state keys: {', '.join(unknown)}")
        if args.initial_kind is not None:
            init["kind"] = args.initial_kind.replace("-", "_")
        for flag, key in (("squeeze", "factor"), ("q0", "q_mean"), ("p0", "p_mean")):
            if getattr(args, flag, None) is not None:
                init[key] = getattr(args, flag)
        try:
            cfg["initial"] = InitialState(**init)
        except TypeError as exc:
            raise UsageError(f"bad initial state: {exc}") from None
    return cfg


def _params(cfg):
    return validate_params(cfg["mass"], cfg["gamma"], cfg["gamma_prime"])


def _complex_list(values):
    return [{"re": float(z.real), "im": float(z.imag)} for z in values]


def cmd_fixed_point(cfg):
    params = _params(cfg)
    fp = fixed_point(params)
    rep = stability_matrix(params, fp)
    out = {
        "params": {"mass": params.mass, "gamma": params.gamma, "gamma_prime": params.gamma_prime},
        "var_q_inf": fp.var_q_inf,
        "var_p_inf": fp.var_p_inf,
        "covar_inf": fp.covar_inf,
        "e": fp.e,
        "e_prime": fp.e_prime,
        "constraint_residual": fp.constraint_residual(),
        "uncertainty_product": float(np.sqrt(fp.var_q_inf * fp.var_p_inf)),
        "matrix_a": rep.matrix_a,
        "eigenvalues": _complex_list(rep.eigenvalues),
        "closed_form_eigenvalues": _complex_list(rep.closed_form),
        "eigenvalue_rel_discrepancy": rep.max_rel_discrepancy,
        "stable": rep.stable,
    }
    atomic_write(cfg["output"], json_text(out))


def cmd_stability(cfg, tol=1e-5):
    params = _params(cfg)
    fp = fixed_point(params)
    rep = stability_matrix(params, fp)
    jac = jacobian_fd(params, fp, cfg["h"])
    disc = float(np.max(np.abs(jac - rep.matrix_a)))
    eig = _complex_list(rep.eigenvalues)
    for item in eig:
        item["real_part_negative"] = item["re"] < 0
    out = {
        "params": {"mass": params.mass, "gamma": params.gamma, "gamma_prime": params.gamma_prime},
        "h": cfg["h"],
        "closed_form_matrix": rep.matrix_a,
        "finite_difference_matrix": jac,
        "max_abs_discrepancy": disc,
        "tolerance": tol,
        "agrees": disc < tol,
        "eigenvalues": eig,
        "closed_form_eigenvalues": _complex_list(rep.closed_form),
        "all_real_parts_negative": rep.stable,
    }
    atomic_write(cfg["output"], json_text(out))


def _n_steps(cfg):
    if not cfg["dt"] > 0 or not cfg["t_final"] >= cfg["dt"]:
        raise UsageError("need dt > 0 and t_final >= dt")
    return max(1, int(round(cfg["t_final"] / cfg["dt"])))


def cmd_simulate_moments(cfg):
    from .core import MomentState

    params = _params(cfg)
    fp = fixed_point(params)
    path = make_path(cfg["seed"], 0, params, cfg["dt"], _n_steps(cfg))
    start = MomentState(*map(float, cfg["initial"].moments(fp)))
    traj = simulate_moments(start, params, path)
    if cfg["noise_dump"]:
        atomic_write(cfg["noise_dump"], path.to_bytes())
    atomic_write(cfg["output"], trajectory_csv(traj))


def cmd_simulate_grid(cfg):
    from . import grid as gridmod

    params = _params(cfg)
    fp = fixed_point(params)
    length = cfg["box_length"] or 40.0 * fp.sigma_q
    grid = GridSpec(cfg["n_points"], length)
    init = cfg["initial"]
    report = resolution_check(grid, fp=fp, params=params, dt=cfg["dt"],
                              excursion=(init.q_mean, init.p_mean), scheme=cfg["scheme"])
    if report.passed:
        wf0 = init.wavefunction(grid, fp)
        report = resolution_check(wf0)
    if not report.passed:
        raise UsageError(f"resolution check failed: {report}")
    n_steps = _n_steps(cfg)
    path = make_path(cfg["seed"], 0, params, cfg["dt"], n_steps)
    traj = gridmod.simulate(wf0, params, path, record_every=cfg["record_every"], scheme=cfg["scheme"])
    if cfg["noise_dump"]:
        atomic_write(cfg["noise_dump"], path.to_bytes())
    if cfg["snapshot"]:
        atomic_write(cfg["snapshot"], gridmod.snapshot_bytes(traj.final, n_steps * cfg["dt"]))
    atomic_write(cfg["output"], trajectory_csv(traj))


def cmd_ensemble(cfg):
    params = _params(cfg)
    ecfg = EnsembleConfig(
        params=params,
        integrator=cfg["integrator"],
        n_trajectories=cfg["n_trajectories"],
        dt=cfg["dt"],
        t_final=cfg["t_final"],
        seed=cfg["seed"],
        initial=cfg["initial"],
        record_every=cfg["record_every"],
        n_points=cfg["n_points"],
        box_length=cfg["box_length"],
        scheme=cfg["scheme"],
        workers=cfg["workers"],
        permissive=bool(cfg["permissive"]),
    )
    stats = run_ensemble(ecfg)
    summary = json_text(stats_to_dict(stats, ecfg))
    series = stats_csv(stats)
    base = cfg["output"]
    if base is None or base == "-":
        sys.stdout.write(summary)
        return
    base = str(base)
    for ext in (".json", ".csv"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    atomic_write(base + ".json", summary)
    atomic_write(base + ".csv", series)


COMMANDS = {
    "fixed-point": cmd_fixed_point,
    "stability": cmd_stability,
    "simulate-moments": cmd_simulate_moments,
    "simulate-grid": cmd_simulate_grid,
    "ensemble": cmd_ensemble,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except StepError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ParamError, ConfigError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PqsseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
