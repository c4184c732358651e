"""Command-line driver: reproduce the coverage figures, the SEL table and
the efficiency report, with reproducible CSV/JSON outputs and run manifests.

Configuration is a flat ``key = value`` text file whose keys mirror the
ExperimentConfig fields plus per-command grid keys; CLI flags override file
values, file values override command defaults.  Every file-producing run
writes ``<out>.manifest.json`` with the fully resolved configuration, which
is sufficient to reproduce the CSV byte-for-byte (any thread count).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time

import numpy as np

from . import __version__
from . import calibration as cal
from . import mc
from .config import EstimatorPair, ExperimentConfig
from .exceptions import ConfigError, DegenerateSampleError, NumericalError, ParameterError

_FLOAT_KEYS = {
    "alpha", "alpha_tilde", "rho", "tau", "sigma_eps", "sigma_mu", "sigma_x",
    "a", "beta", "psi", "lambda_min", "lambda_max", "lambda_step",
    "c_star", "c_min", "sel_psi",
}
_INT_KEYS = {"N", "T", "M", "seed", "threads", "sel_M"}
_LIST_KEYS = {"alpha_tildes", "tau_grid", "psi_grid", "rho_grid", "rhos", "sel_rhos"}
_STR_KEYS = {"estimator_pair", "mode"}
_ALL_KEYS = _FLOAT_KEYS | _INT_KEYS | _LIST_KEYS | _STR_KEYS

_CONFIG_FIELDS = ("N", "T", "alpha", "alpha_tilde", "rho", "tau", "sigma_eps",
                  "sigma_mu", "sigma_x", "a", "beta", "psi", "estimator_pair",
                  "M", "seed")


def _parse_value(key, text):
    text = text.strip()
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _LIST_KEYS:
            parts = [p for chunk in text.split(",") for p in chunk.split()]
            return [float(p) for p in parts if p]
    except ValueError:
        raise ConfigError(f"could not parse value {text!r} for key {key!r}") from None
    return text


def parse_config_file(path):
    """Parse a flat key=value configuration file into typed values."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
        key, text = (s.strip() for s in body.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = _parse_value(key, text)
    return values


def _experiment_config(resolved, **overrides):
    kw = {k: resolved[k] for k in _CONFIG_FIELDS if k in resolved}
    kw.update(overrides)
    if isinstance(kw.get("estimator_pair"), str):
        kw["estimator_pair"] = EstimatorPair.parse(kw["estimator_pair"])
    psi = kw.get("psi")
    if psi is not None and "sigma_mu" not in kw:
        kw["sigma_mu"] = float(psi) * float(kw.get("sigma_eps", 1.0))
        kw["psi"] = None
    try:
        return ExperimentConfig(**kw)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def _write_csv(path, command, header, rows):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# pretestlab {command} schema v1\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write output file {path}: {exc}") from None


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write output file {path}: {exc}") from None


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _mc_estimate_dict(e):
    return {"value": e.value, "std_error": e.std_error, "M": e.M,
            "wall_time_seconds": e.wall_time_seconds}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_DEFAULT_ALPHA_TILDES = [0.05, 0.5]

_DEFAULTS = {
    "figure1": {
        "N": 100, "T": 3, "alpha": 0.05, "rho": 0.3, "psi": 1.0 / 3.0,
        "tau": 0.0, "estimator_pair": "unbiased", "M": 20000, "seed": 20230817,
        "alpha_tildes": list(_DEFAULT_ALPHA_TILDES),
        "lambda_min": -10.0, "lambda_max": 10.0, "lambda_step": 0.5,
        "threads": 1,
    },
    "figure2": {
        "N": 100, "T": 3, "alpha": 0.05, "psi": 1.0 / 3.0, "tau": 0.0,
        "estimator_pair": "unbiased", "M": 20000, "seed": 20230817,
        "alpha_tildes": list(_DEFAULT_ALPHA_TILDES),
        "tau_grid": list(cal.DEFAULT_TAU_GRID),
        "rho_grid": list(cal.DEFAULT_RHO_GRID),
        "threads": 1,
    },
    "figure3": {
        "N": 100, "T": 3, "alpha": 0.05, "rho": 0.4, "psi": 1.0 / 3.0,
        "tau": 0.0, "estimator_pair": "unbiased", "M": 20000, "seed": 20230817,
        "alpha_tildes": list(_DEFAULT_ALPHA_TILDES),
        "tau_grid": list(cal.DEFAULT_TAU_GRID),
        "psi_grid": list(cal.DEFAULT_PSI_GRID),
        "threads": 1,
    },
    "table1": {
        "N": 100, "T": 3, "alpha": 0.05, "psi": 1.0 / 3.0, "tau": 0.0,
        "rho": 0.0, "estimator_pair": "unbiased", "M": 20000, "seed": 20230817,
        "alpha_tildes": list(_DEFAULT_ALPHA_TILDES),
        "rhos": [0.0, 0.2, 0.4, 0.6, 0.8],
        "tau_grid": list(cal.DEFAULT_TAU_GRID),
        "psi_grid": list(cal.DEFAULT_PSI_GRID),
        "rho_grid": list(cal.DEFAULT_RHO_GRID),
        "threads": 1,
    },
    "efficiency": {
        "N": 100, "T": 3, "alpha": 0.05, "alpha_tilde": 0.05, "rho": 0.0,
        "tau": 0.0, "psi": 1.0 / 3.0, "estimator_pair": "unbiased",
        "M": 10000, "seed": 20230817,
        "sel_M": 1000, "sel_psi": 1.0, "sel_rhos": [0.0, 0.8],
        "threads": 1,
    },
    "coverage": {
        "N": 100, "T": 3, "alpha": 0.05, "alpha_tilde": 0.05, "rho": 0.0,
        "tau": 0.0, "psi": 1.0 / 3.0, "estimator_pair": "unbiased",
        "M": 20000, "seed": 20230817, "mode": "estimated", "threads": 1,
    },
    "sel": {
        "N": 100, "T": 3, "alpha": 0.05, "alpha_tilde": 0.05, "rho": 0.0,
        "tau": 0.0, "psi": 1.0 / 3.0, "estimator_pair": "unbiased",
        "M": 20000, "seed": 20230817, "threads": 1,
    },
}


def _lambda_grid(resolved):
    lo, hi = resolved["lambda_min"], resolved["lambda_max"]
    step = resolved["lambda_step"]
    if step <= 0 or hi < lo:
        raise ConfigError("need lambda_step > 0 and lambda_max >= lambda_min")
    n = int(round((hi - lo) / step)) + 1
    grid = [lo + i * step for i in range(n)]
    root_n = np.sqrt(resolved["N"])
    kept = [g for g in grid if abs(g) / root_n < 1.0]
    if len(kept) < len(grid):
        print(f"note: dropped {len(grid) - len(kept)} lambda values with "
              f"|lambda|/sqrt(N) >= 1 (out of the model domain)", file=sys.stderr)
    if not kept:
        raise ConfigError("lambda grid is empty after domain restriction")
    return kept


def cmd_figure1(resolved, out_path, threads):
    """Coverage of the two-stage interval against lambda for each alpha_tilde."""
    cfg = _experiment_config(resolved, tau=0.0)
    grid = _lambda_grid(resolved)
    alpha_tildes = resolved["alpha_tildes"]
    scenarios = []
    for at in alpha_tildes:
        for lam in grid:
            scenarios.append(mc.Scenario(tau=lam / np.sqrt(cfg.N), psi=cfg.psi,
                                         rho=cfg.rho, alpha_tilde=float(at)))
    accums = mc.sweep_scenarios(cfg, scenarios, threads=threads)
    rows = []
    k = 0
    for at in alpha_tildes:
        for lam in grid:
            res = mc.coverage_from_accum(accums[k])
            rows.append((lam, at, res.cp_tilde.value, res.cp_tilde.std_error,
                         res.cp_tilde.M, cfg.seed))
            k += 1
    _write_csv(out_path, "figure1",
               ["lambda", "alpha_tilde", "cp_tilde", "std_error", "M", "seed"],
               rows)
    return [out_path]


def _min_over_tau_rows(cfg, alpha_tildes, tau_grid, sweep_param, param_grid, threads):
    scenarios = []
    for at in alpha_tildes:
        for g in param_grid:
            for t in tau_grid:
                scenarios.append(mc.Scenario(
                    tau=float(t),
                    psi=float(g) if sweep_param == "psi" else cfg.psi,
                    rho=float(g) if sweep_param == "rho" else cfg.rho,
                    alpha_tilde=float(at)))
    accums = mc.sweep_scenarios(cfg, scenarios, threads=threads)
    rows = []
    k = 0
    for at in alpha_tildes:
        for g in param_grid:
            best, best_se, best_tau = np.inf, 0.0, None
            for t in tau_grid:
                res = mc.coverage_from_accum(accums[k])
                k += 1
                if res.cp_tilde.value < best:
                    best = res.cp_tilde.value
                    best_se = res.cp_tilde.std_error
                    best_tau = float(t)
            rows.append((g, at, best, best_se, best_tau, cfg.M, cfg.seed))
    return rows


def cmd_figure2(resolved, out_path, threads):
    """Minimum coverage over tau as a function of rho."""
    cfg = _experiment_config(resolved, tau=0.0, rho=0.0)
    rows = _min_over_tau_rows(cfg, resolved["alpha_tildes"], resolved["tau_grid"],
                              "rho", resolved["rho_grid"], threads)
    _write_csv(out_path, "figure2",
               ["rho", "alpha_tilde", "min_cp_tilde", "std_error", "argmin_tau",
                "M", "seed"], rows)
    return [out_path]


def cmd_figure3(resolved, out_path, threads):
    """Minimum coverage over tau as a function of psi at fixed rho."""
    cfg = _experiment_config(resolved, tau=0.0)
    rows = _min_over_tau_rows(cfg, resolved["alpha_tildes"], resolved["tau_grid"],
                              "psi", resolved["psi_grid"], threads)
    _write_csv(out_path, "figure3",
               ["psi", "alpha_tilde", "min_cp_tilde", "std_error", "argmin_tau",
                "M", "seed"], rows)
    return [out_path]


def cmd_table1(resolved, out_path, threads):
    """Min and max scaled expected length per (alpha_tilde, rho)."""
    rows = []
    for at in resolved["alpha_tildes"]:
        cfg = _experiment_config(resolved, alpha_tilde=float(at), tau=0.0, rho=0.0)
        calib = cal.minimize_coverage(cfg, resolved["tau_grid"],
                                      resolved["psi_grid"], resolved["rho_grid"],
                                      threads=threads)
        for rho in resolved["rhos"]:
            ext = cal.sel_extremes(cfg, float(at), float(rho),
                                   resolved["tau_grid"], resolved["psi_grid"],
                                   calib.c_star, threads=threads)
            rows.append((at, rho, ext.min_sel, ext.max_sel,
                         ext.argmin[0], ext.argmin[1], ext.argmax[0],
                         ext.argmax[1], calib.c_min, calib.c_star,
                         cfg.M, cfg.seed))
    _write_csv(out_path, "table1",
               ["alpha_tilde", "rho", "min_sel", "max_sel", "argmin_tau",
                "argmin_psi", "argmax_tau", "argmax_psi", "c_min", "c_star",
                "M", "seed"], rows)
    return [out_path]


def cmd_efficiency(resolved, out_path, threads):
    """Variance/time efficiency of the control-variate estimators."""
    cfg = _experiment_config(resolved)
    full = mc.run_coverage(cfg, "estimated", threads=threads)
    brute = mc.run_coverage(cfg, "estimated", threads=threads, brute_only=True)
    var_hat = full.cp_hat.std_error ** 2
    var_tilde = full.cp_tilde.std_error ** 2
    t_hat = brute.cp_hat.wall_time_seconds
    t_tilde = full.cp_tilde.wall_time_seconds
    report = {
        "config": dict(resolved),
        "coverage": {
            "cp_hat": _mc_estimate_dict(full.cp_hat),
            "cp_tilde": _mc_estimate_dict(full.cp_tilde),
            "var_hat": var_hat, "var_tilde": var_tilde,
            "t_hat": t_hat, "t_tilde": t_tilde,
            "variance_ratio": var_hat / var_tilde,
            "time_ratio": t_hat / t_tilde,
            "efficiency": mc.efficiency(var_hat, var_tilde, t_hat, t_tilde),
        },
        "sel": [],
    }
    c_ref = 1.0 - cfg.alpha   # reference level; component efficiencies do not use it
    for rho in resolved["sel_rhos"]:
        cfg_sel = _experiment_config(
            resolved, rho=float(rho), tau=0.0, M=resolved["sel_M"],
            sigma_mu=resolved["sel_psi"] * resolved.get("sigma_eps", 1.0),
            psi=None)
        full_sel = mc.run_sel(cfg_sel, c_ref, threads=threads)
        brute_sel = mc.run_sel(cfg_sel, c_ref, threads=threads, brute_only=True)
        block = {"rho": rho, "M": cfg_sel.M}
        for name, e_hat, e_tilde in (
            ("lk", full_sel.lk_hat, full_sel.lk_tilde),
            ("lj", full_sel.lj_hat, full_sel.lj_tilde),
        ):
            vh, vt = e_hat.std_error ** 2, e_tilde.std_error ** 2
            th = brute_sel.lk_hat.wall_time_seconds
            tt = e_tilde.wall_time_seconds
            block[name] = {
                "var_hat": vh, "var_tilde": vt, "t_hat": th, "t_tilde": tt,
                "variance_ratio": vh / vt, "time_ratio": th / tt,
                "efficiency": mc.efficiency(vh, vt, th, tt),
            }
        report["sel"].append(block)
    _write_json(out_path, report)
    return [out_path] if out_path else []


def cmd_coverage(resolved, out_path, threads):
    """Coverage estimates for the configured scenario."""
    cfg = _experiment_config(resolved)
    mode = resolved.get("mode", "estimated")
    if mode not in ("estimated", "known"):
        raise ConfigError(f"mode must be 'estimated' or 'known', got {mode!r}")
    res = mc.run_coverage(cfg, mode, threads=threads)
    payload = {
        "config": dict(resolved), "mode": mode, "rejected": res.rejected,
        "estimates": {
            "cp_hat": _mc_estimate_dict(res.cp_hat),
            "cpk_hat": _mc_estimate_dict(res.cpk_hat),
            "cpk_tilde": _mc_estimate_dict(res.cpk_tilde),
            "cp_tilde": _mc_estimate_dict(res.cp_tilde),
        },
    }
    _write_json(out_path, payload)
    return [out_path] if out_path else []


def cmd_sel(resolved, out_path, threads):
    """Scaled expected length for the configured scenario."""
    cfg = _experiment_config(resolved)
    if "c_star" in resolved:
        c_star = float(resolved["c_star"])
    elif "c_min" in resolved:
        c_star = cal.solve_c_star(float(resolved["c_min"]), cfg.N, cfg.T,
                                  cfg.estimator_pair)
    else:
        raise ConfigError(
            "the sel command needs configuration key 'c_star' (or 'c_min' to "
            "solve it from)")
    res = mc.run_sel(cfg, c_star, threads=threads)
    payload = {
        "config": dict(resolved), "c_star": c_star, "sel": res.sel,
        "rejected": res.rejected,
        "components": {
            "lk_hat": _mc_estimate_dict(res.lk_hat),
            "lk_tilde": _mc_estimate_dict(res.lk_tilde),
            "lj_hat": _mc_estimate_dict(res.lj_hat),
            "lj_tilde": _mc_estimate_dict(res.lj_tilde),
        },
    }
    _write_json(out_path, payload)
    return [out_path] if out_path else []


_COMMANDS = {
    "figure1": cmd_figure1,
    "figure2": cmd_figure2,
    "figure3": cmd_figure3,
    "table1": cmd_table1,
    "efficiency": cmd_efficiency,
    "coverage": cmd_coverage,
    "sel": cmd_sel,
}

_JSON_COMMANDS = {"efficiency", "coverage", "sel"}


def _run_command(command, resolved, out_path):
    t0 = time.perf_counter()
    threads = int(resolved.get("threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    outputs = _COMMANDS[command](resolved, out_path, threads)
    total = time.perf_counter() - t0
    manifest_path = None
    if outputs and out_path:
        manifest = {
            "tool": "pretestlab",
            "version": __version__,
            "command": command,
            "seed": resolved.get("seed"),
            "threads": threads,
            "config": dict(resolved),
            "outputs": [{"path": p, "sha256": _sha256(p)} for p in outputs],
            "total_wall_time_seconds": total,
        }
        manifest_path = out_path + ".manifest.json"
        _write_json(manifest_path, manifest)
    return outputs, manifest_path


def replay_manifest(manifest_path, out_path=None):
    """Re-run the command recorded in a manifest with its resolved config.

    Returns the list of outputs written; with the same configuration the
    CSV bytes are identical to the original run.
    """
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    if command not in _COMMANDS:
        raise ConfigError(f"manifest names unknown command {command!r}")
    target = out_path or manifest["outputs"][0]["path"]
    outputs, _ = _run_command(command, manifest["config"], target)
    return outputs


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pretestlab",
        description="Coverage and expected-length experiments for the "
                    "two-stage (Hausman-pretest) confidence interval.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        p.add_argument("--out", metavar="PATH",
                       help="output file (CSV for figures/table, JSON otherwise)")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--replicates", type=int, metavar="M",
                       help="Monte Carlo replicates per scenario")
        p.add_argument("--threads", type=int, metavar="N", help="worker threads")
        p.add_argument("--estimator",
                       choices=[e.value for e in EstimatorPair],
                       help="variance estimator pair")
    args = parser.parse_args(argv)

    try:
        resolved = dict(_DEFAULTS[args.command])
        if args.config:
            resolved.update(parse_config_file(args.config))
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("seed must fit in an unsigned 64-bit integer")
            resolved["seed"] = args.seed
        if args.replicates is not None:
            resolved["M"] = args.replicates
        if args.threads is not None:
            resolved["threads"] = args.threads
        if args.estimator is not None:
            resolved["estimator_pair"] = args.estimator
        out_path = args.out
        if out_path is None and args.command not in _JSON_COMMANDS:
            out_path = f"{args.command}.csv"
        _run_command(args.command, resolved, out_path)
    except (ConfigError, ParameterError) as exc:
        print(f"pretestlab: configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, DegenerateSampleError) as exc:
        print(f"pretestlab: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
