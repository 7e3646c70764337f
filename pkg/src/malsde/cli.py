"""Experiment runner: config parsing, subcommand dispatch, CSV/JSON reports.

Subcommands: simulate, density, bounds, oracle, converge.  Configs are strict
JSON (unknown keys rejected); outputs are CSV files with 17-significant-digit
floats plus a JSON run manifest.  Given the same config and seed, report
bytes are identical at any worker count.

Exit codes: 0 success, 1 failed check, 2 config error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import jsonschema
import scipy

from . import __version__
from .bounds import (
    covQ_moment_check,
    dnorm_check,
    exp_moment_check,
    fit_generator_constants,
    invcov_moment_scaling,
    invcov_reference_slopes,
    tail_check,
    truncation_convergence,
)
from .density import (
    density_derivative_mc,
    density_mc,
    fit_decay_envelope,
    gaussian_oracle,
    kde,
    kde_risk,
    weight_samples,
)
from .malliavin import DegenerateCovarianceError, quadrature_oracle
from .models import (
    BrownianModel,
    MODEL_IDS,
    ModelDefinitionError,
    OrnsteinUhlenbeckModel,
    TruncationFamily,
    make_model,
)
from .simulate import NumericalBlowupError, TimeGrid, moment_estimate

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUMLIST = {"type": "array", "items": _NUM, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "id": {"enum": list(MODEL_IDS)},
                "params": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "dim": _INT,
                        "x0": _NUMLIST,
                        "horizon": _NUM,
                        "sigma0": _NUM,
                        "kappa": _NUM,
                        "mu": _NUMLIST,
                    },
                },
            },
            "required": ["id"],
        },
        "truncation_level": _NUM,
        "truncation_levels": _NUMLIST,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"horizon": _NUM, "steps": _INT},
            "required": ["horizon", "steps"],
        },
        "paths": _INT,
        "seed": _INT,
        "workers": _INT,
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"p_list": {"type": "array", "items": _INT}},
        },
        "density": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "y_grid": _NUMLIST,
                "alphas": {"type": "array",
                           "items": {"type": "array", "items": _INT}},
                "envelope": {"type": "boolean"},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "zeta_list": _NUMLIST,
                "y_offsets": _NUMLIST,
                "p_list": {"type": "array", "items": _INT},
                "t_grid": _NUMLIST,
                "invcov_steps": _INT,
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": _INT,
                "nodes": _INT,
                "alphas": {"type": "array",
                           "items": {"type": "array", "items": _INT}},
                "functions": {"type": "array",
                              "items": {"enum": ["cos", "bump"]}},
                "tolerance": _NUM,
            },
        },
        "converge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": _NUMLIST,
                "p": _INT,
                "halving_steps": {"type": "array", "items": _INT},
            },
        },
    },
}

DEFAULT_CONFIG = {
    "model": {"id": "ou",
              "params": {"dim": 1, "x0": [0.5], "horizon": 1.0,
                         "kappa": 1.0, "mu": [0.0], "sigma0": 1.0}},
    "truncation_level": 8.0,
    "truncation_levels": [2.0, 4.0, 8.0],
    "grid": {"horizon": 1.0, "steps": 64},
    "paths": 20000,
    "seed": 0,
    "workers": 1,
    "simulate": {"p_list": [2, 4]},
    "density": {"y_grid": [-2.5, -2.0, -1.5, -1.0, -0.5, 0.0,
                           0.5, 1.0, 1.5, 2.0, 2.5],
                "alphas": [[], [1]],
                "envelope": False},
    "bounds": {"zeta_list": [0.1, 0.5],
               "y_offsets": [2.0, 3.0, 4.0],
               "p_list": [2, 4],
               "t_grid": [0.1, 0.18, 0.32, 0.56, 1.0],
               "invcov_steps": 16},
    "oracle": {"steps": 2, "nodes": 128,
               "alphas": [[1], [1, 1]],
               "functions": ["cos", "bump"],
               "tolerance": 1e-6},
    "converge": {"levels": [2.0, 4.0, 8.0], "p": 2,
                 "halving_steps": [64, 128, 256]},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            node[k] = nxt
        node = nxt
    node[keys[-1]] = value


def load_config(path: str | None, overrides, seed=None, workers=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: "
                              f"line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _deep_merge(cfg, user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_override(cfg, key, raw)
    if seed is not None:
        cfg["seed"] = seed
    if workers is not None:
        cfg["workers"] = workers
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {e.message}") from e
    return cfg


def _build(cfg):
    model = make_model(cfg["model"]["id"], **cfg["model"].get("params", {}))
    fam = TruncationFamily(model, cfg["truncation_level"])
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["steps"])
    return model, fam, grid


# ---------------------------------------------------------------------------
# Report plumbing
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_manifest(outdir: Path, subcommand: str, cfg: dict, files, wall: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": round(wall, 3),
        "outputs": [f.name for f in files],
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _alpha_tag(alpha) -> str:
    return "".join(str(a) for a in alpha) or "0"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, outdir: Path) -> int:
    model, fam, grid = _build(cfg)
    rows = []
    for p in cfg["simulate"]["p_list"]:
        sup, se, _ = moment_estimate(fam, grid, p, cfg["paths"], cfg["seed"])
        rows.append((cfg["model"]["id"], fam.level, grid.steps, cfg["paths"],
                     cfg["seed"], p, sup, se))
    f = outdir / "moments.csv"
    write_csv(f, ["model", "n", "N", "M", "seed", "p", "sup_moment", "se"], rows)
    return EXIT_OK, [f]


def _is_linear(model) -> bool:
    return isinstance(model, (BrownianModel, OrnsteinUhlenbeckModel))


def cmd_density(cfg, outdir: Path) -> int:
    model, fam, grid = _build(cfg)
    dcfg = cfg["density"]
    ys = np.asarray(dcfg["y_grid"], dtype=float)
    ygrid = np.repeat(ys[:, None], fam.dim, axis=1)  # diagonal grid for d >= 2
    seed, m_paths, workers = cfg["seed"], cfg["paths"], cfg["workers"]
    linear = _is_linear(model)
    rows = []
    all_pass = True
    env_fit = None
    if dcfg["envelope"]:
        env_fit = fit_generator_constants(fam, 2)
    for alpha in dcfg["alphas"]:
        alpha0 = tuple(a - 1 for a in alpha)  # config coords are 1-based
        if alpha0:
            est, se, _ = density_derivative_mc(fam, grid, m_paths, seed, ygrid,
                                               alpha0, workers=workers)
        else:
            est, se, _ = density_mc(fam, grid, m_paths, seed, ygrid,
                                    workers=workers)
        xn, _, valid = weight_samples(fam, grid, min(m_paths, 50000), seed,
                                      tuple(range(fam.dim)), workers=workers)
        kde_vals = kde(xn[valid], ygrid) if not alpha0 else np.full(len(ys), np.nan)
        risk = kde_risk(xn[valid], ygrid) if not alpha0 else np.full(len(ys), np.inf)
        oracle = (gaussian_oracle(model, grid.horizon, ygrid, alpha0,
                                  steps=grid.steps) if linear
                  else np.full(len(ys), np.nan))
        env_vals = np.full(len(ys), np.nan)
        if env_fit is not None:
            check = fit_decay_envelope(
                ygrid, est, se, grid.horizon, fam.x0,
                c2=fam.constants.c2, gamma2=env_fit.gamma_p,
                alpha2=env_fit.alpha_p, lambda0=fam.constants.lambda_min)
            env_vals = check.envelope.envelope(ygrid, grid.horizon)
        for i, y in enumerate(ys):
            if linear:
                ok = abs(est[i] - oracle[i]) <= 3 * se[i] + 1e-12
            elif not alpha0:
                ok = abs(est[i] - kde_vals[i]) <= 3 * (se[i] + risk[i])
            else:
                ok = True
            if env_fit is not None and np.isfinite(env_vals[i]):
                ok = ok and (abs(est[i]) <= env_vals[i] + 3 * se[i])
            all_pass &= bool(ok)
            rows.append((cfg["model"]["id"], fam.level, grid.steps, m_paths,
                         seed, y, _alpha_tag(alpha), est[i], se[i],
                         kde_vals[i], oracle[i], env_vals[i], bool(ok)))
    f = outdir / "density.csv"
    write_csv(f, ["model", "n", "N", "M", "seed", "y", "alpha", "estimate",
                  "se", "kde", "oracle", "envelope", "pass"], rows)
    return (EXIT_OK if all_pass else EXIT_CHECK_FAILED), [f]


def cmd_bounds(cfg, outdir: Path) -> int:
    model, fam, grid = _build(cfg)
    bcfg = cfg["bounds"]
    seed, m_paths, workers = cfg["seed"], cfg["paths"], cfg["workers"]
    levels = cfg["truncation_levels"]
    mid = cfg["model"]["id"]
    fit = fit_generator_constants(fam, 2)
    rows = []

    def add(report, param):
        rows.append((report.check, mid, fam.level, grid.steps, m_paths, seed,
                     param, report.lhs, report.se, report.rhs, report.margin,
                     report.passed))

    add(BoundLike("generator_fit", float(fit.holdout_violations), 0.0, 0.0),
        f"alpha={fit.alpha_p:g};raw={fit.alpha_raw:g};gamma={fit.gamma_p:g}")
    for zeta in bcfg["zeta_list"]:
        add(exp_moment_check(fam, grid, m_paths, zeta, fit, seed=seed,
                             workers=workers), f"zeta={zeta:g}")
    for rep in tail_check(fam, grid, m_paths, bcfg["y_offsets"], fit,
                          seed=seed, workers=workers):
        add(rep, f"y_off={rep.constants['offset']:g}")
    for p in bcfg["p_list"]:
        add(dnorm_check(model, levels, grid, m_paths, p, seed=seed,
                        workers=workers), f"p={p}")
    add(covQ_moment_check(model, levels, grid, m_paths, seed=seed,
                          workers=workers), "frobenius")
    scaling = invcov_moment_scaling(fam, bcfg["t_grid"], bcfg["p_list"],
                                    m_paths, steps=bcfg["invcov_steps"],
                                    seed=seed, workers=workers)
    for i, p in enumerate(scaling.p_list):
        refs = invcov_reference_slopes(fam.dim, p)
        rows.append(("invcov_slope", mid, fam.level, bcfg["invcov_steps"],
                     m_paths, seed,
                     f"p={p};hyp={refs['moment_hypothesis']:g};"
                     f"app={refs['appendix_lemma']:g}",
                     scaling.slopes[i], 0.0, refs["constant_sigma"],
                     refs["constant_sigma"] - scaling.slopes[i], True))
    all_pass = all(bool(r[-1]) for r in rows)
    f = outdir / "bounds.csv"
    write_csv(f, ["check", "model", "n", "N", "M", "seed", "param", "lhs",
                  "se", "rhs", "margin", "pass"], rows)
    return (EXIT_OK if all_pass else EXIT_CHECK_FAILED), [f]


class BoundLike:
    """Minimal stand-in for BoundReport rows produced inline."""

    def __init__(self, check, lhs, se, rhs):
        self.check, self.lhs, self.se, self.rhs = check, lhs, se, rhs

    @property
    def margin(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        return self.lhs <= self.rhs + 3 * self.se


_ORACLE_FUNCS = {
    "cos": (np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x)),
    "bump": (lambda x: np.exp(-0.5 * x * x),
             lambda x: -x * np.exp(-0.5 * x * x),
             lambda x: (x * x - 1) * np.exp(-0.5 * x * x)),
}


def cmd_oracle(cfg, outdir: Path) -> int:
    model, fam, grid = _build(cfg)
    ocfg = cfg["oracle"]
    rows = []
    worst = 0.0
    for fname in ocfg["functions"]:
        g = _ORACLE_FUNCS[fname]
        for alpha in ocfg["alphas"]:
            alpha0 = tuple(a - 1 for a in alpha)
            lhs, rhs, gap = quadrature_oracle(fam, ocfg["steps"], g, alpha0,
                                              nodes=ocfg["nodes"],
                                              horizon=grid.horizon)
            worst = max(worst, gap)
            rows.append((f"{cfg['model']['id']}:{fname}", _alpha_tag(alpha),
                         ocfg["steps"], lhs, rhs, gap))
    f = outdir / "oracle.csv"
    write_csv(f, ["model", "alpha", "N", "lhs", "rhs", "gap"], rows)
    ok = worst <= ocfg["tolerance"]
    return (EXIT_OK if ok else EXIT_CHECK_FAILED), [f]


def cmd_converge(cfg, outdir: Path) -> int:
    model, fam, grid = _build(cfg)
    ccfg = cfg["converge"]
    seed, m_paths, workers = cfg["seed"], cfg["paths"], cfg["workers"]
    mid = cfg["model"]["id"]
    rows = []
    all_pass = True
    table = truncation_convergence(model, ccfg["levels"], grid, m_paths,
                                   p=ccfg["p"], seed=seed, workers=workers)
    prev = None
    for n1, n2, val in table:
        ok = prev is None or val <= prev + 1e-15
        prev = val
        all_pass &= ok
        rows.append(("truncation", mid, f"{n1:g}->{n2:g}", grid.steps,
                     m_paths, seed, val, ok))
    if _is_linear(model):
        # closed-form Euler-chain law vs continuous law: weak error per N
        from .density import gaussian_law
        mean_inf, var_inf = gaussian_law(model, grid.horizon)
        errs = []
        for steps in ccfg["halving_steps"]:
            mean_n, var_n = gaussian_law(model, grid.horizon, steps=steps)
            err = float(np.max(np.abs(mean_n - mean_inf))
                        + np.max(np.abs(var_n - var_inf)))
            errs.append(err)
            rows.append(("halving", mid, f"N={steps}", steps, m_paths, seed,
                         err, True))
        if len(errs) >= 2 and min(errs) > 0:
            hs = np.asarray(ccfg["halving_steps"], dtype=float)
            slope = float(np.polyfit(np.log(grid.horizon / hs),
                                     np.log(errs), 1)[0])
            ok = abs(slope - 1.0) <= 0.3
            all_pass &= ok
            rows.append(("halving_slope", mid, "dt_order", grid.steps,
                         m_paths, seed, slope, ok))
    f = outdir / "converge.csv"
    write_csv(f, ["study", "model", "param", "N", "M", "seed", "value",
                  "pass"], rows)
    return (EXIT_OK if all_pass else EXIT_CHECK_FAILED), [f]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "density": cmd_density,
    "bounds": cmd_bounds,
    "oracle": cmd_oracle,
    "converge": cmd_converge,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="malsde",
        description="Monte Carlo density estimation for SDEs with "
                    "semi-monotone drifts")
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="worker process count")
    parser.add_argument("--out", help="output directory "
                                      "(default: $MALSDE_OUT or cwd)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path config override (JSON value)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(args.out or os.environ.get("MALSDE_OUT") or ".")
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"config error: cannot create output dir: {e}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.monotonic()
    try:
        code, files = _COMMANDS[args.subcommand](cfg, outdir)
    except (NumericalBlowupError, DegenerateCovarianceError,
            FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ModelDefinitionError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    write_manifest(outdir, args.subcommand, cfg, files, time.monotonic() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
