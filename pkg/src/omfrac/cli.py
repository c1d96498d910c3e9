"""Command-line front end: ``omfrac <subcommand> --config <file> [options]``.

Every subcommand reads a JSON config, validates it against a schema that
rejects unknown keys, runs one experiment and writes CSV data plus a JSON
manifest echoing the resolved config and the tool version.

Exit codes: 0 success, 1 runtime failure, 2 malformed config, 3 failed
Assumption (A) check (suppressed by ``--force``).
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import datetime as _dt
import json
import math
import sys
import warnings
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np

from . import __version__
from .fbm import NoiseModel, Sigma
from .grid import NormSpec, SampledPath, TimeGrid, batch_path_norm
from .mc import (
    SDEConfig,
    SmallBallConfig,
    conditioned_mean_path,
    empirical_mean_path,
    endpoint_window_mean_path,
    l2_distance,
    simulate_sde_ensemble,
    small_ball_estimate,
    small_ball_exponent_fit,
    transition_fraction,
    write_columns,
)
from .mpp import MPPProblem, OptimizerConfig, solve_mpp, write_result
from .om import DriftSpec, check_assumption_A, evaluate_om

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3

DEFAULT_GRID = {"T": 1.0, "n": 129}
ROUGHNESS_BETA = 0.25

# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


def _obj(properties: dict, required: tuple[str, ...] = ()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_FAMILY = lambda name: {"const": name}  # noqa: E731

_DEFS = {
    "grid": _obj({"T": _POS, "n": {"type": "integer", "minimum": 3, "maximum": 4096}}),
    "sigma": {
        "oneOf": [
            _obj({"family": _FAMILY("constant"), "c": _NUM}, ("family", "c")),
            _obj({"family": _FAMILY("sinusoidal"), "c": _NUM, "n": {"type": "integer", "minimum": 1}}, ("family", "c", "n")),
            _obj(
                {
                    "family": _FAMILY("tabulated"),
                    "times": {"type": "array", "items": _NUM, "minItems": 2},
                    "values": {"type": "array", "items": _NUM, "minItems": 2},
                },
                ("family", "times", "values"),
            ),
        ]
    },
    "noise": _obj({"H": _NUM, "sigma": {"$ref": "#/$defs/sigma"}}, ("H", "sigma")),
    "drift": {
        "oneOf": [
            _obj({"family": _FAMILY("double_well"), "a": _POS}, ("family",)),
            _obj({"family": _FAMILY("linear"), "k": _NUM}, ("family", "k")),
            _obj({"family": _FAMILY("zero")}, ("family",)),
        ]
    },
    "path": {
        "oneOf": [
            _obj({"kind": {"enum": ["phi", "phi_dot"]}, "values": {"type": "array", "items": _NUM}}, ("kind", "values")),
            _obj({"kind": {"enum": ["phi", "phi_dot"]}, "csv": {"type": "string"}, "column": {"type": "string"}}, ("kind", "csv", "column")),
            _obj(
                {"kind": {"enum": ["phi", "phi_dot"]}, "affine": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
                ("kind", "affine"),
            ),
        ]
    },
    "optimizer": _obj(
        {
            "max_iters": {"type": "integer", "minimum": 1},
            "grad_tol": _POS,
            "newton_steps": {"type": "integer", "minimum": 0},
            "max_rounds": {"type": "integer", "minimum": 1},
            "gap_tol": _POS,
        }
    ),
    "norm": {
        "oneOf": [
            _obj({"kind": {"const": "sup"}}, ("kind",)),
            _obj({"kind": {"const": "holder"}, "beta": _POS}, ("kind", "beta")),
        ]
    },
    "mpp_overlay": _obj({"x1": _NUM, "penalty": _POS, "optimizer": {"$ref": "#/$defs/optimizer"}}, ("x1",)),
}

_COMMON = {
    "description": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
    "grid": {"$ref": "#/$defs/grid"},
}

_SCHEMAS = {
    "om-eval": _obj(
        {
            **_COMMON,
            "noise": {"$ref": "#/$defs/noise"},
            "drift": {"$ref": "#/$defs/drift"},
            "x0": _NUM,
            "path": {"$ref": "#/$defs/path"},
            "beta": _POS,
        },
        ("noise", "drift", "x0", "path"),
    ),
    "mpp": _obj(
        {
            **_COMMON,
            "noise": {"$ref": "#/$defs/noise"},
            "drift": {"$ref": "#/$defs/drift"},
            "x0": _NUM,
            "x1": _NUM,
            "beta": _POS,
            "penalty": _POS,
            "optimizer": {"$ref": "#/$defs/optimizer"},
        },
        ("noise", "drift", "x0", "x1"),
    ),
    "simulate": _obj(
        {
            **_COMMON,
            "noise": {"$ref": "#/$defs/noise"},
            "drift": {"$ref": "#/$defs/drift"},
            "x0": _NUM,
            "n_paths": {"type": "integer", "minimum": 1},
            "antithetic": {"type": "boolean"},
            "beta": _POS,
            "threshold": _NUM,
            "window": _POS,
            "export_paths": {"type": "integer", "minimum": 0},
            "mpp": {"$ref": "#/$defs/mpp_overlay"},
        },
        ("noise", "drift", "x0", "n_paths"),
    ),
    "smallball": _obj(
        {
            **_COMMON,
            "noise": {"$ref": "#/$defs/noise"},
            "norm": {"$ref": "#/$defs/norm"},
            "epsilons": {"type": "array", "items": _POS, "minItems": 1},
            "n_samples": {"type": "integer", "minimum": 1},
        },
        ("noise", "norm", "n_samples"),
    ),
    "check": _obj(
        {**_COMMON, "noise": {"$ref": "#/$defs/noise"}, "drift": {"$ref": "#/$defs/drift"}, "beta": _POS},
        ("noise", "drift"),
    ),
    "figures": _obj(
        {
            **_COMMON,
            "panels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "n_paths": {"type": "integer", "minimum": 1},
            "export_paths": {"type": "integer", "minimum": 0},
        }
    ),
}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit code 2)."""


@contextlib.contextmanager
def config_guard():
    """Turn constructor validation errors into :class:`ConfigError`."""
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def validate_config(command: str, cfg: Any) -> dict:
    """Schema check; raises :class:`ConfigError` with the most relevant message."""
    schema = {"$defs": _DEFS, **_SCHEMAS[command]}
    validator = jsonschema.Draft202012Validator(schema)
    err = jsonschema.exceptions.best_match(validator.iter_errors(cfg))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {where}: {err.message}")
    return cfg


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_grid(cfg: dict) -> TimeGrid:
    g = {**DEFAULT_GRID, **cfg.get("grid", {})}
    return TimeGrid(float(g["T"]), int(g["n"]))


def build_sigma(spec: dict) -> Sigma:
    fam = spec["family"]
    if fam == "constant":
        return Sigma.constant(spec["c"])
    if fam == "sinusoidal":
        return Sigma.sinusoidal(spec["c"], spec["n"])
    return Sigma.tabulated(spec["times"], spec["values"])


def build_noise(cfg: dict, grid: TimeGrid) -> NoiseModel:
    return NoiseModel(float(cfg["noise"]["H"]), build_sigma(cfg["noise"]["sigma"]), T=grid.T)


def build_drift(spec: dict) -> DriftSpec:
    fam = spec["family"]
    if fam == "double_well":
        return DriftSpec.double_well(spec.get("a", 1.0))
    if fam == "linear":
        return DriftSpec.linear(spec["k"])
    return DriftSpec.zero()


def _read_csv_column(path: Path, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise ConfigError(f"column {column!r} not found in {path}")
    return np.array([float(r[column]) for r in rows])


def build_path(spec: dict, grid: TimeGrid, base: Path) -> np.ndarray:
    if "values" in spec:
        vals = np.asarray(spec["values"], dtype=float)
    elif "csv" in spec:
        vals = _read_csv_column((base / spec["csv"]).resolve(), spec["column"])
    else:
        a, b = spec["affine"]
        vals = a + b * grid.nodes
    if vals.shape != (grid.n,):
        raise ConfigError(f"path has {vals.size} values but the grid has {grid.n} nodes")
    return vals


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if hasattr(obj, "value") and not isinstance(obj, (str, bytes)):
        return obj.value
    return obj


def dump_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def manifest(command: str, cfg: dict, outputs: list[Path], result: dict, out: Path) -> dict:
    return {
        "tool": "omfrac",
        "version": __version__,
        "command": command,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg,
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
        "result": result,
    }


class Context:
    """Resolved command-line state shared by the subcommands."""

    def __init__(self, out: Path, force: bool, base: Path):
        self.out = out
        self.force = force
        self.base = base


def _assumption_gate(report, ctx: Context, allowed: tuple[str, ...] = ()) -> int:
    bad = [c for c in report.failures() if c.name not in allowed]
    if not bad:
        return EXIT_OK
    for c in bad:
        print(f"assumption (A) violated: {c.name}: {c.detail}", file=sys.stderr)
    if ctx.force:
        print("continuing because --force was given", file=sys.stderr)
        return EXIT_OK
    return EXIT_ASSUMPTION


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _prepare_common(cfg: dict) -> tuple[TimeGrid, NoiseModel, DriftSpec | None]:
    with config_guard():
        grid = build_grid(cfg)
        noise = build_noise(cfg, grid)
        drift = build_drift(cfg["drift"]) if "drift" in cfg else None
    return grid, noise, drift


def cmd_check(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    grid, noise, drift = _prepare_common(cfg)
    if dry_run:
        return EXIT_OK
    report = check_assumption_A(drift, noise, cfg.get("beta"))
    path = dump_json(ctx.out / "check.json", manifest("check", cfg, [], report.to_dict(), ctx.out))
    print(f"assumption (A) {'passes' if report.passed else 'fails'}; report: {path}")
    return _assumption_gate(report, ctx)


def cmd_om_eval(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    grid, noise, drift = _prepare_common(cfg)
    with config_guard():
        vals = build_path(cfg["path"], grid, ctx.base)
    if dry_run:
        return EXIT_OK
    report = check_assumption_A(drift, noise, cfg.get("beta"))
    code = _assumption_gate(report, ctx)
    path = SampledPath(grid, vals)
    x0 = float(cfg["x0"])
    if cfg["path"]["kind"] == "phi":
        ev = evaluate_om(noise, drift, x0, phi=path)
    else:
        ev = evaluate_om(noise, drift, x0, phi_dot=path)
    result = {**ev.to_dict(), "assumption_report": report.to_dict()}
    out = dump_json(ctx.out / "om_eval.json", manifest("om-eval", cfg, [], result, ctx.out))
    print(f"J = {ev.J:.12g} (kinetic {ev.kinetic:.6g}, divergence {ev.divergence:.6g}); report: {out}")
    return code


def _optimizer(spec: dict | None) -> OptimizerConfig:
    return OptimizerConfig(**(spec or {}))


def cmd_mpp(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    grid, noise, drift = _prepare_common(cfg)
    with config_guard():
        problem = MPPProblem(
            float(cfg["x0"]),
            float(cfg["x1"]),
            drift,
            noise,
            grid,
            penalty=float(cfg.get("penalty", 100.0)),
            optimizer=_optimizer(cfg.get("optimizer")),
            beta=cfg.get("beta"),
        )
    if dry_run:
        return EXIT_OK
    report = check_assumption_A(drift, noise, cfg.get("beta"))
    code = _assumption_gate(report, ctx)
    if code != EXIT_OK:
        dump_json(ctx.out / "mpp_manifest.json", manifest("mpp", cfg, [], {"assumption_report": report.to_dict()}, ctx.out))
        return code
    res = solve_mpp(problem, check_assumptions=False)
    csv_path, diag_path = write_result(res, ctx.out / "mpp.csv", noise, drift)
    result = {**res.diagnostics(), "assumption_report": report.to_dict()}
    dump_json(ctx.out / "mpp_manifest.json", manifest("mpp", cfg, [csv_path, diag_path], result, ctx.out))
    print(f"MPP J = {res.J:.12g}, converged = {res.converged}, boundary gap = {res.boundary_gap:.3g}; path: {csv_path}")
    return EXIT_OK if res.converged else EXIT_RUNTIME


def _simulate(cfg: dict, ctx: Context, out: Path) -> tuple[int, dict, list[Path]]:
    grid, noise, drift = _prepare_common(cfg)
    beta = cfg.get("beta")
    report = check_assumption_A(drift, noise, beta)
    # the ensemble is meaningful without the A2 ratio; other failures block
    code = _assumption_gate(report, ctx, allowed=("A2_ratio",))
    if code != EXIT_OK:
        return code, {"assumption_report": report.to_dict()}, []
    sde = SDEConfig(drift, noise, float(cfg["x0"]), grid, int(cfg["n_paths"]), int(cfg.get("seed", 0)), bool(cfg.get("antithetic", False)), beta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ens = simulate_sde_ensemble(sde)
    threshold = float(cfg.get("threshold", 0.0))
    t = grid.nodes
    outputs = []
    n_export = min(int(cfg.get("export_paths", 100)), ens.n_paths)
    cols = {"t": t, **{f"path_{i}": ens.samples[i] for i in range(n_export)}}
    outputs.append(write_columns(out / "paths.csv", cols))

    mean = empirical_mean_path(ens)
    frac = transition_fraction(ens, threshold)
    nan = np.full(grid.n, np.nan)
    cond = conditioned_mean_path(ens, threshold) if frac > 0 else None
    means = {"t": t, "mean": mean.values, "conditioned_mean": nan if cond is None else cond.values}
    result: dict = {
        "n_paths": ens.n_paths,
        "transition_fraction": frac,
        "threshold": threshold,
        "assumption_report": report.to_dict(),
    }
    if ROUGHNESS_BETA < noise.H:
        rough = batch_path_norm(ens.samples, grid, NormSpec.holder(ROUGHNESS_BETA))
        result["holder_0.25_median"] = float(np.median(rough))

    if "mpp" in cfg:
        spec = cfg["mpp"]
        x1 = float(spec["x1"])
        problem = MPPProblem(float(cfg["x0"]), x1, drift, noise, grid, float(spec.get("penalty", 100.0)), _optimizer(spec.get("optimizer")), beta)
        res = solve_mpp(problem, check_assumptions=False)
        outputs.append(write_columns(out / "mpp.csv", {"t": t, "phi": res.phi.values}))
        window = float(cfg.get("window", 0.2))
        sel = np.abs(ens.samples[:, -1] - x1) < window
        win = endpoint_window_mean_path(ens, x1, window) if sel.any() else None
        means["window_mean"] = nan if win is None else win.values
        result["mpp"] = {"J": res.J, "converged": res.converged, "boundary_gap": res.boundary_gap}
        result["l2_mean_vs_mpp"] = l2_distance(mean, res.phi)
        result["l2_conditioned_mean_vs_mpp"] = None if cond is None else l2_distance(cond, res.phi)
        result["l2_window_mean_vs_mpp"] = None if win is None else l2_distance(win, res.phi)
        result["window"] = {"halfwidth": window, "n_selected": int(sel.sum())}
    outputs.append(write_columns(out / "mean.csv", means))
    return EXIT_OK, result, outputs


def cmd_simulate(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    _prepare_common(cfg)
    if dry_run:
        return EXIT_OK
    code, result, outputs = _simulate(cfg, ctx, ctx.out)
    dump_json(ctx.out / "simulate_manifest.json", manifest("simulate", cfg, outputs, result, ctx.out))
    if code == EXIT_OK:
        print(f"simulated {result['n_paths']} paths; transition fraction {result['transition_fraction']:.4g}; output: {ctx.out}")
    return code


def cmd_smallball(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    with config_guard():
        grid = build_grid({"grid": {"T": 1.0, "n": 257, **cfg.get("grid", {})}})
        noise = build_noise(cfg, grid)
        nspec = cfg["norm"]
        norm = NormSpec.sup() if nspec["kind"] == "sup" else NormSpec.holder(nspec["beta"])
        eps = tuple(cfg["epsilons"]) if "epsilons" in cfg else None
        sb = SmallBallConfig(noise, norm, eps, int(cfg["n_samples"]), int(cfg.get("seed", 0)), grid)
    if dry_run:
        return EXIT_OK
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = small_ball_estimate(sb)
    e, p, s = table.as_arrays()
    rel = np.array([1.0 if r.reliable else 0.0 for r in table.rows])
    csv_path = write_columns(ctx.out / "smallball.csv", {"epsilon": e, "p_hat": p, "stderr": s, "reliable": rel})
    result: dict = {"rows": [r.__dict__ for r in table.rows], "n_samples": table.n_samples}
    try:
        fit = small_ball_exponent_fit(table)
        result["fit"] = fit.__dict__
        if norm.kind.value == "holder":
            result["theory_slope_bound"] = 1.0 / (noise.H - norm.beta)
        else:
            result["theory_slope"] = 1.0 / noise.H
        msg = f"fitted slope {fit.slope:.4g} (r2 {fit.r2:.4g})"
    except ValueError as exc:
        result["fit"] = None
        result["fit_error"] = str(exc)
        msg = f"no fit: {exc}"
    dump_json(ctx.out / "smallball_manifest.json", manifest("smallball", cfg, [csv_path], result, ctx.out))
    print(f"{msg}; table: {csv_path}")
    return EXIT_OK


def figure_names() -> list[str]:
    root = resources.files("omfrac") / "figures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_figure(name: str) -> dict:
    root = resources.files("omfrac") / "figures"
    target = root / f"{name}.json"
    if not target.is_file():
        raise ConfigError(f"unknown figure panel {name!r}; available: {', '.join(figure_names())}")
    return json.loads(target.read_text(encoding="utf-8"))


def cmd_figures(cfg: dict, ctx: Context, dry_run: bool = False) -> int:
    names = cfg.get("panels") or figure_names()
    panels = {}
    for name in names:
        p = load_figure(name)
        for key in ("n_paths", "export_paths", "grid", "seed"):
            if key in cfg:
                p[key] = copy.deepcopy(cfg[key])
        validate_config("simulate", p)
        _prepare_common(p)
        panels[name] = p
    if dry_run:
        return EXIT_OK
    summary, outputs, worst = {}, [], EXIT_OK
    for name, p in panels.items():
        sub = ctx.out / name
        code, result, outs = _simulate(p, ctx, sub)
        dump_json(sub / "simulate_manifest.json", manifest("simulate", p, outs, result, sub))
        outputs += outs
        summary[name] = {"config": p, **result}
        worst = max(worst, code)
        print(f"{name}: transition fraction {result.get('transition_fraction', float('nan')):.4g}")
    dump_json(ctx.out / "figures_manifest.json", manifest("figures", cfg, outputs, summary, ctx.out))
    return worst


COMMANDS: dict[str, Callable[[dict, Context, bool], int]] = {
    "om-eval": cmd_om_eval,
    "mpp": cmd_mpp,
    "simulate": cmd_simulate,
    "smallball": cmd_smallball,
    "check": cmd_check,
    "figures": cmd_figures,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omfrac", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"omfrac {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, required=name != "figures", help="JSON config file")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: config 'out' or ./omfrac-out)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="continue when Assumption (A) fails")
        sp.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
            cfg["seed"] = args.seed
        validate_config(args.command, cfg)
        out = args.out or Path(cfg.get("out", "omfrac-out"))
        base = args.config.parent if args.config is not None else Path.cwd()
        ctx = Context(Path(out), args.force, base)
        code = COMMANDS[args.command](cfg, ctx, args.dry_run)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.dry_run and code == EXIT_OK:
        print(f"{args.command}: config valid")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
