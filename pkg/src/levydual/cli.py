"""Batch runner: ``levydual {simulate,solve,oracle,audit,report} --config FILE``.

Configs are INI files.  ``[meta] schema_version`` must equal
:data:`SCHEMA_VERSION`; unknown sections or keys are rejected before any
computation starts.  Every JSON output embeds the config hash, the seed and
the package version, and contains no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dual_domain import ControlBasis, risk_neutral_density
from .dual_solver import AuditRow, outer_minimize, weak_duality_audit
from .errors import (
    DiscretizationError,
    DomainError,
    LevyDualError,
    NoEquivalentMeasureError,
    NumericalFailure,
    UnsupportedStructureError,
    ValidationError,
)
from .market_model import FiniteAtoms, LevyMarketSpec, Multiplicative, PiecewiseConstant, Strategy, simulate_paths
from .tree_oracle import TreeMarket, build_tree, solve_dual_exact, solve_primal_exact, super_hedge_exact
from .utility import make_shortfall_utility, parse_claim, parse_loss

__all__ = ["run", "main", "load_config", "ExperimentConfig", "SCHEMA_VERSION", "COMMANDS"]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "solve", "oracle", "audit", "report")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

# section -> key -> default (None: required)
_SCHEMA = {
    "meta": {"schema_version": None},
    "market": {"b": "0", "sigma": "0", "atoms": "", "intensities": "", "zeta": "", "theta": "",
               "knots": "", "s0": "1", "T": "1"},
    "utility": {"loss": "quadratic", "claim": "constant(1)"},
    "solve": {"z": "0.5", "n_paths": "20000", "n_steps": "20", "seed": "0", "restarts": "5",
              "iters": "100", "n_buckets": "1", "budget_tol": "1e-3"},
    "oracle": {"depths": "", "tree": "", "z": ""},
    "audit": {"betas": "-0.5,0,0.5,1"},
    "output": {"directory": "out", "formats": "json,csv"},
}


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> raw string
    base_dir: Path

    def get(self, section, key):
        return self.values[section][key]

    def experiment(self) -> dict:
        """The config without the output location, which does not affect results."""
        vals = {sec: dict(keys) for sec, keys in self.values.items()}
        del vals["output"]["directory"]
        return vals

    def canonical(self) -> str:
        return json.dumps(self.experiment(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.get("solve", "seed"))

    # -- typed views -------------------------------------------------------
    def _time_fn(self, key):
        vals = _floats(self.get("market", key))
        knots = _floats(self.get("market", "knots"))
        if len(vals) == 1:
            return vals[0]
        if len(vals) != len(knots) + 1:
            raise ValidationError(f"market.{key}: {len(vals)} values need {len(vals) - 1} knots")
        return PiecewiseConstant((0.0,) + tuple(knots), tuple(vals))

    def market(self) -> LevyMarketSpec:
        m = self.values["market"]
        atoms = _floats(m["atoms"])
        lam = _floats(m["intensities"])
        if m["zeta"].strip():
            jumps = Multiplicative(self._time_fn("zeta"), tuple(_floats(m["theta"])), tuple(atoms), tuple(lam))
        else:
            jumps = FiniteAtoms(tuple(atoms), tuple(lam))
        return LevyMarketSpec(self._time_fn("b"), self._time_fn("sigma"), jumps,
                              float(m["s0"]), float(m["T"]))

    def utility(self):
        return make_shortfall_utility(parse_loss(self.get("utility", "loss")),
                                      parse_claim(self.get("utility", "claim")))

    def z_list(self) -> list[float]:
        return _floats(self.get("solve", "z"))

    def oracle_z(self) -> list[float]:
        return _floats(self.get("oracle", "z")) or self.z_list()

    def depths(self) -> list[int]:
        out = []
        for d in _floats(self.get("oracle", "depths")):
            if d != int(d):
                raise ValidationError(f"oracle depth {d} is not an integer")
            out.append(int(d))
        return out

    def tree_fixture(self) -> TreeMarket | None:
        path = self.get("oracle", "tree").strip()
        if not path:
            return None
        p = Path(path)
        if not p.is_absolute():
            p = self.base_dir / p
        try:
            return TreeMarket.from_json(p.read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read tree fixture {p}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"tree fixture {p} is not JSON: {exc}") from exc

    def out_dir(self) -> Path:
        p = Path(self.get("output", "directory"))
        return p if p.is_absolute() else Path.cwd() / p

    def validate(self) -> None:
        """Range checks against module preconditions; builds every object once."""
        s = self.values["solve"]
        for key in ("n_paths", "n_steps", "restarts", "iters", "n_buckets"):
            try:
                val = int(s[key])
            except ValueError:
                raise ValidationError(f"solve.{key} must be an integer") from None
            if val < 1:
                raise ValidationError(f"solve.{key} must be positive")
        if int(s["n_paths"]) < 2:
            raise ValidationError("solve.n_paths must be at least 2")
        int(s["seed"])
        if any(not z > 0 for z in self.z_list() + self.oracle_z()):
            raise ValidationError("every z must be positive")
        if not self.z_list():
            raise ValidationError("solve.z must list at least one wealth")
        if not float(s["budget_tol"]) > 0:
            raise ValidationError("solve.budget_tol must be positive")
        if any(d < 1 for d in self.depths()):
            raise ValidationError("oracle depths must be positive")
        _floats(self.get("audit", "betas"))
        fmts = {f.strip() for f in self.get("output", "formats").split(",") if f.strip()}
        if not fmts <= {"json", "csv"}:
            raise ValidationError(f"unknown output formats {sorted(fmts - {'json', 'csv'})}")
        self.market()
        self.utility()
        self.tree_fixture()


def load_config(path, overrides=(), paths=None, steps=None, seed=None, out=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ValidationError(f"config does not parse: {exc}") from exc
    if not read:
        raise ValidationError(f"cannot read config {path}")
    values = {sec: dict(keys) for sec, keys in _SCHEMA.items()}
    unknown = []
    for sec in parser.sections():
        if sec not in _SCHEMA:
            unknown.append(f"[{sec}]")
            continue
        for key, val in parser.items(sec):
            if key not in _SCHEMA[sec]:
                unknown.append(f"{sec}.{key}")
            else:
                values[sec][key] = val.strip()
    for sec, key, val in _split_overrides(overrides):
        if sec not in _SCHEMA or key not in _SCHEMA[sec]:
            unknown.append(f"{sec}.{key}")
        else:
            values[sec][key] = val
    for key, val in (("n_paths", paths), ("n_steps", steps), ("seed", seed)):
        if val is not None:
            values["solve"][key] = str(val)
    if out is not None:
        values["output"]["directory"] = str(out)
    if unknown:
        raise ValidationError("unknown config keys: " + ", ".join(unknown))
    missing = [f"{s}.{k}" for s, keys in values.items() for k, v in keys.items() if v is None]
    if missing:
        raise ValidationError("missing config keys: " + ", ".join(missing))
    if values["meta"]["schema_version"] != str(SCHEMA_VERSION):
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}")
    cfg = ExperimentConfig(values, Path(path).resolve().parent)
    try:
        cfg.validate()
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from exc
    return cfg


def _split_overrides(overrides):
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        lhs, val = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        yield sec.strip(), key.strip(), val.strip()


# -- output helpers ------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    return str(x)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, cfg: ExperimentConfig, command: str, payload: dict):
    record = {"command": command, "config_hash": cfg.hash, "seed": cfg.seed,
              "version": f"v{__version__}", "config": cfg.experiment()}
    record.update(payload)
    path.write_text(json.dumps(_jsonable(record), sort_keys=True, indent=2) + "\n")


def _ztag(z):
    return format(z, "g").replace(".", "p")


# -- commands --------------------------------------------------------------------

def _ensemble(cfg):
    return simulate_paths(cfg.market(), int(cfg.get("solve", "n_steps")),
                          int(cfg.get("solve", "n_paths")), cfg.seed)


def _solve_all(cfg, ens):
    spec, u = cfg.market(), cfg.utility()
    s = cfg.values["solve"]
    basis = ControlBasis.for_spec(spec, int(s["n_buckets"]))
    results, w_hat = {}, None
    for z in cfg.z_list():
        try:
            res = outer_minimize(spec, u, z, ens, basis=basis, restarts=int(s["restarts"]),
                                 iters=int(s["iters"]), w_hat=w_hat)
        except DomainError as exc:
            results[z] = exc
            continue
        w_hat = res.w_hat
        results[z] = res
    return results


def _solve_payload(z, res, tol):
    if isinstance(res, DomainError):
        return {"z": z, "status": "super-hedged", "message": str(res)}
    d = res.to_dict()
    d["status"] = "ok"
    d["budget_ok"] = bool(res.budget_residual <= max(tol, 3 * res.budget_se))
    return d


def _cmd_simulate(cfg, out, fmts):
    ens = _ensemble(cfg)
    with (out / "paths.csv").open("w", newline="") as fh:
        ens.to_csv(fh)
    if "json" in fmts:
        _write_json(out / "simulate.json", cfg, "simulate",
                    {"n_paths": ens.n_paths, "n_steps": ens.n_steps, "mean_S_T": float(np.mean(ens.S_T))})


def _cmd_solve(cfg, out, fmts):
    ens = _ensemble(cfg)
    tol = float(cfg.get("solve", "budget_tol"))
    for z, res in _solve_all(cfg, ens).items():
        tag = _ztag(z)
        if "json" in fmts:
            _write_json(out / f"solve_z{tag}.json", cfg, "solve", {"result": _solve_payload(z, res, tol)})
        if "csv" in fmts and not isinstance(res, DomainError):
            _write_csv(out / f"vcurve_z{tag}.csv", ["y", "v_hat", "se"], res.trace)


def _oracle_trees(cfg):
    trees = []
    fixture = cfg.tree_fixture()
    if fixture is not None:
        trees.append(("fixture", fixture))
    for n in cfg.depths():
        trees.append((f"depth{n}", build_tree(cfg.market(), n)))
    return trees


def _oracle_rows(cfg, u):
    rows = []
    for name, tree in _oracle_trees(cfg):
        h = u.cap(tree.terminal_prices)
        cost = super_hedge_exact(tree, h).cost
        for z in cfg.oracle_z():
            primal = solve_primal_exact(tree, u, z)
            row = {"tree": name, "depth": tree.depth, "z": z, "u": primal.u, "superhedge_cost": cost}
            if z < cost:
                dual = solve_dual_exact(tree, u, z, primal)
                row.update({"y": dual.y, "v": dual.v, "bound": dual.bound, "gap": dual.gap,
                            "budget_residual": dual.budget_residual})
            else:
                row["status"] = "super-hedged"
            rows.append(row)
    return rows


def _cmd_oracle(cfg, out, fmts):
    if cfg.tree_fixture() is None and not cfg.depths():
        raise ValidationError("oracle needs [oracle] tree or depths")
    rows = _oracle_rows(cfg, cfg.utility())
    if "json" in fmts:
        _write_json(out / "oracle.json", cfg, "oracle", {"results": rows})
    if "csv" in fmts:
        _write_csv(out / "oracle.csv", ["tree", "depth", "z", "u", "superhedge_cost"],
                   [[r["tree"], r["depth"], r["z"], r["u"], r["superhedge_cost"]] for r in rows])


def _cmd_audit(cfg, out, fmts):
    spec, u = cfg.market(), cfg.utility()
    ens = _ensemble(cfg)
    betas = _floats(cfg.get("audit", "betas"))
    strategies = [Strategy.constant(b) for b in betas]
    rows = []
    for z, res in _solve_all(cfg, ens).items():
        if isinstance(res, DomainError):
            d = risk_neutral_density(spec, ControlBasis.for_spec(spec, int(cfg.get("solve", "n_buckets"))))
            y = 1.0
        else:
            d, y = res.d_star, res.y_star
        for row in weak_duality_audit(spec, u, z, strategies, d, y, ens):
            rows.append([z, y] + row.as_row())
    header = ["z", "y"] + AuditRow.header
    if "csv" in fmts:
        _write_csv(out / "audit.csv", header, rows)
    if "json" in fmts:
        _write_json(out / "audit.json", cfg, "audit",
                    {"rows": [dict(zip(header, r)) for r in rows],
                     "violations": int(sum(1 for r in rows if r[-1]))})


def _cmd_report(cfg, out, fmts):
    u = cfg.utility()
    ens = _ensemble(cfg)
    tol = float(cfg.get("solve", "budget_tol"))
    solved = _solve_all(cfg, ens)
    warnings = []
    oracle_rows = []
    if cfg.tree_fixture() is None and not cfg.depths():
        warnings.append("no oracle configured: comparison against exact tree values skipped")
    else:
        try:
            oracle_rows = [r for r in _oracle_rows(cfg, u) if r["tree"] != "fixture"]
        except UnsupportedStructureError as exc:
            warnings.append(f"oracle unavailable: {exc}")
    comparisons = []
    deepest = {}
    for r in oracle_rows:
        if r["z"] not in deepest or r["depth"] > deepest[r["z"]]["depth"]:
            deepest[r["z"]] = r
    for z, res in solved.items():
        entry = {"z": z}
        if not isinstance(res, DomainError):
            entry.update({"primal_bound": res.primal_bound, "v_se": res.v_se, "y_star": res.y_star,
                          "budget_residual": res.budget_residual, "budget_se": res.budget_se})
        if z in deepest:
            entry.update({"tree_depth": deepest[z]["depth"], "tree_u": deepest[z]["u"]})
            if "primal_bound" in entry:
                entry["mc_minus_tree"] = entry["primal_bound"] - deepest[z]["u"]
        elif oracle_rows or not warnings:
            warnings.append(f"no oracle value for z={z:g}")
        comparisons.append(entry)
    if "json" in fmts:
        _write_json(out / "report.json", cfg, "report",
                    {"solve": [_solve_payload(z, r, tol) for z, r in solved.items()],
                     "oracle": oracle_rows, "comparison": comparisons, "warnings": warnings})
    if "csv" in fmts:
        _write_csv(out / "u_curve.csv", ["z", "mc_primal_bound", "mc_se", "tree_u"],
                   [[c["z"], c.get("primal_bound", float("nan")), c.get("v_se", float("nan")),
                     c.get("tree_u", float("nan"))] for c in comparisons])
        vrows = []
        for z, res in solved.items():
            if not isinstance(res, DomainError):
                vrows += [[z, y, v, se] for y, v, se in res.trace]
        _write_csv(out / "v_curve.csv", ["z", "y", "v_hat", "se"], vrows)


_DISPATCH = {"simulate": _cmd_simulate, "solve": _cmd_solve, "oracle": _cmd_oracle,
             "audit": _cmd_audit, "report": _cmd_report}


def run(command: str, config_path, overrides=(), *, paths=None, steps=None, seed=None, out=None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        if command not in COMMANDS:
            raise ValidationError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        cfg = load_config(config_path, overrides, paths=paths, steps=steps, seed=seed, out=out)
        fmts = {f.strip() for f in cfg.get("output", "formats").split(",") if f.strip()}
        directory = cfg.out_dir()
        directory.mkdir(parents=True, exist_ok=True)
        _DISPATCH[command](cfg, directory, fmts)
    except (ValidationError, DomainError, UnsupportedStructureError, NoEquivalentMeasureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, DiscretizationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LevyDualError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="levydual", description="Shortfall hedging by convex duality.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI experiment file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--paths", type=int)
    ap.add_argument("--steps", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return run(args.command, args.config, args.set, paths=args.paths, steps=args.steps,
               seed=args.seed, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
