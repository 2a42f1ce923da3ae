"""Command-line driver: configuration, subcommand dispatch and report files.

Configuration is an INI file (see :class:`RunConfig`); individual values can
be overridden with ``--set section.key=value``. Every command writes a JSON
report whose second line is a header holding the timestamp; everything else
is a deterministic function of the configuration.

Exit codes: 0 success, 1 numerical or verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, linalg
from .coeffs import FAMILIES, EllipticityError, builtin_field
from .conditions import (
    ball_family,
    check_C,
    check_E,
    check_G,
    check_harnack,
    check_sandwich,
    comparison_check,
    equivalence_suite,
)
from .grid import BallSpec, GeometryError, TorusGrid, complement_mask, make_ball_mask
from .montecarlo import SdeConfig, simulate_exit_time, simulate_hitting_probability
from .operator import (
    SCHEMES,
    DomainError,
    StationarityError,
    assemble_generator,
    dual_generator,
    invariant_density,
    killed_submatrix,
)
from .potential import (
    PositivityError,
    SeparationError,
    capacity,
    equilibrium_measure,
    exit_time,
    green_column,
    harmonic_extension,
    identity_suite,
    write_field_csv,
    write_gnuplot_slice,
)

COMMANDS = ("invariant", "exit-time", "green", "capacity", "harnack", "check", "verify", "mc", "report")
OUTPUT_ENV = "POTKIT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on.

    INI layout (all keys optional)::

        [grid]    d, n, length
        [field]   family, plus family parameters (eps, strength, diag)
        [operator] scheme
        [solver]  tol, maxiter, restart
        [balls]   radii, centers ("default" or "x y z; x y z"), K, delta, trials
        [mc]      dt, paths, max_steps
        [output]  dir
        [run]     seed
    """

    d: int = 3
    n: int = 16
    length: float = 1.0
    family: str = "laplace"
    params: dict = field(default_factory=dict)
    scheme: str = "upwind"
    tol: float = linalg.DEFAULT_TOL
    maxiter: int = linalg.DEFAULT_MAXITER
    restart: int = linalg.DEFAULT_RESTART
    radii: tuple = (0.15, 0.2, 0.24)
    centers: tuple | None = None
    K: float = 2.0
    delta: float = 0.5
    trials: int = 100
    mc_dt: float = 1e-5
    mc_paths: int = 100_000
    mc_max_steps: int = 10**7
    output_dir: str = "potkit-out"
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown field family {self.family!r}; choose from {', '.join(FAMILIES)}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.d < 2 or self.n < 8 or not self.length > 0:
            raise ConfigError("grid needs d >= 2, n >= 8 and a positive length")
        if not self.tol > 0 or self.maxiter < 1 or self.restart < 1:
            raise ConfigError("solver needs tol > 0, maxiter >= 1 and restart >= 1")
        if not self.radii or min(self.radii) <= 0:
            raise ConfigError("radii must be a nonempty list of positive numbers")
        if not self.K > 1 or not 0 < self.delta < 1:
            raise ConfigError("need K > 1 and 0 < delta < 1")
        if self.trials < 1 or self.mc_paths < 1 or self.mc_max_steps < 1 or not self.mc_dt > 0:
            raise ConfigError("trial, path and step counts must be >= 1 and dt > 0")
        if self.centers is not None and any(len(c) != self.d for c in self.centers):
            raise ConfigError(f"every centre needs {self.d} coordinates")

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.d, self.n, self.length)

    def make_field(self):
        return builtin_field(self.family, self.d, self.length, **self.params)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["radii"] = list(self.radii)
        out["centers"] = None if self.centers is None else [list(c) for c in self.centers]
        out["params"] = {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.params.items())}
        return out

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["grid"] = {"d": str(self.d), "n": str(self.n), "length": repr(self.length)}
        cp["field"] = {"family": self.family}
        for key, value in sorted(self.params.items()):
            cp["field"][key] = " ".join(map(repr, value)) if isinstance(value, tuple) else repr(value)
        cp["operator"] = {"scheme": self.scheme}
        cp["solver"] = {"tol": repr(self.tol), "maxiter": str(self.maxiter), "restart": str(self.restart)}
        centers = "default" if self.centers is None else "; ".join(" ".join(map(repr, c)) for c in self.centers)
        cp["balls"] = {"radii": " ".join(map(repr, self.radii)), "centers": centers,
                       "K": repr(self.K), "delta": repr(self.delta), "trials": str(self.trials)}
        cp["mc"] = {"dt": repr(self.mc_dt), "paths": str(self.mc_paths), "max_steps": str(self.mc_max_steps)}
        cp["output"] = {"dir": self.output_dir}
        cp["run"] = {"seed": str(self.seed)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, overrides=()) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
            for item in overrides:
                key, sep, value = item.partition("=")
                section, dot, name = key.strip().partition(".")
                if not sep or not dot:
                    raise ConfigError(f"override {item!r} is not of the form section.key=value")
                if not cp.has_section(section):
                    cp.add_section(section)
                cp[section][name] = value.strip()
            return cls._from_parser(cp)
        except (configparser.Error, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {exc}") from exc

    @classmethod
    def _from_parser(cls, cp) -> "RunConfig":
        known = {
            "grid": {"d", "n", "length"}, "operator": {"scheme"}, "solver": {"tol", "maxiter", "restart"},
            "balls": {"radii", "centers", "K", "delta", "trials"}, "mc": {"dt", "paths", "max_steps"},
            "output": {"dir"}, "run": {"seed"},
        }
        for section in cp.sections():
            if section == "field":
                continue
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            extra = set(cp[section]) - known[section]
            if extra:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
        kw = {}
        g = cp["grid"] if cp.has_section("grid") else {}
        if "d" in g:
            kw["d"] = int(g["d"])
        if "n" in g:
            kw["n"] = int(g["n"])
        if "length" in g:
            kw["length"] = float(g["length"])
        if cp.has_section("field"):
            params = {}
            for key, value in cp["field"].items():
                if key == "family":
                    kw["family"] = value.strip()
                else:
                    vals = _floats(value)
                    params[key] = vals if key == "diag" or len(vals) > 1 else vals[0]
            kw["params"] = params
        if cp.has_section("operator") and "scheme" in cp["operator"]:
            kw["scheme"] = cp["operator"]["scheme"].strip()
        if cp.has_section("solver"):
            s = cp["solver"]
            for key, conv in (("tol", float), ("maxiter", int), ("restart", int)):
                if key in s:
                    kw[key] = conv(s[key])
        if cp.has_section("balls"):
            b = cp["balls"]
            if "radii" in b:
                kw["radii"] = _floats(b["radii"])
            if "centers" in b and b["centers"].strip().lower() != "default":
                kw["centers"] = tuple(_floats(c) for c in b["centers"].split(";") if c.strip())
            for key, conv in (("K", float), ("delta", float), ("trials", int)):
                if key in b:
                    kw[key] = conv(b[key])
        if cp.has_section("mc"):
            m = cp["mc"]
            for key, name, conv in (("dt", "mc_dt", float), ("paths", "mc_paths", int),
                                    ("max_steps", "mc_max_steps", int)):
                if key in m:
                    kw[name] = conv(m[key])
        if cp.has_section("output") and "dir" in cp["output"]:
            kw["output_dir"] = cp["output"]["dir"].strip()
        if cp.has_section("run") and "seed" in cp["run"]:
            kw["seed"] = int(cp["run"]["seed"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, overrides)

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return all(getattr(self, f.name) == getattr(other, f.name) for f in fields(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_report(path: Path, command: str, config: RunConfig, result: dict, timestamp: str | None = None) -> None:
    """JSON report whose second line is the only run-dependent one (the header)."""
    timestamp = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    header = json.dumps({"timestamp": timestamp, "tool": "potkit", "version": __version__})
    body = json.dumps({"command": command, "config": _jsonable(config.as_dict()), "result": _jsonable(result)},
                      indent=2)
    lines = body.split("\n")
    text = "\n".join([lines[0], f'  "header": {header},', *lines[1:]]) + "\n"
    path.write_text(text)


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (" ".join(map(repr, v)) if isinstance(v, tuple) else v) for k, v in row.items()})


class _Run:
    """Lazily built objects shared by the subcommands of one invocation."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.grid = cfg.grid
        self.field = cfg.make_field()
        self._M = self._pi = None

    @property
    def M(self):
        if self._M is None:
            self._M = assemble_generator(self.field, self.grid, self.cfg.scheme)
        return self._M

    @property
    def pi(self):
        if self._pi is None:
            M = self.M if self.cfg.scheme == "upwind" else assemble_generator(self.field, self.grid)
            self._pi = invariant_density(M)
        return self._pi

    def center(self, text):
        if text:
            c = _floats(text)
            if len(c) != self.grid.d:
                raise ConfigError(f"centre needs {self.grid.d} coordinates")
            return c
        return tuple(np.full(self.grid.d, self.grid.length / 2))

    def radius(self, value):
        return max(self.cfg.radii) if value is None else value

    def balls(self):
        return ball_family(self.grid, self.cfg.radii, self.cfg.centers)

    def generator(self, dual: bool):
        return dual_generator(self.M, self.pi) if dual else self.M


def _cmd_invariant(run: _Run, args) -> tuple[dict, bool]:
    pi = run.pi
    write_field_csv(run.out / "invariant.csv", run.grid, pi.mu, "mu")
    if run.grid.d >= 3:
        write_gnuplot_slice(run.out / "invariant.slice.dat", run.grid, pi.mu)
    return {"residual": pi.residual, "iterations": pi.iterations, "normalization": "sum(pi)=1, mu=pi/h^d",
            "mu_min": float(pi.mu.min()), "mu_max": float(pi.mu.max())}, True


def _ball(run, args):
    ball = BallSpec(run.center(args.center), run.radius(args.radius))
    return ball, make_ball_mask(run.grid, ball)


def _cmd_exit_time(run: _Run, args):
    ball, D = _ball(run, args)
    u = exit_time(killed_submatrix(run.generator(args.dual), D, fitted=True), D)
    write_field_csv(run.out / "exit-time.csv", run.grid, u.values, "exit_time")
    if run.grid.d >= 3:
        write_gnuplot_slice(run.out / "exit-time.slice.dat", run.grid, u.values, ball.center[2])
    x = run.grid.cell_of(ball.center)
    return {"radius": ball.radius, "center": ball.center, "provenance": u.provenance,
            "at_center": u.at(x), "max": float(u.values.max()),
            "iterations": u.report.iterations, "solver_residual": u.report.residual}, True


def _cmd_green(run: _Run, args):
    ball, D = _ball(run, args)
    src = run.grid.cell_of(ball.center)
    g = green_column(killed_submatrix(run.generator(args.dual), D, fitted=True), D, src)
    write_field_csv(run.out / "green.csv", run.grid, g.values, "green")
    if run.grid.d >= 3:
        write_gnuplot_slice(run.out / "green.slice.dat", run.grid, g.values, ball.center[2])
    return {"radius": ball.radius, "center": ball.center, "source": g.source, "provenance": g.provenance,
            "normalization": "occupation time / h^d", "max": float(g.values.max())}, True


def _cmd_capacity(run: _Run, args):
    center = run.center(args.center)
    r = min(run.cfg.radii) if args.radius is None else args.radius
    A = make_ball_mask(run.grid, BallSpec(center, r))
    B = complement_mask(make_ball_mask(run.grid, BallSpec(center, run.cfg.K * r)))
    M = run.generator(args.dual)
    ext = harmonic_extension(M, A, B)
    cap = capacity(M, run.pi, A, B, ext)
    nu = equilibrium_measure(M, run.pi, A, B, ext)
    write_field_csv(run.out / "harmonic.csv", run.grid, ext.values, "h")
    write_field_csv(run.out / "equilibrium.csv", run.grid, nu.weights, "nu")
    return {"inner_radius": r, "outer_radius": run.cfg.K * r, "center": center, "energy": cap.energy,
            "flux": cap.flux, "nu_mass": nu.mass, "mismatch": cap.mismatch, "separation": cap.separation,
            "provenance": cap.provenance}, True


def _condition_result(report):
    return report.as_dict(), report.passed


def _cmd_harnack(run: _Run, args):
    rep = check_harnack(run.M, run.balls(), run.cfg.delta, run.cfg.trials, run.cfg.seed, run.pi)
    _write_rows(run.out / "harnack.csv", rep.rows)
    return _condition_result(rep)


def _cmd_check(run: _Run, args):
    balls = run.balls()
    cond = args.condition
    if cond == "G":
        rep = check_G(run.generator(args.dual), balls, run.cfg.K)
    elif cond == "E":
        rep = check_E(run.generator(args.dual), balls, run.cfg.delta)
    elif cond == "C":
        rep = check_C(run.generator(args.dual), run.pi, balls, run.cfg.K)
    else:
        rep = check_harnack(run.M, balls, run.cfg.delta, run.cfg.trials, run.cfg.seed, run.pi)
    _write_rows(run.out / f"check-{cond}.csv", rep.rows)
    return _condition_result(rep)


def _cmd_verify(run: _Run, args):
    grid, cfg = run.grid, run.cfg
    center = run.center(args.center)
    r_in = min(cfg.radii)
    D = make_ball_mask(grid, BallSpec(center, max(cfg.radii)))
    A = make_ball_mask(grid, BallSpec(center, r_in))
    B = complement_mask(make_ball_mask(grid, BallSpec(center, cfg.K * r_in)))
    reports = identity_suite(run.M, run.pi, D, A, B, tol=1e-8, trials=cfg.trials, seed=cfg.seed)
    reports.append(check_sandwich(run.M, run.pi, A, B))
    reports.append(comparison_check(run.M, run.pi, A, B, grid.cell_of(center)))
    for rep in reports:
        print(f"{rep.name:28s} {rep.value:.3e}  {'ok' if rep.passed else 'FAIL'}")
    return {"identities": [r.as_dict() for r in reports]}, all(r.passed for r in reports)


def _cmd_mc(run: _Run, args):
    grid, cfg = run.grid, run.cfg
    center = run.center(args.center)
    sde = SdeConfig(dt=cfg.mc_dt, max_steps=cfg.mc_max_steps, n_paths=cfg.mc_paths, seed=cfg.seed)
    M = run.M
    R = max(cfg.radii)
    D = make_ball_mask(grid, BallSpec(center, R))
    src = grid.cell_of(center)
    pde_exit = exit_time(killed_submatrix(M, D, fitted=True), D).at(src)
    mc_exit = simulate_exit_time(run.field, D, grid.centers[src], sde)
    r_in = min(cfg.radii)
    A = make_ball_mask(grid, BallSpec(center, r_in))
    B = complement_mask(make_ball_mask(grid, BallSpec(center, cfg.K * r_in)))
    offset = np.zeros(grid.d)
    offset[0] = 0.5 * (1 + cfg.K) * r_in
    start = grid.cell_of(np.asarray(center) + offset)
    pde_hit = float(harmonic_extension(M, A, B).values[start])
    mc_hit = simulate_hitting_probability(run.field, A, B, grid.centers[start], sde)
    rows = []
    for name, pde, mc in (("exit-time", pde_exit, mc_exit), ("hitting-probability", pde_hit, mc_hit)):
        z = abs(mc.mean - pde) / mc.stderr if mc.stderr > 0 else float(abs(mc.mean - pde) > 0) * np.inf
        ok = bool(z <= 3.0 and mc.reliable)
        rows.append({"quantity": name, "pde": pde, "mc": mc.as_dict(), "z": z, "passed": ok})
        print(f"{name:20s} pde {pde:.6g}  mc {mc.mean:.6g} +- {mc.stderr:.2g}  z={z:.2f}  {'ok' if ok else 'FAIL'}")
    return {"comparisons": rows}, all(r["passed"] for r in rows)


def _cmd_report(run: _Run, args):
    cfg = run.cfg
    rep = equivalence_suite(run.field, run.grid, cfg.radii, cfg.K, cfg.centers, cfg.scheme)
    for tag, cond in (("C", rep.C), ("G", rep.G), ("E_dual", rep.E_dual)):
        _write_rows(run.out / f"report-{tag}.csv", cond.rows)
        consts = ", ".join(f"{k}={v:.4g}" for k, v in cond.constants.items())
        print(f"{tag:7s} {consts}  stability {max(rep.stability[tag].values()):.3f}")
    print(f"verdict: {'pass' if rep.verdict else 'fail'}")
    return rep.as_dict(), rep.verdict


HANDLERS = {
    "invariant": _cmd_invariant, "exit-time": _cmd_exit_time, "green": _cmd_green, "capacity": _cmd_capacity,
    "harnack": _cmd_harnack, "check": _cmd_check, "verify": _cmd_verify, "mc": _cmd_mc, "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="potkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"potkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "invariant": "compute and export the invariant density",
        "exit-time": "mean exit time from a ball",
        "green": "Green function column from the ball centre",
        "capacity": "capacity, harmonic extension and equilibrium measure of a condenser",
        "harnack": "Harnack ratios over the ball family",
        "check": "one condition scan over the ball family",
        "verify": "exact discrete identities; nonzero exit on any failure",
        "mc": "Monte Carlo cross-checks against the PDE solver",
        "report": "full equivalence suite on n and 2n grids",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("-c", "--config", help="INI configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("-o", "--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
        p.add_argument("--center", help="ball centre as 'x y z' (default: torus centre)")
        if name in ("exit-time", "green", "capacity"):
            p.add_argument("--radius", type=float, help="ball radius (default from the family radii)")
        if name in ("exit-time", "green", "capacity", "check"):
            p.add_argument("--dual", action="store_true", help="use the dual generator")
        if name == "check":
            p.add_argument("--condition", choices=("G", "E", "C", "Har"), required=True)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            cfg = RunConfig.from_file(args.config, args.set)
        else:
            cfg = RunConfig.from_ini("", args.set)
        out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        run = _Run(cfg, out)
        with linalg.solver_options(tol=cfg.tol, maxiter=cfg.maxiter, restart=cfg.restart):
            result, ok = HANDLERS[args.command](run, args)
    except (ConfigError, GeometryError, EllipticityError, SeparationError, DomainError) as exc:
        parser.print_usage(sys.stderr)
        print(f"potkit: error: {exc}", file=sys.stderr)
        return 2
    except (linalg.SolverError, StationarityError, PositivityError) as exc:
        print(f"potkit: numerical failure: {exc}", file=sys.stderr)
        return 1
    write_report(out / f"{args.command}.json", args.command, cfg, result)
    print(f"report written to {out / (args.command + '.json')}")
    return 0 if ok else 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
