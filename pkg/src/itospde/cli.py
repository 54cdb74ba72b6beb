"""Batch command line: ``itospde <subcommand> --config FILE --out DIR``.

Subcommands
-----------
resolvent-verify  resolvent property suite on each configured grid
ito-verify        squared-norm and integral-of-r ledgers, lifting convergence
maxprin           positive-part ensemble, Gronwall sequence, power check
simulate          raw trajectories

Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import plotting
from .errors import AssumptionViolated, ConfigError, SolverDivergence
from .grid_spaces import build_grid
from .ito_verify import (
    energy_identity_ledger,
    general_ito_ledger,
    ledger_refinement,
    lifting_convergence,
    max_principle_experiment,
    positive_square,
    power_check,
    refinement_passes,
    square,
)
from .resolvent import verify_resolvent_properties
from .spde import SPDECoefficients, SPDEProblem, simulate
from .stochastic import RNG_ID, NoiseDriver

SUBCOMMANDS = ("resolvent-verify", "ito-verify", "maxprin", "simulate")
REFINEMENT_HEADER = ["ledger", "dt", "h", "n_paths", "mean_abs_residual", "stderr", "max_u_plus", "pass"]


def _unit(x, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return (x - lo) / (hi - lo)


# Named spatial fields usable for coefficients and initial data; the
# argument ``s`` is the coordinate rescaled to the unit box.
NAMED_FIELDS = {
    "zero": lambda s: np.zeros(s.shape[:-1]),
    "one": lambda s: np.ones(s.shape[:-1]),
    "sin_pi": lambda s: np.prod(np.sin(np.pi * s), axis=-1),
    "neg_parabola": lambda s: -np.prod(s * (1 - s), axis=-1),
    "x0": lambda s: s[..., 0],
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration.  ``sections`` holds the normalized key/value text."""

    subcommand: str
    sections: dict
    seed: int
    out: Path
    paths: int
    workers: int
    override_assumptions: bool

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def normalized_text(self) -> str:
        lines = []
        for sec in sorted(self.sections):
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in sorted(self.sections[sec].items()))
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return config_hash(self.normalized_text())

    def header(self, scheme: str) -> list[str]:
        return [f"# config_hash={self.config_hash}", f"# seed={self.seed}",
                f"# rng={RNG_ID}", f"# scheme={scheme}", f"# subcommand={self.subcommand}"]


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _float(cfg, sec, key, default=None):
    raw = cfg.get(sec, key, default)
    if raw is None:
        raise ConfigError(f"missing [{sec}] {key}")
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key} is not a number: {raw!r}") from exc


def _int(cfg, sec, key, default=None):
    v = _float(cfg, sec, key, default)
    if v != int(v):
        raise ConfigError(f"[{sec}] {key} must be an integer")
    return int(v)


def _floats(cfg, sec, key, default=None):
    raw = cfg.get(sec, key, default)
    if raw is None:
        raise ConfigError(f"missing [{sec}] {key}")
    try:
        return [float(x) for x in str(raw).replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"[{sec}] {key} must be a list of numbers: {raw!r}") from exc


def _bounds(raw: str):
    """``"0 1; 0 1"`` -> ((0, 1), (0, 1))."""
    try:
        out = []
        for part in raw.split(";"):
            lo, hi = (float(x) for x in part.replace(",", " ").split())
            out.append((lo, hi))
        return tuple(out)
    except ValueError as exc:
        raise ConfigError(f"bad bounds {raw!r}; expected 'lo hi; lo hi'") from exc


def load_config(argv_ns) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if argv_ns.config:
        text = Path(argv_ns.config).read_text() if Path(argv_ns.config).exists() else None
        if text is None:
            raise ConfigError(f"config file not found: {argv_ns.config}")
    else:
        name = argv_ns.subcommand.replace("-", "_") + ".ini"
        text = resources.files("itospde.configs").joinpath(name).read_text()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {s: {k: " ".join(v.split()) for k, v in parser[s].items()} for s in parser.sections()}
    run = sections.setdefault("run", {})
    if argv_ns.seed is not None:
        run["seed"] = str(argv_ns.seed)
    if argv_ns.paths is not None:
        run["paths"] = str(argv_ns.paths)
    if "seed" not in run:
        raise ConfigError("a seed is required ([run] seed or --seed); wall-clock seeding is not used")
    try:
        seed = int(run["seed"])
    except ValueError as exc:
        raise ConfigError(f"seed must be an integer, got {run['seed']!r}") from exc
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg = RunConfig(argv_ns.subcommand, sections, seed, Path(argv_ns.out), 0, argv_ns.workers,
                    argv_ns.override_assumptions)
    paths = _int(cfg, "run", "paths", "1")
    if paths < 1:
        raise ConfigError("paths must be >= 1")
    object.__setattr__(cfg, "paths", paths)
    for sec in ("ito", "maxprin"):
        if sec in sections and "dts" in sections[sec]:
            dts = _floats(cfg, sec, "dts")
            if any(b >= a for a, b in zip(dts, dts[1:])) or any(d <= 0 for d in dts):
                raise ConfigError(f"[{sec}] dts must be positive and strictly decreasing")
            ratios = {round(a / b, 12) for a, b in zip(dts, dts[1:])}
            if ratios and ratios != {2.0}:
                raise ConfigError(f"[{sec}] dts must halve at each level (common random numbers)")
    return cfg


def _field(spec: str, bounds):
    spec = spec.strip()
    try:
        return float(spec)
    except ValueError:
        pass
    sign = -1.0 if spec.startswith("-") else 1.0
    name = spec.lstrip("-")
    if name not in NAMED_FIELDS:
        raise ConfigError(f"unknown field {spec!r}; known: {sorted(NAMED_FIELDS)}")
    fn = NAMED_FIELDS[name]
    return lambda x: sign * fn(_unit(x, bounds))


def build_problem(cfg: RunConfig, section: str = "problem", f_override: float | None = None) -> SPDEProblem:
    bounds = _bounds(cfg.get(section, "bounds", "0 1"))
    grid = build_grid(bounds, _float(cfg, section, "h"))
    K = _int(cfg, section, "K", "1")
    kw = {}
    for key in ("a", "b", "c", "sigma", "nu", "a_lower", "f"):
        raw = cfg.get(section, key)
        if raw is not None:
            kw[key] = _field(raw, bounds)
    if f_override is not None:
        kw["f"] = f_override
    if K == 0:
        kw.pop("sigma", None)
        kw.pop("nu", None)
    coeffs = SPDECoefficients.from_functions(grid, K, **kw)
    u0_fn = _field(cfg.get(section, "u0", "zero"), bounds)
    u0 = grid.sample(u0_fn).values if callable(u0_fn) else np.full(grid.N, u0_fn)
    return SPDEProblem(coeffs, u0, K_bound=_float(cfg, section, "K_bound", "0"), name=section)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "pass" if x else "FAIL"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header_lines, columns, rows) -> Path:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv_header(path: Path) -> dict:
    """The ``# key=value`` lines at the top of an output file."""
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        key, _, val = line[1:].strip().partition("=")
        meta[key] = val
    return meta


# -- subcommands ---------------------------------------------------------------------

def cmd_resolvent(cfg: RunConfig) -> bool:
    lams = _floats(cfg, "resolvent", "lams")
    ms = [int(m) for m in _floats(cfg, "resolvent", "m", "1")]
    n_samples = _int(cfg, "resolvent", "samples", "20")
    tol = _float(cfg, "tolerances", "identity_tol", "1e-8")
    grids = [s for s in cfg.sections if s.startswith("grid")]
    if not grids:
        raise ConfigError("resolvent-verify needs at least one [grid...] section")
    rng = np.random.default_rng(cfg.seed)
    rows_by_case, table = {}, []
    for sec in sorted(grids):
        grid = build_grid(_bounds(cfg.get(sec, "bounds", "0 1")), _float(cfg, sec, "h"))
        F = rng.standard_normal((n_samples, grid.N))
        for m in ms:
            case = f"{sec} d={grid.dim} N={grid.N} m={m}"
            rows = verify_resolvent_properties(grid, m, lams, F, identity_tol=tol, seed=cfg.seed)
            rows_by_case[case] = rows
            table += [[sec, grid.dim, grid.N, m] + r.as_csv_row() for r in rows]
    write_csv(cfg.out / "resolvent.csv", cfg.header("cg-jacobi"),
              ["grid", "dim", "N", "m", "check", "lambda", "measured", "bound", "pass"], table)
    plotting.plot_resolvent_checks(rows_by_case, cfg.out / "resolvent.png")
    ok = all(r.passed for rows in rows_by_case.values() for r in rows)
    print(f"resolvent-verify: {sum(len(r) for r in rows_by_case.values())} rows, "
          f"{'all pass' if ok else 'FAILURES'}")
    return ok


def _assumption_gate(cfg, problem):
    rep = problem.assumptions()
    if not rep.passed and not cfg.override_assumptions:
        raise AssumptionViolated(f"{problem.name}: {rep}")
    return rep


def cmd_ito(cfg: RunConfig) -> bool:
    problem = build_problem(cfg)
    scheme = cfg.get("run", "scheme", "semi-implicit")
    dts = _floats(cfg, "ito", "dts")
    T = _float(cfg, "ito", "T")
    frac = _float(cfg, "tolerances", "final_fraction", "0.1")
    _assumption_gate(cfg, problem)
    driver = NoiseDriver(problem.coeffs.K, cfg.seed, dts[0])
    paths = range(cfg.paths)
    series, table, ok = {}, [], True
    for label, r in (("energy", None), ("positive_square", positive_square())):
        rows = ledger_refinement(problem, T, driver, len(dts), paths, r, workers=cfg.workers, scheme=scheme)
        passed = refinement_passes(rows, frac)
        ok &= passed
        series[label] = rows
        table += [[label, x.dt, x.h, x.n_paths, x.mean_abs_residual, x.stderr, x.max_u_plus, passed]
                  for x in rows]
    write_csv(cfg.out / "ito_refinement.csv", cfg.header(scheme), REFINEMENT_HEADER, table)
    plotting.plot_refinement(series, cfg.out / "ito_refinement.png")

    # deterministic identities on the finest trajectory
    traj = simulate(problem, T, driver.refined(len(dts) - 1), paths, scheme=scheme, workers=cfg.workers)
    e = energy_identity_ledger(traj, problem.coeffs)
    s = general_ito_ledger(traj, problem.coeffs, square())
    p = general_ito_ledger(traj, problem.coeffs, positive_square())
    spec_err = max(
        float(np.max(np.abs(getattr(e, t) - getattr(s, t)) / np.maximum(np.abs(getattr(e, t)), 1e-300)))
        for t in ("lhs", "drift", "correction", "stochastic")
    )
    checks = [
        ["square_equals_energy_rel", spec_err, 1e-12, spec_err <= 1e-12],
        ["residual_t0_energy", float(np.max(np.abs(e.residual[0]))), 0.0, bool(np.all(e.residual[0] == 0))],
        ["residual_t0_positive_square", float(np.max(np.abs(p.residual[0]))), 0.0,
         bool(np.all(p.residual[0] == 0))],
        ["qv_bound_square", float(np.max(s.qv_sum)), math.nan, s.qv_bound_ok],
        ["qv_bound_positive_square", float(np.max(p.qv_sum)), math.nan, p.qv_bound_ok],
    ]
    lift_n = _floats(cfg, "ito", "lift_n", "4 16 64 256")
    lift_rows = lifting_convergence(traj.path(0), lift_n, spectral_bound=problem.grid.N <= 4096)
    write_csv(cfg.out / "lifting.csv", cfg.header(scheme), ["n", "sup_error", "bound", "pass"],
              [[r.n, r.sup_error, r.bound, r.passed] for r in lift_rows])
    plotting.plot_lifting(lift_rows, cfg.out / "lifting.png")
    checks.append(["lifting_monotone_and_bounded", float(lift_rows[-1].sup_error), math.nan,
                   all(r.passed for r in lift_rows)])
    write_csv(cfg.out / "ito_checks.csv", cfg.header(scheme), ["check", "measured", "tolerance", "pass"], checks)
    ok &= all(c[-1] for c in checks)
    for c in checks:
        print(f"ito-verify: {c[0]} = {c[1]:.3e} {'pass' if c[-1] else 'FAIL'}")
    for label, rows in series.items():
        print(f"ito-verify: {label} refinement "
              + " ".join(f"{r.mean_abs_residual:.4g}" for r in rows)
              + f" {'pass' if refinement_passes(rows, frac) else 'FAIL'}")
    return bool(ok)


def cmd_maxprin(cfg: RunConfig, power_only: bool = False) -> bool:
    scheme = "semi-implicit"
    T = _float(cfg, "maxprin", "T")
    dts = _floats(cfg, "maxprin", "dts")
    threshold = _float(cfg, "tolerances", "power_threshold", "0.1")
    power_f = _float(cfg, "maxprin", "power_f", "1.0")
    power_problem = build_problem(cfg, f_override=power_f)
    power_driver = NoiseDriver(power_problem.coeffs.K, cfg.seed, dts[-1])
    pw = power_check(power_problem, T, power_driver, min(cfg.paths, 100), threshold, workers=cfg.workers)
    power_row = ["power_check", power_driver.dt, power_problem.grid.h, min(cfg.paths, 100),
                 math.nan, math.nan, pw["max_u"], pw["detected"]]
    print(f"maxprin: power check max u = {pw['max_u']:.4g} (threshold {threshold}) "
          f"{'detected' if pw['detected'] else 'NOT detected'}")
    if power_only:
        write_csv(cfg.out / "maxprin.csv", cfg.header(scheme), REFINEMENT_HEADER, [power_row])
        return pw["detected"]

    problem = build_problem(cfg)
    rep = max_principle_experiment(
        problem, T, NoiseDriver(problem.coeffs.K, cfg.seed, dts[0]), cfg.paths, len(dts),
        rel_threshold=_float(cfg, "tolerances", "rel_threshold", "1e-4"), workers=cfg.workers,
        override=cfg.override_assumptions, gronwall_C=_float(cfg, "tolerances", "gronwall_C", "0"),
    )
    ok = rep.passed and pw["detected"]
    table = [["positive_part", r.dt, r.h, r.n_paths, r.mean_plus2, r.stderr, max(r.max_u, 0.0),
              rep.passed_threshold and rep.passed_monotone] for r in rep.rows]
    table.append(power_row)
    write_csv(cfg.out / "maxprin.csv", cfg.header(scheme), REFINEMENT_HEADER, table)
    g = rep.gronwall
    write_csv(cfg.out / "gronwall.csv", cfg.header(scheme), ["t", "weighted_mean", "stderr"],
              zip(g.times, g.weighted, g.stderr))
    plotting.plot_refinement({"E ||u_T+||^2": rep.rows}, cfg.out / "maxprin.png", ylabel="E ||u_T+||_H^2")
    plotting.plot_gronwall(g, cfg.out / "gronwall.png")
    for r in rep.rows:
        print(f"maxprin: dt={r.dt:g} E||u_T+||^2={r.mean_plus2:.3e} (rel {r.relative:.2e}) max u={r.max_u:.3g}")
    print(f"maxprin: threshold {'pass' if rep.passed_threshold else 'FAIL'}, "
          f"ladder {'pass' if rep.passed_monotone else 'FAIL'}, "
          f"gronwall {'pass' if g.passed else 'FAIL'} (worst excess {g.worst_excess:.3e})")
    return bool(ok)


def cmd_simulate(cfg: RunConfig) -> bool:
    problem = build_problem(cfg)
    scheme = cfg.get("run", "scheme", "semi-implicit")
    T = _float(cfg, "simulate", "T")
    dt = _float(cfg, "simulate", "dt")
    _assumption_gate(cfg, problem)
    traj = simulate(problem, T, NoiseDriver(problem.coeffs.K, cfg.seed, dt), range(cfg.paths),
                    scheme=scheme, workers=cfg.workers)
    N = problem.grid.N
    rows = ([p, n, traj.times[n]] + list(traj.states[n, i])
            for i, p in enumerate(traj.paths) for n in range(len(traj.times)))
    write_csv(cfg.out / "trajectory.csv", cfg.header(scheme),
              ["path", "step", "t"] + [f"u{j}" for j in range(N)], rows)
    plotting.plot_paths(traj.times, traj.norm_H(), cfg.out / "trajectory.png")
    print(f"simulate: {len(traj.paths)} paths, {traj.n_steps} steps, N={N}")
    return True


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itospde", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="INI file; defaults to the packaged config of the subcommand")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    p.add_argument("--workers", type=int, default=1, help="threads for path-level parallelism")
    p.add_argument("--override-assumptions", action="store_true",
                   help="run even when coefficient or data assumptions fail")
    p.add_argument("--power-check", action="store_true",
                   help="maxprin only: run just the positive-source negative control")
    return p


def run(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        cfg = load_config(ns)
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.normalized.ini").write_text(cfg.normalized_text())
        if ns.subcommand == "resolvent-verify":
            ok = cmd_resolvent(cfg)
        elif ns.subcommand == "ito-verify":
            ok = cmd_ito(cfg)
        elif ns.subcommand == "maxprin":
            ok = cmd_maxprin(cfg, power_only=ns.power_check)
        else:
            ok = cmd_simulate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverDivergence as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except AssumptionViolated as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return 1
    return 0 if ok else 1


def main() -> None:
    sys.exit(run())
