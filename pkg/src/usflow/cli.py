"""Command line entry point: ``python -m usflow {assemble,coeffs,evolve,estimates,fit}``.

Exit codes: 0 success, 2 configuration error, 3 numerical invariant
violated, 4 input/output error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .collision import CollisionOperator, ConfigError
from .config import RunConfig, load_config, validate
from .dynamics import TRAJECTORY_COLUMNS, ShearSystem, StabilityError, TailEscapeError, run_scaled
from .estimates import ConvergenceError, fit_power_law, riesz_thorin_check, sweep
from .expansion import MicroscopyError, compute_coefficients
from .grid import GridError
from .linearized import FingerprintError, SolverError, assemble_calK, assemble_L

logger = logging.getLogger("usflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

NUMERIC_ERRORS = (ArithmeticError, StabilityError, TailEscapeError, MicroscopyError, SolverError,
                  ConvergenceError)

COEFF_COLUMNS = ("gamma", "b0", "A_hash", "N", "R", "rho0", "rho1", "micro_G1", "micro_G2",
                 "micro_source", "iter_G1", "iter_G2")
SWEEP_COLUMNS = ("M", "n1", "n2", "ninf")


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def a_hash(A) -> str:
    return _hash(",".join(repr(float(x)) for x in np.asarray(A, float).ravel()))


# ---------------------------------------------------------------------------
# cached operators
# ---------------------------------------------------------------------------

def _cached(path: Path, fingerprint: str, force: bool, build, write, read):
    """Load ``path`` if it holds ``fingerprint``; otherwise build and write it."""
    if path.exists() and not force:
        _, meta = io.read_cache_meta(path)
        if meta.get("fingerprint") != fingerprint:
            raise FileExistsError(
                f"{path} holds {meta.get('fingerprint')!r}, not {fingerprint!r}; use --force to overwrite")
        return read(path), "cache hit"
    obj = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    write(path, obj)
    return obj, "assembled"


def operator_for(cfg: RunConfig, interp: str = "ratio") -> CollisionOperator:
    return CollisionOperator(cfg.velocity_grid(), cfg.shear_config(), cfg.angular(), interp=interp)


def ensure_L(cfg: RunConfig, cache_dir, force: bool = False):
    """Operator cache for ``cfg`` from ``cache_dir``, assembling on a miss."""
    op = operator_for(cfg)
    fp = op.fingerprint()
    sc = cfg.shear_config()
    path = Path(cache_dir) / f"L-{_hash(fp)}.usfk"
    cache, status = _cached(path, fp, force, lambda: assemble_L(op),
                            lambda p, c: io.write_operator_cache(p, c, sc.gamma, sc.b0),
                            io.read_operator_cache)
    return cache, op, status, path


def ensure_calK(cfg: RunConfig, cache_dir, force: bool = False):
    op = operator_for(cfg, interp="linear")
    fp = op.fingerprint()
    sc = cfg.shear_config()
    path = Path(cache_dir) / f"calK-{_hash(fp)}.usfk"
    K, status = _cached(path, fp, force, lambda: assemble_calK(op),
                        lambda p, k: io.write_calK(p, k, sc.gamma, sc.b0), io.read_calK)
    return K, status, path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_assemble(cfg: RunConfig, args) -> int:
    cache, _, status, path = ensure_L(cfg, args.cache_dir, args.force)
    print(f"{status}: {path}")
    print(f"fingerprint  {cache.fingerprint}")
    print(f"eps_sym      {io.fmt(cache.eps_sym)}")
    print(f"eps_ker      {io.fmt(cache.eps_ker)}")
    print(f"checksum     {cache.checksum}")
    return EXIT_OK


def cmd_coeffs(cfg: RunConfig, args) -> int:
    out = Path(cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.shear_config()
    resolutions = args.resolutions or [cfg.grid["N"]]
    rows = []
    for N in resolutions:
        c = load_config_with_N(cfg, N)
        cache, op, status, _ = ensure_L(c, args.cache_dir, args.force)
        logger.info("%s for N=%d", status, N)
        co = compute_coefficients(cache, op, sc.A)
        it = tuple(co.iterations) + (0, 0)
        rows.append((sc.gamma, sc.b0, a_hash(sc.A), N, c.grid["R"], co.rho0, co.rho1, co.microscopy["G1"],
                     co.microscopy["G2"], co.microscopy["source"], it[0], it[1]))
        tag = f"N{N}"
        io.write_snapshot(out / f"G1_unit_{tag}.usfb", cache.grid, co.G1_unit, sc.gamma, sc.b0)
        io.write_snapshot(out / f"G2_unit_{tag}.usfb", cache.grid, co.G2_unit, sc.gamma, sc.b0)
        print(f"N={N} rho0={io.fmt(co.rho0)} rho1={io.fmt(co.rho1)}")
    path = out / "coeffs.csv"
    io.write_csv(path, COEFF_COLUMNS, rows, cfg.fingerprint())
    print(f"wrote {path}")
    return EXIT_OK


def load_config_with_N(cfg: RunConfig, N: int) -> RunConfig:
    doc = cfg.as_dict()
    doc = {**doc, "grid": {**doc["grid"], "N": int(N)}}
    return validate(doc)


def step_and_duration(cfg: RunConfig, rho0: float) -> tuple[float, float]:
    d = cfg.dynamics
    sc = cfg.shear_config()
    dt = d["dt"]
    if dt is None:
        dt = d["c_cfl"] / (rho0 * max(sc.alpha, 0.1) ** 2)
    duration = d["duration"]
    if duration is None:
        if not sc.alpha > 0 or not rho0 > 0:
            raise ConfigError("dynamics.duration is required when alpha = 0 or A = 0")
        duration = (d["factor_end"] - 1.0) / (sc.gamma * rho0 * sc.alpha ** 2)
    return float(dt), float(duration)


def cmd_evolve(cfg: RunConfig, args) -> int:
    out = Path(cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.shear_config()
    cache, op, status, _ = ensure_L(cfg, args.cache_dir, args.force)
    co = compute_coefficients(cache, op, sc.A)
    system = ShearSystem(cache, op, sc, co)
    d = cfg.dynamics
    if d["initial"] == "maxwellian":
        g0 = np.zeros(cache.grid.size)
    elif d["initial"] == "perturbed":
        g0 = system.well_prepared(M0=float(d["M0"]), seed=int(d["seed"]))
    else:
        g0 = system.well_prepared()
    dt, duration = step_and_duration(cfg, co.rho0)
    print(f"{status}; dt={io.fmt(dt)} duration={io.fmt(duration)}")
    traj = run_scaled(system, duration, dt, cadence=int(d["cadence"]), g0=g0, refresh=int(d["refresh"]),
                      correctors=int(d["correctors"]))
    path = out / "trajectory.csv"
    io.write_csv(path, TRAJECTORY_COLUMNS, traj.as_array().tolist(), cfg.fingerprint())
    beta = traj.column("beta")[-1]
    print(f"wrote {path} ({len(traj.rows)} rows); beta(T)={io.fmt(beta)} max defect={io.fmt(max(traj.defects, default=0.0))}")
    return EXIT_OK


def cmd_estimates(cfg: RunConfig, args) -> int:
    out = Path(cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    K, status, _ = ensure_calK(cfg, args.cache_dir, args.force)
    e = cfg.estimates
    sw = sweep(K, e["M"], ell2=float(e["ell2"]))
    path = out / "sweep.csv"
    io.write_csv(path, SWEEP_COLUMNS, np.column_stack([sw.M, sw.n1, sw.n2, sw.ninf]).tolist(), cfg.fingerprint())
    print(f"{status}; wrote {path}")
    for name, s in sorted(sw.slopes.items()):
        print(f"slope {name:5s} {s:+.4f}")
    rt = riesz_thorin_check(sw)
    print(f"riesz-thorin {'pass' if rt.passed else 'FAIL'}; max ratio {float(np.max(rt.ratios)):.4f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cols = io.read_csv_columns(args.csv, [args.x, args.y])
    x = args.x_affine[0] + args.x_affine[1] * cols[args.x]
    y = cols[args.y]
    keep = np.ones(x.size, bool)
    if args.window:
        keep &= (x >= args.window[0]) & (x <= args.window[1])
    res = fit_power_law(x[keep], y[keep])
    print(f"exponent {res.exponent:.10g} +- {res.stderr:.3g}  intercept {res.intercept:.10g}  "
          f"r2 {res.r2:.10f}  points {int(keep.sum())}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--cache-dir", type=Path, default=Path(".usflow-cache"))
    common.add_argument("--force", action="store_true", help="rebuild and overwrite cached operators")
    common.add_argument("--profile", choices=("fast", "standard"), help="grid preset overriding the config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="usflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("assemble", parents=[common], help="assemble and cache the linearized operator")
    c = sub.add_parser("coeffs", parents=[common], help="expansion coefficients rho0, rho1, G1, G2")
    c.add_argument("--resolutions", type=int, nargs="+", metavar="N", help="lattice sizes, one row each")
    sub.add_parser("evolve", parents=[common], help="scaled shear run, trajectory CSV")
    sub.add_parser("estimates", parents=[common], help="cutoff-operator norm sweep CSV")
    f = sub.add_parser("fit", help="power-law fit of two CSV columns")
    f.add_argument("csv", type=Path)
    f.add_argument("--x", required=True)
    f.add_argument("--y", required=True)
    f.add_argument("--x-affine", type=float, nargs=2, default=(0.0, 1.0), metavar=("A", "B"),
                   help="fit against A + B * x")
    f.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), help="keep transformed x in [LO, HI]")
    f.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            return cmd_fit(args)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            cfg = load_config(args.config, args.profile)
        handler = {"assemble": cmd_assemble, "coeffs": cmd_coeffs, "evolve": cmd_evolve,
                   "estimates": cmd_estimates}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical invariant violated: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.CSVSchemaError, FingerprintError, GridError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
