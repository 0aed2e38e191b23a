"""Run configuration: a JSON document with fixed blocks and no unknown keys.

Keys and units
--------------
grid.R             half width of the velocity box (thermal-speed units)
grid.N             lattice points per axis
grid.n_cos         Gauss-Legendre nodes in cos(theta) over [-1, 1] (even)
grid.n_phi         azimuthal nodes
shear.A            3x3 deformation matrix, trace free
shear.alpha        shear strength
shear.gamma        kernel exponent, 0 < gamma <= 1
shear.b0           angular kernel amplitude
shear.m            remainder order, 2 < m < 3
dynamics.c_cfl     step as a fraction of the heating time 1 / (rho0 max(alpha, 0.1)^2)
dynamics.dt        explicit step in scaled time (overrides c_cfl when set)
dynamics.duration  scaled end time; null runs until 1 + gamma rho0 alpha^2 t = dynamics.factor_end
dynamics.factor_end  see above
dynamics.cadence   steps between recorded rows
dynamics.initial   "well-prepared" | "maxwellian" | "perturbed"
dynamics.M0, dynamics.seed   size and seed of the perturbation for "perturbed"
dynamics.refresh, dynamics.correctors   stepper controls
estimates.M        increasing list of cutoff radii
estimates.ell2     weight exponent
output.dir         directory for CSV and snapshot output
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .collision import AngularQuadrature, ConfigError, ShearConfig
from .grid import VelocityGrid, build_grid

logger = logging.getLogger(__name__)

TRACE_RENORM_TOL = 1e-12

PROFILES = {
    "fast": {"R": 4.5, "N": 8, "n_cos": 8, "n_phi": 8},
    "standard": {"R": 6.0, "N": 16, "n_cos": 8, "n_phi": 8},
}

DEFAULTS = {
    "grid": dict(PROFILES["standard"]),
    "shear": {"A": [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
              "alpha": 0.1, "gamma": 1.0, "b0": 1.0, "m": 2.5},
    "dynamics": {"c_cfl": 0.003, "dt": None, "duration": None, "factor_end": 4.5, "cadence": 10,
                 "initial": "well-prepared", "M0": 0.0, "seed": 0, "refresh": 100, "correctors": 3},
    "estimates": {"M": [1.0, 1.5, 2.0, 3.0, 4.0], "ell2": 0.5},
    "output": {"dir": "usflow-out"},
}

INITIAL_MODES = ("well-prepared", "maxwellian", "perturbed")


@dataclass(frozen=True)
class RunConfig:
    grid: dict
    shear: dict
    dynamics: dict
    estimates: dict
    output: dict

    def velocity_grid(self) -> VelocityGrid:
        return build_grid(self.grid["R"], self.grid["N"])

    def angular(self) -> AngularQuadrature:
        return AngularQuadrature(self.grid["n_cos"], self.grid["n_phi"])

    def shear_config(self) -> ShearConfig:
        s = self.shear
        return ShearConfig(A=np.array(s["A"], float), alpha=s["alpha"], gamma=s["gamma"], b0=s["b0"], m=s["m"])

    def as_dict(self) -> dict:
        return {"grid": self.grid, "shear": self.shear, "dynamics": self.dynamics,
                "estimates": self.estimates, "output": self.output}

    def fingerprint(self) -> str:
        """Short hash of the canonical JSON form; carried by every output row."""
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _normalize_A(A) -> list:
    A = np.array(A, dtype=float)
    if A.shape != (3, 3):
        raise ConfigError(f"shear.A must be 3x3, got shape {A.shape}")
    tr = float(np.trace(A))
    if tr != 0.0:
        if abs(tr) >= TRACE_RENORM_TOL:
            raise ConfigError(f"shear.A must be trace free, trace = {tr:.3e}")
        warnings.warn(f"shear.A trace {tr:.3e} renormalized to 0", stacklevel=3)
        A = A - (tr / 3.0) * np.eye(3)
        # roundoff can leave a residue; park it on the last diagonal entry
        A[2, 2] -= float(np.trace(A))
    return A.tolist()


def validate(doc: dict) -> RunConfig:
    """Merge ``doc`` over the defaults and re-check every module precondition."""
    merged = _merge(DEFAULTS, doc, "")
    g = merged["grid"]
    try:
        g["R"] = float(g["R"])
        g["N"] = int(g["N"])
        g["n_cos"] = int(g["n_cos"])
        g["n_phi"] = int(g["n_phi"])
        build_grid(g["R"], g["N"])
        AngularQuadrature(g["n_cos"], g["n_phi"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from exc
    s = merged["shear"]
    s["A"] = _normalize_A(s["A"])
    for k in ("alpha", "gamma", "b0", "m"):
        s[k] = float(s[k])
    if not s["gamma"] > 0:
        raise ConfigError("shear.gamma must lie in (0, 1]")
    cfg = RunConfig(**merged)
    cfg.shear_config()
    d = merged["dynamics"]
    if d["initial"] not in INITIAL_MODES:
        raise ConfigError(f"dynamics.initial must be one of {INITIAL_MODES}, got {d['initial']!r}")
    if d["dt"] is not None and not float(d["dt"]) > 0:
        raise ConfigError("dynamics.dt must be positive")
    if not float(d["c_cfl"]) > 0:
        raise ConfigError("dynamics.c_cfl must be positive")
    if d["duration"] is not None and not float(d["duration"]) > 0:
        raise ConfigError("dynamics.duration must be positive")
    if not float(d["factor_end"]) > 1:
        raise ConfigError("dynamics.factor_end must exceed 1")
    if int(d["cadence"]) < 1:
        raise ConfigError("dynamics.cadence must be at least 1")
    e = merged["estimates"]
    Ms = np.asarray(e["M"], float)
    if Ms.ndim != 1 or Ms.size == 0 or np.any(Ms <= 0) or np.any(np.diff(Ms) <= 0):
        raise ConfigError("estimates.M must be a strictly increasing list of positive radii")
    if float(e["ell2"]) < 0:
        raise ConfigError("estimates.ell2 must be nonnegative")
    return cfg


def load_config(path=None, profile: str | None = None) -> RunConfig:
    """Read a JSON config (or the defaults); ``profile`` replaces the grid block."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        doc = copy.deepcopy(doc)
        doc["grid"] = {**doc.get("grid", {}), **PROFILES[profile]}
    return validate(doc)
