"""Shared setup for the demo scripts: profile selection and output directory."""
import argparse
import hashlib
import warnings
from pathlib import Path

warnings.filterwarnings("ignore", message=".*TBB.*")

from usflow.collision import CollisionOperator, ShearConfig  # noqa: E402
from usflow.config import PROFILES  # noqa: E402
from usflow.expansion import compute_coefficients  # noqa: E402
from usflow.grid import build_grid  # noqa: E402
from usflow.linearized import assemble_L  # noqa: E402

OUT = Path(__file__).resolve().parent / "out"


def parse(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--profile", choices=sorted(PROFILES), default="fast")
    p.add_argument("--alpha", type=float, default=0.1)
    return p.parse_args()


def setup(profile, alpha):
    g = PROFILES[profile]
    grid = build_grid(g["R"], g["N"])
    cfg = ShearConfig(alpha=alpha)
    op = CollisionOperator(grid, cfg)
    cache = assemble_L(op)
    return grid, cfg, op, cache, compute_coefficients(cache, op, cfg.A)


def outdir(name):
    d = OUT / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def tag(text):
    """Short hash used as the fingerprint column of demo CSVs."""
    return hashlib.sha256(text.encode()).hexdigest()[:16]
