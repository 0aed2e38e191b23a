"""Smallness of the large-velocity part of the collision kernel.

Sweeps the cutoff radius M for the weighted operator chi_M nu^-1 calK and
reports the L1, L2 and L-inf norms, their power-law slopes in (1 + M), and
the interpolation check n2 <= sqrt(n1 ninf).

Run: python demos/03_cutoff_norms.py [--profile standard]
"""
import numpy as np

from _common import outdir, parse, tag
from usflow import io
from usflow.collision import CollisionOperator, ShearConfig
from usflow.config import PROFILES
from usflow.estimates import riesz_thorin_check, sweep
from usflow.grid import build_grid
from usflow.linearized import assemble_calK

args = parse(__doc__.splitlines()[0])
g = PROFILES[args.profile]
grid = build_grid(g["R"], g["N"])
K = assemble_calK(CollisionOperator(grid, ShearConfig(), interp="linear"))
Ms = [M for M in (1.0, 1.5, 2.0, 3.0, 4.0) if M < grid.R - 1]

for ell2 in (0.5, 2.0):
    sw = sweep(K, Ms, ell2=ell2)
    rt = riesz_thorin_check(sw)
    print(f"l2 = {ell2}")
    for row in zip(sw.M, sw.n1, sw.n2, sw.ninf, rt.ratios):
        print("  M={:4.1f}  n1={:.4e}  n2={:.4e}  ninf={:.4e}  n2/sqrt(n1 ninf)={:.3f}".format(*row))
    print("  slopes " + ", ".join(f"{k} {v:+.3f}" for k, v in sorted(sw.slopes.items())))
    io.write_csv(outdir("cutoff") / f"sweep_l2_{ell2}.csv", ("M", "n1", "n2", "ninf"),
                 np.column_stack([sw.M, sw.n1, sw.n2, sw.ninf]).tolist(), tag(K.fingerprint))
