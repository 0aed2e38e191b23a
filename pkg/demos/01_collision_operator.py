"""Collision operator on the lattice: equilibrium, frequency, spectral gap.

Builds the discrete collision operator, checks that the Maxwellian is an
equilibrium up to box truncation, compares the lattice collision frequency
with the closed form for hard spheres with B0 = b0 |cos|, and prints the
bottom of the spectrum of the conservative linearized operator.

Run: python demos/01_collision_operator.py [--profile standard]
"""
import numpy as np
from scipy.special import erf

from _common import outdir, parse, setup
from usflow.collision import apply_Q
from usflow.grid import maxwellian
from usflow.linearized import coercivity_constant, rayleigh_spectrum

args = parse(__doc__.splitlines()[0])
grid, cfg, op, cache, coeffs = setup(args.profile, args.alpha)
mu = maxwellian(grid)

# equilibrium
q = apply_Q(mu, mu, op)
nu = op.frequency()
print(f"lattice R={grid.R} N={grid.N}: sup|Q(mu,mu)| / sup(nu mu) = {np.abs(q).max() / (nu * mu).max():.2e}")

# frequency against nu(a) = 2 pi b0 [(a + 1/a) erf(a/sqrt2) + sqrt(2/pi) exp(-a^2/2)]
a = np.maximum(np.sqrt(grid.speed2), 1e-12)
exact = 2 * np.pi * cfg.b0 * ((a + 1 / a) * erf(a / np.sqrt(2)) + np.sqrt(2 / np.pi) * np.exp(-a ** 2 / 2))
inner = a < grid.R / 2
print(f"collision frequency: max rel error {np.max(np.abs(nu[inner] / exact[inner] - 1)):.2e} for |xi| < R/2")

# spectrum
lam = rayleigh_spectrum(cache, k=8)
print("smallest Rayleigh quotients of L:", " ".join(f"{x:.3e}" for x in lam))
print(f"coercivity constant {coercivity_constant(cache):.4f}; raw defects eps_sym {cache.eps_sym:.3f} "
      f"eps_ker {cache.eps_ker:.3f}")
print(f"rho0 = {coeffs.rho0:.10f}, rho1 = {coeffs.rho1:.1e}")

order = np.argsort(a)
np.savetxt(outdir("collision") / "frequency.csv", np.column_stack([a[order], nu[order], exact[order]]),
           delimiter=",", header="speed,nu_lattice,nu_exact", comments="")
