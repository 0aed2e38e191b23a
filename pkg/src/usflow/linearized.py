"""Linearized collision operator ``L = nu - K``, projections and the inverse on ker(L)^perp.

The assembled operator is stored through its core matrix ``C`` acting on
fields divided by the Maxwellian:

* plain operator  ``calK h = mu * (C @ (h / mu))``  (``Q(h, mu) + Q_gain(mu, h)``)
* conjugated      ``K f = sqrt(mu) * (C @ (f / sqrt(mu)))``

Quadrature breaks exact symmetry and exact annihilation of the collision
invariants.  Both defects are measured at assembly and recorded; the
operator used for inversion and time stepping is the conservative
``L_cons = P1 (L + L^T)/2 P1``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .collision import CollisionOperator, MU_FLOOR, invariant_basis
from .grid import VelocityGrid, field_checksum

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class FingerprintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# collision invariants and projections
# ---------------------------------------------------------------------------

def invariant_fields(grid: VelocityGrid, mu: np.ndarray) -> np.ndarray:
    """Columns ``{1, xi_1, xi_2, xi_3, |xi|^2 - 3} sqrt(mu)``."""
    psi = invariant_basis(grid)
    psi[:, 4] -= 3.0
    return psi * np.sqrt(mu)[:, None]


def orthonormal_invariants(grid: VelocityGrid, mu: np.ndarray) -> np.ndarray:
    """Basis of the discrete kernel, orthonormal in the quadrature inner product."""
    phi = invariant_fields(grid, mu)
    w = np.sqrt(grid.cell_volume)
    q, _ = np.linalg.qr(w * phi)
    return q / w


def project_P0(basis: np.ndarray, f: np.ndarray, h3: float) -> np.ndarray:
    return basis @ (h3 * (basis.T @ f))


def project_P1(basis: np.ndarray, f: np.ndarray, h3: float) -> np.ndarray:
    return f - project_P0(basis, f, h3)


def _project_matrix(basis: np.ndarray, h3: float, M: np.ndarray) -> None:
    """In place ``M <- P1 M P1``."""
    Bt = h3 * basis.T
    # M P1 = M - (M basis) Bt
    M -= (M @ basis) @ Bt
    # P1 M = M - basis (Bt M)
    M -= basis @ (Bt @ M)


# ---------------------------------------------------------------------------
# operator cache
# ---------------------------------------------------------------------------

@dataclass
class OperatorCache:
    """Assembled discrete linearized operator with provenance.

    Attributes
    ----------
    core : ndarray
        Matrix ``C``; see the module docstring.
    L_cons : ndarray
        ``P1 L_sym P1``, exactly symmetric with the five invariants in its kernel.
    eps_sym : float
        ``||L - L^T||_2 / ||L||_2`` of the raw assembled operator.
    eps_ker : float
        ``max_i ||L phi_i|| / (||L||_2 ||phi_i||)`` of the raw operator.
    """

    grid: VelocityGrid
    fingerprint: str
    mu: np.ndarray
    nu: np.ndarray
    core: np.ndarray
    L_cons: np.ndarray
    basis: np.ndarray
    eps_sym: float
    eps_ker: float
    ker_residuals: np.ndarray
    assembly_time: float
    checksum: str
    extras: dict = field(default_factory=dict)

    @property
    def sqrt_mu(self) -> np.ndarray:
        return np.sqrt(self.mu)

    @property
    def h3(self) -> float:
        return self.grid.cell_volume

    def K_matrix(self) -> np.ndarray:
        s = self.sqrt_mu
        return s[:, None] * self.core / s[None, :]

    def L_raw(self) -> np.ndarray:
        L = -self.K_matrix()
        L[np.diag_indices_from(L)] += self.nu
        return L

    def check_field(self, f: np.ndarray) -> None:
        self.grid.check(f)

    def require(self, fingerprint: str) -> None:
        if fingerprint != self.fingerprint:
            raise FingerprintError(f"cache built for {self.fingerprint}, requested {fingerprint}")

    def P0(self, f):
        return project_P0(self.basis, f, self.h3)

    def P1(self, f):
        return project_P1(self.basis, f, self.h3)


def assemble_L(op: CollisionOperator) -> OperatorCache:
    """Assemble ``L`` for the lattice, kernel and angular rule of ``op``.

    Each column is the exact image of a lattice hat function under the
    discrete gain/loss quadrature (the Jacobian of the interpolated
    collision sum), so matrix products agree with :func:`apply_Q` to
    roundoff.  Memory use is a few dense ``(N^3)^2`` arrays.
    """
    grid = op.grid
    t0 = time.perf_counter()
    nu = op.frequency()
    core = op.jacobian_core(op.mu)
    core[np.diag_indices_from(core)] += nu
    mu = op.mu
    s = np.sqrt(mu)

    # raw conjugated L, built in a scratch array then symmetrized in place
    L = -(s[:, None] * core / s[None, :])
    L[np.diag_indices_from(L)] += nu
    norm_L = _spectral_norm_estimate(L)
    phi = invariant_fields(grid, mu)
    Lphi = L @ phi
    ker_res = np.linalg.norm(Lphi, axis=0) / np.linalg.norm(phi, axis=0)
    eps_ker = float(ker_res.max() / norm_L)
    skew = L - L.T
    eps_sym = float(_spectral_norm_estimate(skew) / norm_L)
    del skew
    L += L.T
    L *= 0.5
    basis = orthonormal_invariants(grid, mu)
    _project_matrix(basis, grid.cell_volume, L)
    L += L.T
    L *= 0.5
    elapsed = time.perf_counter() - t0
    cache = OperatorCache(
        grid=grid, fingerprint=op.fingerprint(), mu=mu, nu=nu, core=core, L_cons=L,
        basis=basis, eps_sym=eps_sym, eps_ker=eps_ker, ker_residuals=ker_res,
        assembly_time=elapsed, checksum=field_checksum(core),
        extras={"norm_L": norm_L},
    )
    logger.info("assembled L on %s in %.1fs: eps_sym=%.2e eps_ker=%.2e",
                grid.fingerprint(), elapsed, eps_sym, eps_ker)
    return cache


@dataclass
class CalKMatrix:
    """Dense matrix of the polynomial-tail operator ``calK`` on one lattice."""

    grid: VelocityGrid
    fingerprint: str
    nu: np.ndarray
    matrix: np.ndarray


def assemble_calK(op: CollisionOperator) -> CalKMatrix:
    """``calK h = Q(h, mu) + Q_gain(mu, h)`` as a matrix, using the interpolation of ``op``.

    With ``interp="linear"`` the off-lattice values of ``h`` are plain
    trilinear interpolants, which keeps polynomially decaying columns free of
    the ``mu(xi) / mu(xi')`` amplification of the ratio scheme.
    """
    nu = op.frequency()
    M = op.jacobian_core(op.mu)
    M[np.diag_indices_from(M)] += nu
    sc = op.scale
    if op.interp == "ratio":
        M *= sc[:, None]
        M /= sc[None, :]
    return CalKMatrix(op.grid, op.fingerprint(), nu, M)


def calK_of_cache(cache: OperatorCache) -> CalKMatrix:
    mu = cache.mu
    return CalKMatrix(cache.grid, cache.fingerprint, cache.nu, mu[:, None] * cache.core / mu[None, :])


def _spectral_norm_estimate(M: np.ndarray, iters: int = 60, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = M.T @ (M @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        new = np.sqrt(ny)
        x = y / ny
        if abs(new - sigma) <= 1e-10 * new:
            sigma = new
            break
        sigma = new
    return float(sigma)


# ---------------------------------------------------------------------------
# operator application
# ---------------------------------------------------------------------------

def apply_K(cache: OperatorCache, f: np.ndarray) -> np.ndarray:
    cache.check_field(f)
    s = cache.sqrt_mu
    return s * (cache.core @ (f / s))


def apply_L(cache: OperatorCache, f: np.ndarray) -> np.ndarray:
    """Raw assembled ``nu f - K f`` (no symmetrization or projection)."""
    return cache.nu * f - apply_K(cache, f)


def apply_L_cons(cache: OperatorCache, f: np.ndarray) -> np.ndarray:
    cache.check_field(f)
    return cache.L_cons @ f


def apply_calK(cache: OperatorCache, f: np.ndarray, op: CollisionOperator | None = None) -> np.ndarray:
    """``Q(f, mu) + Q_gain(mu, f)``.

    Nodes where the Maxwellian drops below the floor cannot be divided out;
    if ``f`` carries mass there the direct quadrature path through ``op`` is used.
    """
    cache.check_field(f)
    mu = cache.mu
    low = mu <= MU_FLOOR
    if np.any(low & (f != 0)):
        if op is None:
            raise ValueError("field has support where mu underflows; pass the collision operator")
        return op.gain(f, mu) - op.loss(f, mu) + op.gain(mu, f)
    return mu * (cache.core @ (f / mu))


def gamma_bilinear(op: CollisionOperator, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``Gamma(f, g) = mu^{-1/2} Q(sqrt(mu) f, sqrt(mu) g)``.

    With the Maxwellian-ratio interpolation the division by ``sqrt(mu)`` is
    analytic: ``Q = mu * q`` so ``Gamma = sqrt(mu) * q``.
    """
    op.grid.check(f, g)
    from . import _kernels

    mu = op.mu
    s = np.sqrt(mu)
    r1 = np.where(mu > MU_FLOOR, f / np.where(mu > MU_FLOOR, s, 1.0), 0.0)
    r2 = np.where(mu > MU_FLOOR, g / np.where(mu > MU_FLOOR, s, 1.0), 0.0)
    gain = _kernels.gain_kernel(op.grid.N, op.pad, op.padded(r1), op.padded(r2), mu, op.disp, op.wts)
    conv = _kernels.loss_kernel(op.grid.N, s * f, op.wsum)
    out = s * gain - g * conv
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value in Gamma")
    return out


def gamma_corrected(op: CollisionOperator, basis: np.ndarray, f, g) -> np.ndarray:
    """``P1 Gamma(f, g)``: conservative nonlinear term used in time stepping."""
    return project_P1(basis, gamma_bilinear(op, f, g), op.grid.cell_volume)


def linearization_matrix(op: CollisionOperator, base: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Matrix of ``f -> P1 [Gamma(base, f) + Gamma(f, base)]`` in the conjugated variable."""
    mu = op.mu
    s = np.sqrt(mu)
    core = op.jacobian_core(s * base)
    M = s[:, None] * core
    M /= s[None, :]
    M -= basis @ (op.grid.cell_volume * (basis.T @ M))
    return M


# ---------------------------------------------------------------------------
# inverse on the microscopic subspace
# ---------------------------------------------------------------------------

@dataclass
class SolveInfo:
    iterations: int
    residual: float


def solve_Linv(cache: OperatorCache, rhs: np.ndarray, tol: float = 1e-10, max_iter: int = 2000,
               info: list | None = None) -> np.ndarray:
    """Solve ``L_sym x = rhs`` on range(P1) by projected conjugate gradients.

    Every iterate and search direction is re-projected by ``P1`` so the
    null space never enters.  ``rhs`` must be microscopic.
    """
    cache.check_field(rhs)
    nrm = np.linalg.norm(rhs)
    if nrm == 0:
        if info is not None:
            info.append(SolveInfo(0, 0.0))
        return np.zeros_like(rhs)
    macro = np.linalg.norm(cache.P0(rhs))
    if macro > max(tol, 1e-9) * nrm:
        raise SolverError(f"right-hand side is not microscopic: |P0 rhs|/|rhs| = {macro / nrm:.3e}")
    A = cache.L_cons
    b = cache.P1(rhs)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    target = tol * nrm
    for it in range(1, max_iter + 1):
        Ap = A @ p
        a = rr / (p @ Ap)
        x += a * p
        r -= a * Ap
        if it % 50 == 0:
            # replace the recursive residual to limit drift
            x = cache.P1(x)
            r = b - A @ x
        rr_new = r @ r
        if np.sqrt(rr_new) <= target:
            x = cache.P1(x)
            res = float(np.linalg.norm(A @ x - b))
            if res <= target:
                if info is not None:
                    info.append(SolveInfo(it, res / nrm))
                return x
        p = cache.P1(r + (rr_new / rr) * p)
        rr = rr_new
    res = float(np.linalg.norm(A @ x - b) / nrm)
    raise SolverError(f"projected CG did not converge in {max_iter} iterations (residual {res:.3e})")


# ---------------------------------------------------------------------------
# spectrum, coercivity
# ---------------------------------------------------------------------------

def rayleigh_spectrum(cache: OperatorCache, k: int = 6) -> np.ndarray:
    """The ``k`` smallest eigenvalues of ``L_cons`` (Rayleigh quotients)."""
    return scipy.linalg.eigh(cache.L_cons, eigvals_only=True, subset_by_index=[0, k - 1])


def raw_rayleigh_spectrum(cache: OperatorCache, k: int = 6) -> np.ndarray:
    """The ``k`` smallest eigenvalues of the symmetrized raw operator."""
    L = cache.L_raw()
    L += L.T
    L *= 0.5
    return scipy.linalg.eigh(L, eigvals_only=True, subset_by_index=[0, k - 1], overwrite_a=True)


def coercivity_constant(cache: OperatorCache) -> float:
    """``min <L f, f> / ||f||_nu^2`` over microscopic ``f``.

    Solves the generalized problem ``L_cons x = lam B x`` with
    ``B = P1 diag(nu) P1 + P0``; the five invariants are eigenvectors of
    eigenvalue zero and the sixth eigenvalue is the constant.
    """
    n = cache.grid.size
    h3 = cache.h3
    E = cache.basis
    B = np.diag(cache.nu)
    _project_matrix(E, h3, B)
    B += h3 * (E @ E.T)
    B += B.T
    B *= 0.5
    vals = scipy.linalg.eigh(cache.L_cons, B, eigvals_only=True, subset_by_index=[0, 5])
    del B
    return float(vals[5])


# ---------------------------------------------------------------------------
# kernel bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelBoundParams:
    c1_tilde: float = 1.0
    c2_tilde: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if not (self.c1_tilde > 0 and self.c2_tilde > 0):
            raise ValueError("bound constants must be positive")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")


def kernel_bound_k1(xi, xi_star, params: KernelBoundParams, gamma: float):
    """``C1 |xi - xi*|^gamma exp(-(|xi|^2 + |xi*|^2) / 4)``; broadcasts over leading axes."""
    xi = np.asarray(xi, float)
    xs = np.asarray(xi_star, float)
    d = np.linalg.norm(xi - xs, axis=-1)
    a = np.sum(xi * xi, axis=-1)
    b = np.sum(xs * xs, axis=-1)
    return params.c1_tilde * d ** gamma * np.exp(-(a + b) / 4.0)


def kernel_bound_k2(xi, xi_star, params: KernelBoundParams, gamma: float):
    """``C2 |u|^{gamma-2} exp(-|u|^2/8 - (|xi|^2 - |xi*|^2)^2 / (8 |u|^2))`` with ``u = xi - xi*``."""
    xi = np.asarray(xi, float)
    xs = np.asarray(xi_star, float)
    d2 = np.sum((xi - xs) ** 2, axis=-1)
    if np.any(d2 == 0):
        raise ValueError("k2 bound is singular at coincident points")
    a = np.sum(xi * xi, axis=-1)
    b = np.sum(xs * xs, axis=-1)
    return params.c2_tilde * d2 ** ((gamma - 2.0) / 2.0) * np.exp(-d2 / 8.0 - (a - b) ** 2 / (8.0 * d2))


def kernel_bound_kw(xi, xi_star, ell: float, params: KernelBoundParams, gamma: float):
    """Weighted bound ``w^ell(xi) (k1 + k2)(xi, xi*) w^{-ell}(xi*)``."""
    xi = np.asarray(xi, float)
    xs = np.asarray(xi_star, float)
    w = (1.0 + np.sum(xi * xi, axis=-1)) ** ell
    ws = (1.0 + np.sum(xs * xs, axis=-1)) ** ell
    k = kernel_bound_k1(xi, xs, params, gamma) + kernel_bound_k2(xi, xs, params, gamma)
    return w * k / ws


def kernel_entries(cache: OperatorCache, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Pointwise kernel values ``K_ij / h^3`` (the matrix is a quadrature of the kernel)."""
    s = cache.sqrt_mu
    return s[i] * cache.core[i, j] / s[j] / cache.h3


def loss_kernel_constant(b0: float) -> float:
    """``C1`` for which the loss part of ``K`` equals ``k1`` exactly."""
    return float(b0 / np.sqrt(2.0 * np.pi))


def split_kernel(cache: OperatorCache, i: np.ndarray, j: np.ndarray, gamma: float, b0: float):
    """Pointwise ``(K1, K2)`` with ``K = K2 - K1``; ``K1`` is the loss part, known in closed form."""
    nodes = cache.grid.nodes
    k1 = kernel_bound_k1(nodes[i], nodes[j], KernelBoundParams(c1_tilde=loss_kernel_constant(b0)), gamma)
    return k1, kernel_entries(cache, i, j) + k1


def calibrate_kernel_bounds(cache: OperatorCache, gamma: float, b0: float = 1.0, n_pairs: int = 20000,
                            n_check: int = 1000, seed: int = 0, radius: float | None = None,
                            min_sep: float | None = None) -> tuple[KernelBoundParams, np.ndarray, np.ndarray]:
    """Fit the bound constants and return held-out pairs for verification.

    ``C1`` is exact: the loss part of ``K`` is ``k1`` with ``C1 = b0 / sqrt(2 pi)``.
    ``C2`` is the largest observed ratio ``|K2| / k2`` over random pairs with
    both velocities inside ``radius`` (default ``R / 2``) and separation at
    least ``min_sep`` (default two cells).  Outside that region the lattice
    kernel is dominated by interpolation spreading, not by the continuum
    kernel, and ratios there measure the discretization.
    """
    grid = cache.grid
    radius = grid.R / 2.0 if radius is None else radius
    min_sep = 2.0 * grid.spacing if min_sep is None else min_sep
    nodes = grid.nodes
    core = np.flatnonzero(np.sqrt(grid.speed2) <= radius)
    if core.size < 2:
        raise ValueError(f"no lattice pairs inside radius {radius}")
    rng = np.random.default_rng(seed)

    def draw(m):
        out_i, out_j, have = [], [], 0
        while have < m:
            i = core[rng.integers(0, core.size, 2 * m)]
            j = core[rng.integers(0, core.size, 2 * m)]
            keep = np.linalg.norm(nodes[i] - nodes[j], axis=1) >= min_sep
            out_i.append(i[keep])
            out_j.append(j[keep])
            have += int(keep.sum())
        return np.concatenate(out_i)[:m], np.concatenate(out_j)[:m]

    i, j = draw(n_pairs)
    _, K2 = split_kernel(cache, i, j, gamma, b0)
    r2 = np.abs(K2) / kernel_bound_k2(nodes[i], nodes[j], KernelBoundParams(), gamma)
    params = KernelBoundParams(c1_tilde=loss_kernel_constant(b0), c2_tilde=float(r2.max()))
    hi, hj = draw(n_check)
    return params, hi, hj


def kernel_bound_violations(cache: OperatorCache, i, j, params: KernelBoundParams, gamma: float) -> np.ndarray:
    """Ratios ``|K_ij| / (k1 + k2)`` at the given pairs; dominance means all are <= 1."""
    nodes = cache.grid.nodes
    k = kernel_bound_k1(nodes[i], nodes[j], params, gamma) + kernel_bound_k2(nodes[i], nodes[j], params, gamma)
    return np.abs(kernel_entries(cache, i, j)) / k
