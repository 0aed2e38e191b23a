"""First and second order terms of the shear expansion and the beta equation.

``G = mu + sqrt(mu) (alpha G1 + alpha^2 G2 + ...)`` with
``G1(t) = beta^{-gamma} G1_unit`` and ``G2(t) = beta^{-2 gamma} G2_unit``.
The heating rate is ``beta'/beta = rho0 alpha^2 beta^{-gamma} + rho1 alpha^3 beta^{-2 gamma} + ...``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .collision import CollisionOperator
from .grid import VelocityGrid
from .linearized import OperatorCache, SolveInfo, gamma_bilinear, solve_Linv

logger = logging.getLogger(__name__)


class MicroscopyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# velocity divergences
# ---------------------------------------------------------------------------

def _centered_1d(n: int, h: float) -> sp.csr_matrix:
    """Flux-form centered difference: face fluxes ``(v_i + v_{i+1}) / 2``, zero flux through the box faces.

    Interior rows are the usual ``(v_{i+1} - v_{i-1}) / 2h``; the closure at
    the two ends makes every column sum vanish, so discrete mass is conserved.
    """
    off = np.full(n - 1, 1.0 / (2.0 * h))
    diag = np.zeros(n)
    diag[0] = 1.0 / (2.0 * h)
    diag[-1] = -1.0 / (2.0 * h)
    return sp.diags([-off, diag, off], [-1, 0, 1], format="csr")


def gradient_matrices(grid: VelocityGrid) -> list[sp.csr_matrix]:
    """Conservative centered differences along each axis (see :func:`_centered_1d`)."""
    n = grid.N
    d = _centered_1d(n, grid.spacing)
    eye = sp.identity(n, format="csr")
    return [
        sp.kron(sp.kron(d, eye), eye, format="csr"),
        sp.kron(sp.kron(eye, d), eye, format="csr"),
        sp.kron(sp.kron(eye, eye), d, format="csr"),
    ]


def divergence_matrix(grid: VelocityGrid, A: np.ndarray) -> sp.csr_matrix:
    """Matrix of ``v -> div_xi(A xi v)``."""
    grads = gradient_matrices(grid)
    flux = grid.nodes @ np.asarray(A, float).T
    out = sp.csr_matrix((grid.size, grid.size))
    for k in range(3):
        if np.any(flux[:, k]):
            out = out + grads[k] @ sp.diags(flux[:, k])
    return out.tocsr()


def conjugate(mat: sp.spmatrix, mu: np.ndarray) -> sp.csr_matrix:
    """``mu^{-1/2} mat mu^{1/2}``."""
    s = np.sqrt(mu)
    return (sp.diags(1.0 / s) @ mat @ sp.diags(s)).tocsr()


def shear_source(grid: VelocityGrid, A: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``xi . A xi sqrt(mu)``."""
    return np.einsum("ij,jk,ik->i", grid.nodes, np.asarray(A, float), grid.nodes) * np.sqrt(mu)


def dilation_source(grid: VelocityGrid, mu: np.ndarray) -> np.ndarray:
    """``mu^{-1/2} div(xi mu) = (3 - |xi|^2) sqrt(mu)``."""
    return (3.0 - grid.speed2) * np.sqrt(mu)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

@dataclass
class ExpansionCoefficients:
    rho0: float
    rho1: float
    G1_unit: np.ndarray
    G2_unit: np.ndarray
    fingerprint: str
    microscopy: dict
    iterations: tuple

    def G1(self, beta: float, gamma: float) -> np.ndarray:
        return beta ** (-gamma) * self.G1_unit

    def G2(self, beta: float, gamma: float) -> np.ndarray:
        return beta ** (-2.0 * gamma) * self.G2_unit


def compute_G1_unit(cache: OperatorCache, A, tol: float = 1e-10, info: list | None = None) -> np.ndarray:
    """``-L^{-1}(xi . A xi sqrt(mu))``."""
    src = shear_source(cache.grid, A, cache.mu)
    return -solve_Linv(cache, src, tol=tol, info=info)


def compute_rho0(cache: OperatorCache, A, G1_unit: np.ndarray | None = None) -> float:
    """``(1/3) <s, L^{-1} s>`` with ``s = xi . A xi sqrt(mu)``; must be positive unless ``A = 0``."""
    if not np.any(A):
        return 0.0
    if G1_unit is None:
        G1_unit = compute_G1_unit(cache, A)
    src = shear_source(cache.grid, A, cache.mu)
    rho0 = -cache.h3 * float(src @ G1_unit) / 3.0
    if not rho0 > 0:
        raise ArithmeticError(f"rho0 = {rho0!r} is not positive; the assembled operator is inconsistent")
    return rho0


def g2_source(cache: OperatorCache, op: CollisionOperator, A, G1_unit: np.ndarray, rho0: float,
              T_A: sp.spmatrix | None = None) -> np.ndarray:
    """``Gamma(G1, G1) + rho0 mu^{-1/2} div(xi mu) + mu^{-1/2} div(A xi sqrt(mu) G1)`` (raw, before projection)."""
    grid = cache.grid
    if T_A is None:
        T_A = conjugate(divergence_matrix(grid, A), cache.mu)
    return gamma_bilinear(op, G1_unit, G1_unit) + rho0 * dilation_source(grid, cache.mu) + T_A @ G1_unit


def microscopy_residual(cache: OperatorCache, f: np.ndarray) -> float:
    """``|P0 f| / |f|`` in the quadrature norm."""
    n = np.linalg.norm(f)
    return float(np.linalg.norm(cache.P0(f)) / n) if n > 0 else 0.0


def compute_G2_unit(cache: OperatorCache, op: CollisionOperator, A, G1_unit: np.ndarray, rho0: float,
                    tol: float = 1e-10, micro_tol: float = 1e-2, info: list | None = None,
                    T_A: sp.spmatrix | None = None) -> tuple[np.ndarray, float]:
    """``L^{-1}`` of the second-order source, after checking that source is microscopic.

    Returns the profile and the source microscopy residual.
    """
    if not np.any(A):
        return np.zeros(cache.grid.size), 0.0
    src = g2_source(cache, op, A, G1_unit, rho0, T_A=T_A)
    resid = microscopy_residual(cache, src)
    if resid > micro_tol:
        raise MicroscopyError(f"second-order source has macroscopic part {resid:.3e} > {micro_tol:.1e}")
    return solve_Linv(cache, cache.P1(src), tol=tol, info=info), resid


def compute_rho1(cache: OperatorCache, A, G2_unit: np.ndarray) -> float:
    """``-(1/3) <xi . A xi sqrt(mu), G2_unit>``."""
    src = shear_source(cache.grid, A, cache.mu)
    return -cache.h3 * float(src @ G2_unit) / 3.0


def compute_coefficients(cache: OperatorCache, op: CollisionOperator, A, tol: float = 1e-10,
                         micro_tol: float = 1e-2) -> ExpansionCoefficients:
    """Full pipeline ``G1 -> rho0 -> G2 -> rho1``."""
    A = np.asarray(A, float)
    it: list[SolveInfo] = []
    if not np.any(A):
        z = np.zeros(cache.grid.size)
        return ExpansionCoefficients(0.0, 0.0, z, z.copy(), cache.fingerprint,
                                     {"G1": 0.0, "G2": 0.0, "source": 0.0}, (0, 0))
    G1 = compute_G1_unit(cache, A, tol=tol, info=it)
    rho0 = compute_rho0(cache, A, G1)
    G2, src_res = compute_G2_unit(cache, op, A, G1, rho0, tol=tol, micro_tol=micro_tol, info=it)
    rho1 = compute_rho1(cache, A, G2)
    micro = {
        "G1": float(np.abs(cache.h3 * (cache.basis.T @ G1)).max()),
        "G2": float(np.abs(cache.h3 * (cache.basis.T @ G2)).max()),
        "source": src_res,
    }
    logger.info("rho0=%.10g rho1=%.10g", rho0, rho1)
    return ExpansionCoefficients(rho0, rho1, G1, G2, cache.fingerprint, micro,
                                 tuple(i.iterations for i in it))


# ---------------------------------------------------------------------------
# beta equation
# ---------------------------------------------------------------------------

def beta_rhs(beta: float, alpha: float, gamma: float, rho0: float, rho1: float = 0.0,
             GR_integral: float = 0.0, m: float = 2.5) -> float:
    """``beta'`` from the truncated heating law.

    ``GR_integral`` is ``int xi . A xi sqrt(mu) G_R``.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    rate = (rho0 * alpha ** 2 * beta ** (-gamma) + rho1 * alpha ** 3 * beta ** (-2.0 * gamma)
            - alpha ** (m + 1.0) * GR_integral / 3.0)
    return beta * rate


def integrate_beta(t_end: float, n_steps: int, alpha: float, gamma: float, rho0: float,
                   rho1: float = 0.0, GR_integral: float = 0.0, m: float = 2.5, beta0: float = 1.0):
    """Classical RK4 for the beta equation; returns ``(t, beta)`` arrays."""
    h = t_end / n_steps
    t = np.linspace(0.0, t_end, n_steps + 1)
    beta = np.empty(n_steps + 1)
    beta[0] = beta0

    def f(b):
        return beta_rhs(b, alpha, gamma, rho0, rho1, GR_integral, m)

    b = beta0
    for k in range(n_steps):
        k1 = f(b)
        k2 = f(b + 0.5 * h * k1)
        k3 = f(b + 0.5 * h * k2)
        k4 = f(b + h * k3)
        b = b + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        beta[k + 1] = b
    return t, beta


def beta_closed_form(t, alpha: float, gamma: float, rho0: float):
    """``(1 + gamma rho0 alpha^2 t)^{1/gamma}``."""
    return (1.0 + gamma * rho0 * alpha ** 2 * np.asarray(t, float)) ** (1.0 / gamma)
