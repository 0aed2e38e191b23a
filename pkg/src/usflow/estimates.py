"""Large-velocity smallness of the cutoff operator ``chi_M calK`` and rate fitting.

All three norms refer to one matrix,

    S = chi_M nu^{-1} w^{2l} calK w^{-2l},

measured as
``ninf`` = L-inf -> L-inf norm of ``S``,
``n1``   = L1(nu) -> L1 norm (source weighted by ``nu``),
``n2``   = L2(nu) -> L2 norm (the midpoint of the two, by power iteration).
The quadrature weight ``h^3`` is already inside the matrix entries, so
row/column sums are the exact discrete operator norms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.stats

from .grid import VelocityGrid, weight
from .linearized import CalKMatrix, KernelBoundParams, OperatorCache, calK_of_cache, kernel_bound_kw

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class CutoffProfile:
    M: float
    chi: np.ndarray = field(repr=False)


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def cutoff_chi(grid: VelocityGrid, M: float) -> CutoffProfile:
    """Cubic smoothstep ramp from 0 at ``|xi| <= M`` to 1 at ``|xi| >= M + 1``."""
    if not (M > 0 and M + 1 < grid.R):
        raise ValueError(f"cutoff radius M={M} needs 0 < M < R - 1 = {grid.R - 1}")
    return CutoffProfile(float(M), smoothstep(np.sqrt(grid.speed2) - M))


def _as_calK(op) -> CalKMatrix:
    return calK_of_cache(op) if isinstance(op, OperatorCache) else op


def _weighted_operator(K: CalKMatrix, chi: np.ndarray, ell2: float) -> np.ndarray:
    w = weight(K.grid, 2.0 * ell2)
    S = K.matrix * (chi * w / K.nu)[:, None]
    S /= w[None, :]
    return S


def power_iteration_norm(B: np.ndarray, tol: float = 1e-10, max_iter: int = 20000, seed: int = 0) -> float:
    """Spectral norm of ``B`` by power iteration on ``B^T B``.

    Stops when the relative change of the Rayleigh quotient drops below
    ``tol``.  Near-degenerate top singular values converge slowly but the
    quotient itself settles quickly, which is all the norm needs.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(B.shape[1])
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(max_iter):
        y = B.T @ (B @ x)
        rq = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(rq - sigma2) <= tol * rq:
            return float(np.sqrt(rq))
        sigma2 = rq
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


class OperatorNorms(NamedTuple):
    n1: float
    n2: float
    ninf: float


def cutoff_operator_norms(op: CalKMatrix | OperatorCache, M: float, ell2: float = 2.0) -> OperatorNorms:
    """Weighted L1, L2 and L-inf norms of ``chi_M nu^{-1} w^{2 l} calK w^{-2 l}``.

    ``op`` is an assembled :class:`CalKMatrix` or an operator cache.
    ``M >= R - 1`` leaves no plateau inside the box and returns zeros.
    """
    K = _as_calK(op)
    if M >= K.grid.R - 1:
        return OperatorNorms(0.0, 0.0, 0.0)
    chi = cutoff_chi(K.grid, M).chi
    S = _weighted_operator(K, chi, ell2)
    A = np.abs(S)
    ninf = float(A.sum(axis=1).max())
    n1 = float((A.sum(axis=0) / K.nu).max())
    del A
    S /= np.sqrt(K.nu)[None, :]
    n2 = power_iteration_norm(S)
    return OperatorNorms(n1, n2, ninf)


@dataclass
class NormSweep:
    M: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    ninf: np.ndarray
    ell2: float
    slopes: dict = field(default_factory=dict)


def sweep(op: CalKMatrix | OperatorCache, Ms, ell2: float = 2.0) -> NormSweep:
    Ms = np.asarray(Ms, float)
    if Ms.size == 0 or np.any(np.diff(Ms) <= 0):
        raise ValueError("M values must be strictly increasing")
    K = _as_calK(op)
    vals = np.array([cutoff_operator_norms(K, M, ell2) for M in Ms])
    out = NormSweep(Ms, vals[:, 0], vals[:, 1], vals[:, 2], ell2)
    pos = np.all(vals > 0, axis=1)
    if pos.sum() >= 3:
        for k, name in enumerate(("n1", "n2", "ninf")):
            out.slopes[name] = fit_power_law(1.0 + Ms[pos], vals[pos, k]).exponent
    return out


class RieszThorinReport(NamedTuple):
    passed: bool
    ratios: np.ndarray
    violations: list


def riesz_thorin_check(sw: NormSweep, eps_rt: float = 0.05) -> RieszThorinReport:
    """``n2 <= sqrt(n1 ninf) (1 + eps_rt)`` at every sweep point; violations are reported."""
    bound = np.sqrt(sw.n1 * sw.ninf)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(bound > 0, sw.n2 / np.where(bound > 0, bound, 1.0), 0.0)
    bad = [float(M) for M, n2, b in zip(sw.M, sw.n2, bound) if n2 > b * (1.0 + eps_rt)]
    return RieszThorinReport(not bad, ratios, bad)


class PowerLawFit(NamedTuple):
    exponent: float
    intercept: float
    r2: float
    stderr: float


def fit_power_law(xs, ys) -> PowerLawFit:
    """Least squares of ``log y`` on ``log x``."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    if xs.size < 3 or xs.size != ys.size:
        raise ValueError("need at least three (x, y) pairs")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("power-law fit needs positive data")
    res = scipy.stats.linregress(np.log(xs), np.log(ys))
    return PowerLawFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), float(res.stderr))


def row_sum_bound(grid: VelocityGrid, xi, ell: float, params: KernelBoundParams, gamma: float) -> float:
    """``sum_{xi*} h^3 k_w(xi, xi*) exp(eps |xi - xi*|^2 / 8)`` over the lattice."""
    xi = np.asarray(xi, float)
    k = kernel_bound_kw(xi[None, :], grid.nodes, ell, params, gamma)
    d2 = np.sum((grid.nodes - xi) ** 2, axis=1)
    return float(grid.cell_volume * np.sum(k * np.exp(params.epsilon * d2 / 8.0)))
