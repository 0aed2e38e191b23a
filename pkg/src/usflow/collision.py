"""Cutoff hard-potential collision kernel and the discrete bilinear operator Q.

The collision integral is evaluated on the lattice with a product rule in
``(xi*, omega)``: lattice sum over ``xi*`` and a Gauss-Legendre x uniform
azimuth rule on the sphere in a frame aligned with ``xi* - xi``.
Off-lattice values ``F(xi')`` are obtained by trilinear interpolation of
``F / mu`` (zero outside the box) and multiplied back by the Maxwellian, so
``Q(mu, mu)`` vanishes except for box truncation.  ``interp="linear"``
interpolates ``F`` itself; that variant suits polynomially decaying inputs,
where dividing by the Maxwellian amplifies interpolation error in the tails.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .grid import VelocityGrid, maxwellian

logger = logging.getLogger(__name__)

MU_FLOOR = 1e-290


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShearConfig:
    """Deformation matrix ``A`` (trace free), strength ``alpha``, kernel exponent
    ``gamma`` and amplitude ``b0`` in ``B0(cos) = b0 |cos|``, expansion order ``m``.
    """

    A: np.ndarray = field(default_factory=lambda: simple_shear())
    alpha: float = 0.1
    gamma: float = 1.0
    b0: float = 1.0
    m: float = 2.5

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.shape != (3, 3):
            raise ConfigError(f"A must be 3x3, got shape {A.shape}")
        tr = np.trace(A)
        if tr != 0.0:
            raise ConfigError(f"deformation matrix must be trace free, trace = {tr!r}")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if not 0 < self.gamma <= 1:
            # gamma = 0 (Maxwell molecules) is accepted for kernel checks only
            if self.gamma != 0:
                raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 2 < self.m < 3:
            raise ConfigError(f"m must lie in (2, 3), got {self.m}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if not self.b0 > 0:
            raise ConfigError(f"b0 must be positive, got {self.b0}")

    def replace(self, **changes) -> "ShearConfig":
        kw = dict(A=self.A, alpha=self.alpha, gamma=self.gamma, b0=self.b0, m=self.m)
        kw.update(changes)
        return ShearConfig(**kw)

    def fingerprint(self) -> str:
        a = ",".join(repr(float(x)) for x in self.A.ravel())
        return f"A=[{a}];alpha={self.alpha!r};gamma={self.gamma!r};b0={self.b0!r};m={self.m!r}"


def simple_shear(i: int = 0, j: int = 1) -> np.ndarray:
    """``e_i (x) e_j``, the nilpotent simple-shear deformation."""
    A = np.zeros((3, 3))
    A[i, j] = 1.0
    return A


@dataclass(frozen=True)
class AngularQuadrature:
    """Product rule on the unit sphere relative to a polar axis.

    ``cos(theta)`` uses Gauss-Legendre on each hemisphere separately
    (``n_cos / 2`` nodes on ``[0, 1]``, mirrored), so ``|cos(theta)|`` is
    integrated exactly and the rule is invariant under ``omega -> -omega``.
    """

    n_cos: int = 8
    n_phi: int = 8

    def __post_init__(self):
        if self.n_cos < 2 or self.n_cos % 2:
            raise ConfigError(f"n_cos must be an even integer >= 2, got {self.n_cos}")
        if self.n_phi < 1:
            raise ConfigError(f"n_phi must be >= 1, got {self.n_phi}")

    @cached_property
    def upper(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(cos_theta, phi, weight) on the upper hemisphere, flattened."""
        x, w = np.polynomial.legendre.leggauss(self.n_cos // 2)
        c = 0.5 * (x + 1.0)
        wc = 0.5 * w
        phi = 2.0 * np.pi * (np.arange(self.n_phi) + 0.5) / self.n_phi
        C, P = np.meshgrid(c, phi, indexing="ij")
        W = np.outer(wc, np.full(self.n_phi, 2.0 * np.pi / self.n_phi))
        return C.ravel(), P.ravel(), W.ravel()

    @property
    def weights(self) -> np.ndarray:
        _, _, w = self.upper
        return np.concatenate([w, w])

    def nodes(self, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
        """Unit vectors of the full rule in the frame with polar axis ``axis``."""
        c, phi, _ = self.upper
        u, e1, e2 = _frame(np.asarray(axis, float))
        s = np.sqrt(1.0 - c * c)
        up = c[:, None] * u + (s * np.cos(phi))[:, None] * e1 + (s * np.sin(phi))[:, None] * e2
        return np.concatenate([up, -up])


def _frame(axis: np.ndarray):
    norm = np.linalg.norm(axis)
    if norm == 0:
        return np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    u = axis / norm
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return u, e1, e2


def kernel_B(omega, v_rel, config: ShearConfig) -> float:
    """``|v_rel|^gamma * b0 * |cos theta|`` with ``cos theta = omega . v_rel / |v_rel|``."""
    omega = np.asarray(omega, float)
    v_rel = np.asarray(v_rel, float)
    speed = float(np.linalg.norm(v_rel))
    if speed == 0.0:
        return 0.0
    cos = float(np.dot(omega, v_rel)) / speed
    return speed ** config.gamma * config.b0 * abs(cos)


def post_collision(v, v_star, omega):
    """Post-collision pair ``(v', v*')`` for the scattering direction ``omega``."""
    v = np.asarray(v, float)
    v_star = np.asarray(v_star, float)
    omega = np.asarray(omega, float)
    s = np.dot(v_star - v, omega)
    return v + s * omega, v_star - s * omega


class CollisionOperator:
    """Discrete Q bound to one lattice, kernel and angular rule.

    Building the object tabulates, for every lattice offset ``m = j - i`` and
    upper-hemisphere node, the post-collision displacement and the kernel
    weight (including the lattice cell volume and the factor 2 that accounts
    for ``omega -> -omega``).
    """

    def __init__(self, grid: VelocityGrid, config: ShearConfig, angular: AngularQuadrature | None = None,
                 interp: str = "ratio"):
        if interp not in ("ratio", "linear"):
            raise ConfigError(f"interp must be 'ratio' or 'linear', got {interp!r}")
        self.grid = grid
        self.config = config
        self.angular = angular or AngularQuadrature()
        self.interp = interp
        n = grid.N
        self.pad = int(np.ceil(np.sqrt(3.0) * (n - 1))) + 2
        self.mu = maxwellian(grid)
        # fields are interpolated after division by ``scale``
        self.scale = self.mu if interp == "ratio" else np.ones(grid.size)
        self._tabulate()
        npad = n + 2 * self.pad
        node_of = -np.ones((npad, npad, npad), dtype=np.int64)
        sl = slice(self.pad, self.pad + n)
        node_of[sl, sl, sl] = np.arange(grid.size).reshape(grid.shape)
        self.node_of = node_of.ravel()

    def _tabulate(self):
        n = self.grid.N
        h = self.grid.spacing
        cfg = self.config
        c, phi, wq = self.angular.upper
        s = np.sqrt(1.0 - c * c)
        r = np.arange(-(n - 1), n)
        M = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)
        norm = np.linalg.norm(M, axis=1)
        safe = np.where(norm > 0, norm, 1.0)
        u = M / safe[:, None]
        u[norm == 0] = (0.0, 0.0, 1.0)
        helper = np.where(np.abs(u[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        e1 = np.cross(u, helper)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(u, e1)
        # omega[m, k] for the upper hemisphere
        omega = (
            c[None, :, None] * u[:, None, :]
            + (s * np.cos(phi))[None, :, None] * e1[:, None, :]
            + (s * np.sin(phi))[None, :, None] * e2[:, None, :]
        )
        proj = norm[:, None] * c[None, :]  # (m . omega) in lattice units
        self.disp = np.ascontiguousarray(proj[:, :, None] * omega)
        with np.errstate(divide="ignore"):
            speed_pow = (h * norm) ** cfg.gamma if cfg.gamma > 0 else np.ones_like(norm)
        wts = cfg.b0 * speed_pow[:, None] * c[None, :] * (2.0 * wq)[None, :] * self.grid.cell_volume
        if cfg.gamma > 0:
            wts[norm == 0] = 0.0
        self.wts = np.ascontiguousarray(wts)
        self.wsum = self.wts.sum(axis=1)

    def fingerprint(self) -> str:
        a = self.angular
        fp = f"{self.grid.fingerprint()};gamma={self.config.gamma!r};b0={self.config.b0!r};ang={a.n_cos}x{a.n_phi}"
        return fp if self.interp == "ratio" else fp + ";interp=linear"

    def padded(self, ratio: np.ndarray) -> np.ndarray:
        n, p = self.grid.N, self.pad
        out = np.zeros((n + 2 * p,) * 3)
        out[p:p + n, p:p + n, p:p + n] = ratio.reshape(self.grid.shape)
        return out.ravel()

    def ratio(self, F: np.ndarray) -> np.ndarray:
        """``F / scale`` with nodes below the Maxwellian floor treated as empty."""
        if self.interp == "linear":
            return np.asarray(F, float)
        mu = self.mu
        out = np.zeros_like(F, dtype=float)
        ok = mu > MU_FLOOR
        out[ok] = F[ok] / mu[ok]
        return out

    def gain(self, F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
        self.grid.check(F1, F2)
        r1, r2 = self.ratio(F1), self.ratio(F2)
        g = _kernels.gain_kernel(self.grid.N, self.pad, self.padded(r1), self.padded(r2),
                                 self.scale, self.disp, self.wts)
        out = self.scale * g
        _check_finite(out, "gain")
        return out

    def loss(self, F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
        self.grid.check(F1, F2)
        out = F2 * _kernels.loss_kernel(self.grid.N, np.ascontiguousarray(F1, float), self.wsum)
        _check_finite(out, "loss")
        return out

    def frequency(self) -> np.ndarray:
        return _kernels.loss_kernel(self.grid.N, self.mu, self.wsum)

    def jacobian_core(self, base: np.ndarray) -> np.ndarray:
        """Matrix ``C`` with ``Q(h, B) + Q(B, h) = scale * (C @ (h / scale))``."""
        self.grid.check(base)
        r = self.ratio(base)
        out = np.zeros((self.grid.size, self.grid.size))
        _kernels.jacobian_kernel(self.grid.N, self.pad, self.padded(r), r, self.scale,
                                 self.disp, self.wts, self.wsum, self.node_of, out)
        return out


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FloatingPointError(f"non-finite {what} value at node {int(bad[0])}")


def apply_Q_gain(F1, F2, op: CollisionOperator) -> np.ndarray:
    return op.gain(F1, F2)


def apply_Q_loss(F1, F2, op: CollisionOperator) -> np.ndarray:
    """Loss part ``F2(xi) * sum_{xi*} B F1(xi*)``, returned with positive sign."""
    return op.loss(F1, F2)


def apply_Q(F1, F2, op: CollisionOperator) -> np.ndarray:
    """Discrete ``Q(F1, F2)``; ``F1`` sits in the ``xi*`` slot."""
    return op.gain(F1, F2) - op.loss(F1, F2)


def collision_frequency(op: CollisionOperator) -> np.ndarray:
    """``nu(xi) = sum_{xi*} sum_omega B mu(xi*)`` on the lattice."""
    return op.frequency()


def invariant_basis(grid: VelocityGrid) -> np.ndarray:
    """Columns ``1, xi_1, xi_2, xi_3, |xi|^2`` (shape ``(n, 5)``)."""
    return np.column_stack([np.ones(grid.size), grid.nodes, grid.speed2])


def conserve_correct(grid: VelocityGrid, q: np.ndarray, weight: np.ndarray | None = None) -> np.ndarray:
    """Remove the collision-invariant content of ``q``.

    Without ``weight`` this subtracts the least-squares projection of ``q``
    onto ``span{1, xi, |xi|^2}``.  With ``weight`` (typically the Maxwellian)
    the correction is drawn from ``weight * span{1, xi, |xi|^2}`` instead,
    which keeps Gaussian tails intact.  Either way the discrete mass,
    momentum and energy of the output vanish.
    """
    grid.check(q)
    psi = invariant_basis(grid)
    basis = psi if weight is None else psi * np.asarray(weight)[:, None]
    gram = psi.T @ basis
    if np.linalg.cond(gram) > 1e14:
        raise AssertionError("singular Gram matrix in conservation correction")
    coef = np.linalg.solve(gram, psi.T @ q)
    out = q - basis @ coef
    # one refinement sweep pushes the residual moments to roundoff
    coef = np.linalg.solve(gram, psi.T @ out)
    return out - basis @ coef


__all__ = [
    "AngularQuadrature", "CollisionOperator", "ConfigError", "ShearConfig", "apply_Q",
    "apply_Q_gain", "apply_Q_loss", "collision_frequency", "conserve_correct",
    "invariant_basis", "kernel_B", "post_collision", "simple_shear",
]
