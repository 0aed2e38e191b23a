"""Velocity lattice, reference Maxwellian, moments and weighted norms.

Fields are plain 1-D numpy arrays of length ``grid.size`` in node order
``i = (ix * N + iy) * N + iz``.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

MAXWELLIAN_PEAK = (2.0 * np.pi) ** -1.5


class GridError(ValueError):
    """Invalid lattice configuration or mismatched field."""


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform midpoint lattice on the cube ``[-R, R]^3``.

    Nodes sit at ``-R + (i + 1/2) h`` with ``h = 2R/N`` on each axis, so the
    lattice is symmetric under negation and (for even ``N``) never contains
    the origin.
    """

    extent: float
    points_per_axis: int
    axis: np.ndarray = field(repr=False, compare=False)
    nodes: np.ndarray = field(repr=False, compare=False)

    @property
    def N(self) -> int:
        return self.points_per_axis

    @property
    def R(self) -> float:
        return self.extent

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.points_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def size(self) -> int:
        return self.points_per_axis ** 3

    @property
    def shape(self) -> tuple[int, int, int]:
        n = self.points_per_axis
        return (n, n, n)

    @property
    def speed2(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.nodes, self.nodes)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, self.cell_volume)

    def fingerprint(self) -> str:
        return f"R={self.extent!r};N={self.points_per_axis}"

    def check(self, *fields: np.ndarray) -> None:
        """Raise :class:`GridError` unless every field has one value per node."""
        for f in fields:
            if np.shape(f) != (self.size,):
                raise GridError(
                    f"field of shape {np.shape(f)} does not live on a grid with "
                    f"{self.size} nodes"
                )

    def negation_index(self) -> np.ndarray:
        """Permutation ``p`` such that ``nodes[p[i]] == -nodes[i]``."""
        return np.arange(self.size)[::-1].copy()

    def index_of(self, ix, iy, iz):
        n = self.points_per_axis
        return (np.asarray(ix) * n + np.asarray(iy)) * n + np.asarray(iz)


def build_grid(R: float, N: int) -> VelocityGrid:
    """Build the midpoint lattice with ``N`` points per axis on ``[-R, R]^3``.

    ``N`` below 4 is refused; :func:`_build` skips that check and is only
    used for toy lattices in tests.
    """
    if not N >= 4:
        raise GridError(f"points_per_axis must be >= 4, got {N}")
    return _build(R, N)


def _build(R: float, N: int) -> VelocityGrid:
    if not (np.isfinite(R) and R > 0):
        raise GridError(f"extent must be positive, got {R}")
    if int(N) != N or N < 1:
        raise GridError(f"points_per_axis must be a positive integer, got {N}")
    N = int(N)
    h = 2.0 * R / N
    # half-integer offsets make the axis exactly antisymmetric in floating point
    axis = (np.arange(N) - 0.5 * (N - 1)) * h
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    nodes.setflags(write=False)
    axis.setflags(write=False)
    return VelocityGrid(float(R), N, axis, nodes)


def maxwellian(grid: VelocityGrid, shift=None) -> np.ndarray:
    """Standard Maxwellian ``(2 pi)^{-3/2} exp(-|xi - shift|^2 / 2)`` on the nodes."""
    x = grid.nodes if shift is None else grid.nodes - np.asarray(shift, float)
    return MAXWELLIAN_PEAK * np.exp(-0.5 * np.einsum("ij,ij->i", x, x))


def integrate(grid: VelocityGrid, f: np.ndarray) -> float:
    grid.check(f)
    return float(grid.cell_volume * np.sum(f))


class MomentSet(NamedTuple):
    rho: float
    u: np.ndarray
    theta: float


def moments(grid: VelocityGrid, f: np.ndarray, undershoot_tol: float = 1e-8) -> MomentSet:
    """Density, bulk velocity and temperature of a distribution.

    Small negative values are tolerated (logged) because interpolation and
    perturbative fields can dip slightly below zero.
    """
    grid.check(f)
    fmin = float(np.min(f))
    if fmin < -undershoot_tol * max(float(np.max(np.abs(f))), 1e-300):
        logger.warning("moments: field has negative values down to %.3e", fmin)
    w = grid.cell_volume
    rho = w * float(np.sum(f))
    if not rho > 0:
        raise GridError(f"degenerate field: mass {rho!r} is not positive")
    u = w * _first_moment(grid, f) / rho
    c = grid.nodes - u
    theta = w * float(np.einsum("ij,ij,i->", c, c, f)) / (3.0 * rho)
    return MomentSet(rho, u, theta)


def _first_moment(grid: VelocityGrid, f: np.ndarray) -> np.ndarray:
    """``sum xi f`` summed over negation pairs, so even fields give exactly 0."""
    half = grid.size // 2
    odd = f[:half] - f[::-1][:half]
    return grid.nodes[:half].T @ odd


def conserved_sums(grid: VelocityGrid, f: np.ndarray) -> np.ndarray:
    """Raw mass, momentum (3) and energy ``sum w |xi|^2 f`` as a length-5 array."""
    grid.check(f)
    w = grid.cell_volume
    return w * np.concatenate(([f.sum()], _first_moment(grid, f), [grid.speed2 @ f]))


def weight(grid: VelocityGrid, ell: float) -> np.ndarray:
    """Polynomial weight ``(1 + |xi|^2)^ell``."""
    return (1.0 + grid.speed2) ** ell


def weighted_sup_norm(grid: VelocityGrid, f: np.ndarray, ell: float = 3.0) -> float:
    grid.check(f)
    return float(np.max(weight(grid, ell) * np.abs(f)))


def inner_product(grid: VelocityGrid, f: np.ndarray, g: np.ndarray) -> float:
    grid.check(f, g)
    return float(grid.cell_volume * np.dot(f, g))


def l2_norm(grid: VelocityGrid, f: np.ndarray) -> float:
    return float(np.sqrt(inner_product(grid, f, f)))


def l2_norm_nu(grid: VelocityGrid, f: np.ndarray, nu: np.ndarray) -> float:
    """``|| nu^{1/2} f ||`` in the quadrature inner product."""
    grid.check(f, nu)
    return float(np.sqrt(grid.cell_volume * np.dot(nu * f, f)))


def field_checksum(values: np.ndarray) -> str:
    data = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()[:16]
