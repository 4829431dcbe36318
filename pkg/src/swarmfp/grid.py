"""Uniform 2D grids and sparse central finite-difference operators.

Fields on a grid are flat float arrays in row-major order, ``i = iy * nx + ix``.
Vector fields hold all x-components first, then all y-components
(length ``2 * nx * ny``).
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class Boundary(str, enum.Enum):
    PERIODIC = "periodic"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: ``nx * ny`` samples starting at ``origin`` with spacing ``spacing``."""

    nx: int
    ny: int
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3x3 points, got {self.nx}x{self.ny}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def square(cls, side: float, spacing: float, center=(0.0, 0.0), boundary=Boundary.PERIODIC):
        n = int(round(side / spacing)) + 1
        half = 0.5 * (n - 1) * spacing
        return cls(n, n, spacing, (center[0] - half, center[1] - half), boundary)

    @property
    def n_points(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape ``(ny, nx)`` matching the flattening convention."""
        return (self.ny, self.nx)

    @property
    def is_odd(self) -> bool:
        return self.nx % 2 == 1 and self.ny % 2 == 1

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + (self.nx - 1) * self.spacing, y0, y0 + (self.ny - 1) * self.spacing)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.origin
        return (x0 + self.spacing * np.arange(self.nx), y0 + self.spacing * np.arange(self.ny))

    def points(self) -> np.ndarray:
        """Grid point coordinates, shape ``(n_points, 2)``."""
        return _points(self)

    def index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def contains(self, positions, tol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(np.asarray(positions, dtype=float))
        xmin, xmax, ymin, ymax = self.bounds
        return (
            (p[:, 0] >= xmin - tol)
            & (p[:, 0] <= xmax + tol)
            & (p[:, 1] >= ymin - tol)
            & (p[:, 1] <= ymax + tol)
        )

    def clamp(self, positions, margin: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Clamp positions into the domain shrunk by ``margin`` (default one cell).

        Returns the clamped copy and a boolean mask of rows that moved.
        """
        m = self.spacing if margin is None else margin
        p = np.array(positions, dtype=float, copy=True)
        xmin, xmax, ymin, ymax = self.bounds
        outside = ~self.contains(p)
        if outside.any():
            p[outside, 0] = np.clip(p[outside, 0], xmin + m, xmax - m)
            p[outside, 1] = np.clip(p[outside, 1], ymin + m, ymax - m)
        return p, outside

    def to_image(self, values) -> np.ndarray:
        return np.asarray(values).reshape(self.shape)


@functools.lru_cache(maxsize=32)
def _points(grid: GridSpec) -> np.ndarray:
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts.flags.writeable = False
    return pts


def _diff_1d(n: int, h: float, boundary: Boundary) -> sp.csr_matrix:
    off = np.full(n - 1, 1.0 / (2 * h))
    d = sp.diags([off, -off], [1, -1], shape=(n, n), format="lil")
    if boundary is Boundary.PERIODIC:
        d[0, n - 1] = -1.0 / (2 * h)
        d[n - 1, 0] = 1.0 / (2 * h)
    # Neumann: the wrap couplings are dropped, which keeps the matrix exactly skew.
    return d.tocsr()


def _lap_1d(n: int, h: float, boundary: Boundary) -> sp.csr_matrix:
    off = np.ones(n - 1)
    diag = -2.0 * np.ones(n)
    if boundary is Boundary.NEUMANN:
        # zero-flux closure: symmetric, rows and columns sum to zero
        diag[0] = diag[-1] = -1.0
    lap = sp.diags([off, diag, off], [1, 0, -1], shape=(n, n), format="lil")
    if boundary is Boundary.PERIODIC:
        lap[0, n - 1] = 1.0
        lap[n - 1, 0] = 1.0
    return (lap.tocsr() / h**2).tocsr()


@functools.lru_cache(maxsize=32)
def build_diff_x(grid: GridSpec) -> sp.csr_matrix:
    """Central difference ``(f[ix+1] - f[ix-1]) / 2l`` along x."""
    d = sp.kron(sp.identity(grid.ny), _diff_1d(grid.nx, grid.spacing, grid.boundary))
    return d.tocsr()


@functools.lru_cache(maxsize=32)
def build_diff_y(grid: GridSpec) -> sp.csr_matrix:
    """Central difference along y."""
    d = sp.kron(_diff_1d(grid.ny, grid.spacing, grid.boundary), sp.identity(grid.nx))
    return d.tocsr()


@functools.lru_cache(maxsize=32)
def build_laplacian(grid: GridSpec) -> sp.csr_matrix:
    """Five-point Laplacian scaled by ``1/l**2``."""
    h = grid.spacing
    lx = sp.kron(sp.identity(grid.ny), _lap_1d(grid.nx, h, grid.boundary))
    ly = sp.kron(_lap_1d(grid.ny, h, grid.boundary), sp.identity(grid.nx))
    return (lx + ly).tocsr()


@dataclass(frozen=True)
class Operators:
    """The operator bundle shared by the density and controller modules."""

    grid: GridSpec
    dx: sp.csr_matrix
    dy: sp.csr_matrix
    lap: sp.csr_matrix

    def gradient(self, f: np.ndarray) -> np.ndarray:
        return np.concatenate([self.dx @ f, self.dy @ f])

    def divergence(self, v: np.ndarray) -> np.ndarray:
        n = self.grid.n_points
        return self.dx @ v[:n] + self.dy @ v[n:]


@functools.lru_cache(maxsize=32)
def operators(grid: GridSpec) -> Operators:
    return Operators(grid, build_diff_x(grid), build_diff_y(grid), build_laplacian(grid))
