"""Nearest-robot partition of the grid cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


@dataclass(frozen=True)
class Partition:
    owner: np.ndarray  # robot index per grid point
    counts: np.ndarray  # grid points per robot

    @property
    def n_robots(self) -> int:
        return len(self.counts)

    def cell(self, i: int) -> np.ndarray:
        return self.owner == i


def _owner_brute(x, xs, ys):
    px = np.tile(xs, len(ys))
    py = np.repeat(ys, len(xs))
    d2 = (px[:, None] - x[None, :, 0]) ** 2 + (py[:, None] - x[None, :, 1]) ** 2
    return np.argmin(d2, axis=1)


def _owner_sweep(x, xs, ys):
    # the squared distance separates into row and column terms
    dx = (xs[None, :] - x[:, 0, None]) ** 2
    dy = (ys[None, :] - x[:, 1, None]) ** 2
    best = dy[0][:, None] + dx[0][None, :]
    own = np.zeros(best.shape, dtype=np.intp)
    d = np.empty_like(best)
    for k in range(1, len(x)):
        np.add(dy[k][:, None], dx[k][None, :], out=d)
        closer = d < best
        np.copyto(best, d, where=closer)
        own[closer] = k
    return own.ravel()


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _owner_compiled(x, xs, ys):  # pragma: no cover - compiled
        nx, ny, n = xs.size, ys.size, x.shape[0]
        dx = np.empty((n, nx))
        dy = np.empty((n, ny))
        for k in range(n):
            for ix in range(nx):
                dx[k, ix] = (xs[ix] - x[k, 0]) ** 2
            for iy in range(ny):
                dy[k, iy] = (ys[iy] - x[k, 1]) ** 2
        # robot-outer order keeps the inner loop branch-free so it vectorizes
        best = np.empty(nx * ny)
        own = np.zeros(nx * ny, dtype=np.intp)
        for iy in range(ny):
            for ix in range(nx):
                best[iy * nx + ix] = dy[0, iy] + dx[0, ix]
        for k in range(1, n):
            for iy in range(ny):
                row = iy * nx
                dyk = dy[k, iy]
                for ix in range(nx):
                    d = dyk + dx[k, ix]
                    closer = d < best[row + ix]
                    best[row + ix] = d if closer else best[row + ix]
                    own[row + ix] = k if closer else own[row + ix]
        return own

else:  # pragma: no cover
    _owner_compiled = None

_METHODS = {"brute": _owner_brute, "sweep": _owner_sweep, "compiled": _owner_compiled}


def partition_grid(meas_pos, grid: GridSpec, method: str = "auto") -> Partition:
    """Assign every grid point to the nearest measured position.

    Distances are plain Euclidean in physical coordinates (no periodic wrap).
    Ties go to the lowest robot index. ``method`` picks the kernel: ``brute``
    builds the full distance table, ``sweep`` keeps a running minimum over
    robots and ``compiled`` is the same scan as a numba loop. All three give
    identical owners; ``auto`` prefers the compiled one.
    """
    x = np.atleast_2d(np.asarray(meas_pos, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("partition needs at least one robot")
    if method == "auto":
        method = "compiled" if _owner_compiled is not None else "sweep"
    fn = _METHODS.get(method)
    if fn is None:
        raise ValueError(f"unknown partition method {method!r}")
    xs, ys = grid.axes()
    owner = fn(np.ascontiguousarray(x), np.ascontiguousarray(xs, dtype=float), np.ascontiguousarray(ys, dtype=float))
    return Partition(owner, np.bincount(owner, minlength=len(x)))
