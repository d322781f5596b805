"""Finite point grids used by the auditors and the DGP validators."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """A finite set of points in R^d with the mesh it was built at.

    ``points`` has shape ``(n, d)``. Certificates produced on a grid only
    speak about these points; ``mesh`` sets the exclusion ball radius.
    """

    points: np.ndarray
    mesh: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError("grid points must be a 2-D array")
        if self.mesh <= 0:
            raise ValueError("mesh must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_point(self, point) -> "Grid":
        """Grid with ``point`` appended (no-op if already present)."""
        point = np.asarray(point, dtype=float).reshape(1, -1)
        if np.any(np.all(self.points == point, axis=1)):
            return self
        return Grid(np.vstack([self.points, point]), self.mesh)

    @cached_property
    def _description(self) -> str:
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        box = " x ".join(f"[{a:.6g},{b:.6g}]" for a, b in zip(lo, hi))
        return f"{len(self)} pts, mesh {self.mesh:g}, box {box}"

    def describe(self) -> str:
        return self._description


def lattice(box, mesh: float, anchor=None) -> Grid:
    """Axis-aligned lattice of spacing ``mesh`` over ``box`` (shape ``(d, 2)``).

    With ``anchor`` the lattice is shifted so that ``anchor`` is a node;
    otherwise it starts at the lower corner.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if np.any(box[:, 1] < box[:, 0]):
        raise ValueError("box upper bounds must not be below lower bounds")
    axes = []
    for j, (lo, hi) in enumerate(box):
        if anchor is None:
            n = int(np.floor((hi - lo) / mesh + 1e-9))
            axes.append(lo + mesh * np.arange(n + 1))
        else:
            a = float(np.asarray(anchor, dtype=float).ravel()[j])
            i_lo = int(np.ceil((lo - a) / mesh - 1e-9))
            i_hi = int(np.floor((hi - a) / mesh + 1e-9))
            axes.append(a + mesh * np.arange(i_lo, i_hi + 1))
    mesh_pts = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh_pts], axis=1)
    return Grid(pts, mesh)


def outside_ball(points: np.ndarray, center, radius: float) -> np.ndarray:
    """Mask of points with sup-norm distance from ``center`` above ``radius``."""
    center = np.asarray(center, dtype=float).reshape(1, -1)
    return np.max(np.abs(points - center), axis=1) > radius
