"""Discrete 1+1D cylinder spacetime: finite time extent, periodic space.

Sites are indexed (t, x) with t in [0, Nt) and x in [0, Nx) periodic.  The
metric is the fixed flat Diag(-1, 1); every site carries the volume weight
dt*dx.  Discrete causal cones widen by exactly one spatial site per time
step, which dominates the numerical domain of dependence of the explicit
solvers in :mod:`ppakit.dirac`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LatticeError(ValueError):
    """Invalid lattice parameters (CFL violation, odd Nx, too few sites)."""


@dataclass(frozen=True)
class Lattice:
    Nt: int
    Nx: int
    dt: float
    dx: float

    @property
    def signature(self):
        return np.diag([-1.0, 1.0])

    @property
    def n_sites(self) -> int:
        return self.Nt * self.Nx

    @property
    def weight(self) -> float:
        """Volume weight of a single site (flat metric)."""
        return self.dt * self.dx

    def site_index(self, t, x):
        return t * self.Nx + np.mod(x, self.Nx)

    def site_coords(self, idx):
        return idx // self.Nx, idx % self.Nx

    def x_dist(self, x0, x1):
        """Periodic spatial distance in units of sites."""
        d = np.abs(np.mod(x0 - x1, self.Nx))
        return np.minimum(d, self.Nx - d)


@dataclass(frozen=True)
class SiteRegion:
    """Subset of lattice sites, stored as a boolean mask of shape (Nt, Nx)."""

    lattice: Lattice
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.mask.shape != (self.lattice.Nt, self.lattice.Nx):
            raise LatticeError("region mask shape does not match lattice")

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())

    def sites(self):
        return np.argwhere(self.mask)

    def union(self, other: "SiteRegion") -> "SiteRegion":
        return SiteRegion(self.lattice, self.mask | other.mask)

    def issubset(self, other: "SiteRegion") -> bool:
        return bool(np.all(~self.mask | other.mask))

    def __eq__(self, other):
        return isinstance(other, SiteRegion) and np.array_equal(self.mask, other.mask)


def build_lattice(Nt: int, Nx: int, dt: float, dx: float) -> Lattice:
    if Nt < 1 or Nx < 1 or Nt * Nx < 4:
        raise LatticeError("need at least 4 sites")
    if Nx % 2 != 0:
        raise LatticeError("Nx must be even (doubler mitigation needs it)")
    if dt <= 0 or dx <= 0:
        raise LatticeError("steps must be positive")
    if dt / dx > 1.0 + 1e-12:
        raise LatticeError(f"CFL violated: dt/dx = {dt / dx:.3f} > 1")
    return Lattice(Nt=Nt, Nx=Nx, dt=dt, dx=dx)


def region_from_sites(lattice: Lattice, sites) -> SiteRegion:
    mask = np.zeros((lattice.Nt, lattice.Nx), dtype=bool)
    for t, x in sites:
        mask[t, x % lattice.Nx] = True
    return SiteRegion(lattice, mask)


def empty_region(lattice: Lattice) -> SiteRegion:
    return SiteRegion(lattice, np.zeros((lattice.Nt, lattice.Nx), dtype=bool))


def full_region(lattice: Lattice) -> SiteRegion:
    return SiteRegion(lattice, np.ones((lattice.Nt, lattice.Nx), dtype=bool))


def _cone_sweep(lattice: Lattice, mask: np.ndarray, direction: int) -> np.ndarray:
    """Reachability under |dx-sites| <= 1 per step, t monotone in `direction`."""
    out = mask.copy()
    rng = range(1, lattice.Nt) if direction > 0 else range(lattice.Nt - 2, -1, -1)
    for t in rng:
        prev = out[t - direction]
        grown = prev | np.roll(prev, 1) | np.roll(prev, -1)
        out[t] |= grown
    return out


def causal_future(lattice: Lattice, region: SiteRegion) -> SiteRegion:
    return SiteRegion(lattice, _cone_sweep(lattice, region.mask, +1))


def causal_past(lattice: Lattice, region: SiteRegion) -> SiteRegion:
    return SiteRegion(lattice, _cone_sweep(lattice, region.mask, -1))


def interior_region(lattice: Lattice, t_margin: int = 1, x_margin: int = 0) -> SiteRegion:
    """Sites with at least `t_margin` slices between them and either time boundary."""
    mask = np.zeros((lattice.Nt, lattice.Nx), dtype=bool)
    if 2 * t_margin < lattice.Nt:
        mask[t_margin : lattice.Nt - t_margin, :] = True
    if x_margin:
        # periodic space: x margin only meaningful for localized comparisons
        mask[:, :] &= True
    return SiteRegion(lattice, mask)


def is_interior(lattice: Lattice, region: SiteRegion, t_margin: int = 1) -> bool:
    return region.issubset(interior_region(lattice, t_margin))
