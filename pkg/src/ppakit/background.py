"""Gauge backgrounds on the lattice: connections, mass functions, compactly
supported perturbations, gauge parameters, and the Lie-algebra-valued form
calculus (d-bar, wedge, kappa pairing).

Connections are stored as site-based Lie-algebra components A_mu^I(t, x) in a
fixed anti-Hermitian generator basis T_I.  The component A_mu(x) is read as
the value of the connection on the link from x to x + e_mu; the covariant
differential d_bar therefore uses forward (link) differences, so that the
discrete Dirac operator in :mod:`ppakit.dirac` transforms exactly under
infinitesimal gauge transformations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import Lattice, SiteRegion, empty_region, interior_region

TRUNCATION = 1e-12


class BackgroundError(ValueError):
    pass


@dataclass(frozen=True)
class GaugeGroupSpec:
    """Gauge group data: generators of the matter representation and the
    pairing on the Lie-algebra index."""

    name: str
    generators: np.ndarray = field(repr=False)  # (dim_g, dim_V, dim_V) anti-Hermitian
    kappa: np.ndarray = field(repr=False)       # (dim_g, dim_g) real symmetric
    structure: np.ndarray = field(repr=False)   # f^K_IJ, shape (dim_g, dim_g, dim_g)

    @property
    def dim_g(self) -> int:
        return self.generators.shape[0]

    @property
    def dim_V(self) -> int:
        return self.generators.shape[1]

    def rep(self, comps: np.ndarray) -> np.ndarray:
        """Map Lie-algebra components (..., dim_g) to matrices (..., dim_V, dim_V)."""
        return np.tensordot(comps, self.generators, axes=([-1], [0]))

    def bracket(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Componentwise Lie bracket [a, b]^K = f^K_IJ a^I b^J."""
        out = np.einsum("kij,...i,...j->...k", self.structure, a, b)
        return out

    def project(self, M: np.ndarray) -> np.ndarray:
        """kappa-orthogonal projection of End(V) matrices onto the generator span."""
        # Gram matrix tr(T_I^dag T_J) is diagonal for both supported groups.
        gram = np.einsum("iab,jab->ij", np.conj(self.generators), self.generators)
        coeff = np.einsum("iab,...ab->...i", np.conj(self.generators), M)
        return np.real(np.linalg.solve(gram, coeff[..., None])[..., 0])


def u1_group(charge: float = 1.0) -> GaugeGroupSpec:
    gen = np.array([[[1j * charge]]], dtype=complex)
    kappa = np.array([[-(charge**2)]])  # kappa(lambda, lambda') = lambda lambda' on i*R
    f = np.zeros((1, 1, 1))
    return GaugeGroupSpec("U1", gen, kappa, f)


def su2_group() -> GaugeGroupSpec:
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    gen = np.stack([-0.5j * sx, -0.5j * sy, -0.5j * sz])
    kappa = np.eye(3)
    f = np.zeros((3, 3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                f[k, i, j] = float(np.sign((i - j) * (j - k) * (k - i)))  # epsilon_ijk
    return GaugeGroupSpec("SU2", gen, kappa, f)


def make_group(name: str, charge: float = 1.0) -> GaugeGroupSpec:
    if name.upper() == "U1":
        return u1_group(charge)
    if name.upper() == "SU2":
        return su2_group()
    raise BackgroundError(f"unsupported gauge group {name!r}")


@dataclass(frozen=True)
class Background:
    lattice: Lattice
    group: GaugeGroupSpec
    A: np.ndarray = field(repr=False)  # (2, Nt, Nx, dim_g) real
    m: np.ndarray = field(repr=False)  # (Nt, Nx) real

    def __post_init__(self):
        lat = self.lattice
        if self.A.shape != (2, lat.Nt, lat.Nx, self.group.dim_g):
            raise BackgroundError("connection array has wrong shape")
        if self.m.shape != (lat.Nt, lat.Nx):
            raise BackgroundError("mass array has wrong shape")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.m))):
            raise BackgroundError("non-finite background values")

    def is_static(self) -> bool:
        return bool(
            np.all(self.A == self.A[:, :1, :, :]) and np.all(self.m == self.m[:1, :])
        )


def flat_background(lattice: Lattice, group: GaugeGroupSpec, mass: float = 0.0) -> Background:
    A = np.zeros((2, lattice.Nt, lattice.Nx, group.dim_g))
    m = np.full((lattice.Nt, lattice.Nx), float(mass))
    return Background(lattice, group, A, m)


def support_mask(lattice: Lattice, A: np.ndarray | None, m: np.ndarray | None) -> SiteRegion:
    mask = np.zeros((lattice.Nt, lattice.Nx), dtype=bool)
    if A is not None:
        mask |= np.any(np.abs(A) > 0, axis=(0, -1))
    if m is not None:
        mask |= np.abs(m) > 0
    return SiteRegion(lattice, mask)


@dataclass(frozen=True)
class Perturbation:
    """Compactly supported deviation X = (A, m); vanishes on and near the
    temporal boundary so that retarded solvers and d_bar margins are safe."""

    lattice: Lattice
    group: GaugeGroupSpec
    A: np.ndarray = field(repr=False)
    m: np.ndarray = field(repr=False)

    def __post_init__(self):
        lat = self.lattice
        if self.A.shape != (2, lat.Nt, lat.Nx, self.group.dim_g):
            raise BackgroundError("perturbation A has wrong shape")
        if self.m.shape != (lat.Nt, lat.Nx):
            raise BackgroundError("perturbation m has wrong shape")
        supp = self.support
        if not supp.empty:
            ts = supp.sites()[:, 0]
            if ts.min() < 1 or ts.max() > lat.Nt - 2:
                raise BackgroundError("perturbation support touches temporal boundary")

    @property
    def support(self) -> SiteRegion:
        return support_mask(self.lattice, self.A, self.m)

    def scaled(self, s: float) -> "Perturbation":
        return Perturbation(self.lattice, self.group, s * self.A, s * self.m)


@dataclass(frozen=True)
class GaugeParameter:
    lattice: Lattice
    group: GaugeGroupSpec
    c: np.ndarray = field(repr=False)  # (Nt, Nx, dim_g) real

    def __post_init__(self):
        lat = self.lattice
        if self.c.shape != (lat.Nt, lat.Nx, self.group.dim_g):
            raise BackgroundError("gauge parameter has wrong shape")
        supp = self.support
        if not supp.empty:
            ts = supp.sites()[:, 0]
            if ts.min() < 1 or ts.max() > lat.Nt - 2:
                raise BackgroundError("gauge parameter support touches temporal boundary")

    @property
    def support(self) -> SiteRegion:
        mask = np.any(np.abs(self.c) > 0, axis=-1)
        return SiteRegion(self.lattice, mask)


def zero_perturbation(bg: Background) -> Perturbation:
    lat = bg.lattice
    return Perturbation(
        lat, bg.group, np.zeros((2, lat.Nt, lat.Nx, bg.group.dim_g)), np.zeros((lat.Nt, lat.Nx))
    )


def perturb(bg: Background, X: Perturbation, s: float) -> Background:
    if X.lattice != bg.lattice or X.group.name != bg.group.name:
        raise BackgroundError("perturbation does not match background lattice/group")
    return Background(bg.lattice, bg.group, bg.A + s * X.A, bg.m + s * X.m)


def d_bar(bg: Background, c: GaugeParameter, t_margin: int = 2) -> Perturbation:
    """Covariant differential of a gauge parameter as a pure-gauge one-form.

    The derivative part is the forward link difference
    (d_bar c)_mu(x) = (c(x + e_mu) - c(x)) / h_mu, matching the link reading
    of connection components; the commutator part pairs A_mu(x) with the
    link-midpoint average of c.  For U1 this is the plain link gradient.
    """
    lat = bg.lattice
    if c.lattice != lat:
        raise BackgroundError("gauge parameter lattice mismatch")
    supp = c.support
    if not supp.empty:
        ts = supp.sites()[:, 0]
        if ts.min() < t_margin or ts.max() > lat.Nt - 1 - t_margin:
            raise BackgroundError("gauge parameter support too close to temporal boundary")
    steps = (lat.dt, lat.dx)
    A = np.zeros((2, lat.Nt, lat.Nx, bg.group.dim_g))
    for mu, h in enumerate(steps):
        axis = mu  # c has axes (t, x, I)
        c_plus = np.roll(c.c, -1, axis=axis)
        if mu == 0:
            c_plus[-1] = c.c[-1]  # no wraparound in time; support margin keeps this inert
        A[mu] = (c_plus - c.c) / h
        c_mid = 0.5 * (c.c + c_plus)
        A[mu] += bg.group.bracket(bg.A[mu], c_mid)
    m = np.zeros((lat.Nt, lat.Nx))
    return Perturbation(lat, bg.group, A, m)


def lie_wedge(group: GaugeGroupSpec, a: np.ndarray, deg_a: int, b: np.ndarray, deg_b: int):
    """Wedge of Lie-algebra-valued forms: bracket on the algebra index tensored
    with the form wedge.  Degrees 0 and 1 in, total degree <= 2 out."""
    if deg_a + deg_b > 2:
        raise BackgroundError("form degree overflow (max 2 in two dimensions)")
    if deg_a == 0 and deg_b == 0:
        return group.bracket(a, b), 0
    if deg_a == 0 and deg_b == 1:
        out = np.stack([group.bracket(a, b[mu]) for mu in range(2)])
        return out, 1
    if deg_a == 1 and deg_b == 0:
        out = np.stack([group.bracket(a[mu], b) for mu in range(2)])
        return out, 1
    # 1 wedge 1 -> two-form, single (t, x) component
    out = group.bracket(a[0], b[1]) - group.bracket(a[1], b[0])
    return out, 2


def gauge_transform(bg: Background, c: GaugeParameter, s: float) -> Background:
    """Exact sitewise gauge transformation A -> g A g^-1 + g d(g^-1) with
    g = exp(-s c); agrees with perturb(bg, d_bar(bg, c), s) to O(s^2)."""
    lat, grp = bg.lattice, bg.group
    cmats = grp.rep(c.c)  # (Nt, Nx, V, V)
    w, U = np.linalg.eigh(1j * cmats)  # c anti-Hermitian -> i c Hermitian
    phase = np.exp(1j * s * w)  # exp(-s c) = exp(i s (i c))
    g = np.einsum("...ab,...b,...cb->...ac", U, phase, np.conj(U))
    ginv = np.einsum("...ab,...b,...cb->...ac", U, np.conj(phase), np.conj(U))
    Amats = grp.rep(bg.A)  # (2, Nt, Nx, V, V)
    A_new = np.empty_like(bg.A)
    for mu in range(2):
        conj_part = g @ Amats[mu] @ ginv
        ginv_plus = np.roll(ginv, -1, axis=mu)
        if mu == 0:
            ginv_plus[-1] = ginv[-1]
        h = (lat.dt, lat.dx)[mu]
        deriv_part = g @ (ginv_plus - ginv) / h
        A_new[mu] = grp.project(conj_part + deriv_part)
    return Background(lat, grp, A_new, bg.m.copy())


def field_strength(bg: Background) -> np.ndarray:
    """F_tx with forward differences and the sitewise commutator; exact curl of
    pure forward gradients vanishes in the abelian case."""
    lat, grp = bg.lattice, bg.group
    At, Ax = bg.A[0], bg.A[1]
    Ax_tplus = np.roll(Ax, -1, axis=0)
    Ax_tplus[-1] = Ax[-1]
    At_xplus = np.roll(At, -1, axis=1)
    F = (Ax_tplus - Ax) / lat.dt - (At_xplus - At) / lat.dx
    F += grp.bracket(At, Ax)
    return F


def bump_profile(lattice: Lattice, t0: float, x0: float, width: float, amplitude: float = 1.0) -> np.ndarray:
    """Analytic bump amplitude * exp(-((t-t0)^2 + d(x,x0)^2)/w^2) in physical
    coordinates, truncated below 1e-12 of the amplitude."""
    t = np.arange(lattice.Nt)[:, None] * lattice.dt
    x = np.arange(lattice.Nx)[None, :] * lattice.dx
    Lx = lattice.Nx * lattice.dx
    dxp = np.abs(x - x0)
    dxp = np.minimum(dxp, Lx - dxp)
    prof = amplitude * np.exp(-(((t - t0) ** 2) + dxp**2) / width**2)
    prof[np.abs(prof) < TRUNCATION * abs(amplitude)] = 0.0
    return prof


def bump_perturbation(
    bg: Background,
    *,
    direction: int,
    component: int,
    t0: float,
    x0: float,
    width: float,
    amplitude: float,
    mass_bump: float = 0.0,
) -> Perturbation:
    lat = bg.lattice
    A = np.zeros((2, lat.Nt, lat.Nx, bg.group.dim_g))
    prof = bump_profile(lat, t0, x0, width, amplitude)
    A[direction, :, :, component] = prof
    m = np.zeros((lat.Nt, lat.Nx))
    if mass_bump:
        m = bump_profile(lat, t0, x0, width, mass_bump)
    return Perturbation(lat, bg.group, A, m)


def bump_gauge_parameter(
    bg: Background, *, component: int, t0: float, x0: float, width: float, amplitude: float
) -> GaugeParameter:
    lat = bg.lattice
    c = np.zeros((lat.Nt, lat.Nx, bg.group.dim_g))
    c[:, :, component] = bump_profile(lat, t0, x0, width, amplitude)
    return GaugeParameter(lat, bg.group, c)
