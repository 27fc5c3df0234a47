"""Graded functional algebra over the double Dirac bundle.

A functional is a finite collection of antisymmetric grade-k kernels with a
formal hbar power per component.  Kernels are stored as sums of terms
coef * Antisym(f_1 (x) ... (x) f_m): each factor f_i is a dense array over
small per-slot flat-index supports, and the global antisymmetrizer is kept
implicit.  Contractions (functional derivatives, Gamma, the star product)
expand the antisymmetrizer combinatorially; grades never exceed six, so the
expansions stay tiny.

Conventions, fixed once and verified by the hand-expansion tests:

* evaluation: F(b_1 ^ ... ^ b_k) = w^k <kernel, Antisym(b_1 (x) ... (x) b_k)>
  with w = dt*dx and both kernel and word antisymmetrized by the projector
  (1/k!) sum_pi sign(pi) pi;
* kernels hold dual (pairing-contracted) components, so contractions with a
  two-point function use TwoPoint.contraction_matrix();
* F^(1)(u) contracts the leading kernel slot with u;
* Gamma_K F = sum K(x, y) F^(2)(x, y) contracts the two leading slots;
* the cross operator of the star product carries the sign (-1)^(|F|+1),
  applied componentwise for inhomogeneous functionals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .background import Background, GaugeParameter, Perturbation, d_bar, perturb
from .dirac import GAMMA0, GAMMA1, DiracOperator, DoubleSection
from .states import TwoPoint, part_dim

MAX_GRADE_DEFAULT = 4


class GradeOverflowError(ValueError):
    pass


class LocalityError(ValueError):
    pass


def _perm_parity(perm) -> int:
    """Sign of a permutation given in one-line notation."""
    perm = list(perm)
    seen = [False] * len(perm)
    parity = 0
    for i in range(len(perm)):
        if seen[i]:
            continue
        j = i
        clen = 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            clen += 1
        parity ^= (clen - 1) & 1
    return 1 - 2 * parity


# -- dense kernel blocks -----------------------------------------------------


@dataclass
class DenseK:
    supports: tuple  # tuple of sorted 1d int arrays (flat indices)
    array: np.ndarray

    @property
    def grade(self) -> int:
        return len(self.supports)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.array))) if self.array.size else 0.0

    def contract_vector(self, axis: int, vec: np.ndarray) -> "DenseK":
        sub = vec[self.supports[axis]]
        arr = np.tensordot(self.array, sub, axes=([axis], [0]))
        return DenseK(self.supports[:axis] + self.supports[axis + 1 :], arr)

    def apply_matrix(self, axis: int, mat_cols) -> "DenseK":
        """Transform one slot: f(X) -> sum_X M[Y, X] f(X) for Y in the rows
        returned by mat_cols(support) = (rows, dense block M[rows, support])."""
        rows, block = mat_cols(self.supports[axis])
        arr = np.tensordot(self.array, block.T, axes=([axis], [0]))
        arr = np.moveaxis(arr, -1, axis)
        return DenseK(self.supports[:axis] + (rows,) + self.supports[axis + 1 :], arr)


@dataclass
class Term:
    coef: complex
    factors: tuple

    @property
    def grade(self) -> int:
        return sum(f.grade for f in self.factors)

    def bound(self) -> float:
        b = abs(self.coef)
        for f in self.factors:
            b *= f.max_abs()
        return b


def _slot_map(factors):
    out = []
    for p, f in enumerate(factors):
        out.extend((p, a) for a in range(f.grade))
    return out


# -- bond-network contraction -------------------------------------------------


def _contract_bonds(factors, bonds, kontr):
    """Contract slot pairs (bonds) through the matrix kontr[X, Y].

    factors: list of DenseK; bonds: list of (global_slot_left, global_slot_right);
    the left slot feeds the first index of kontr.  Returns (scalar, final
    factor list, final slot-label list) where labels are the surviving global
    slot numbers in storage order.
    """
    comps = []  # list of [DenseK, labels]
    smap = _slot_map(factors)
    for p, f in enumerate(factors):
        labels = [g for g, (q, _a) in enumerate(smap) if q == p]
        comps.append([f, labels])
    scalar = 1.0 + 0j

    def locate(slot):
        for ci, (f, labels) in enumerate(comps):
            if slot in labels:
                return ci, labels.index(slot)
        raise ValueError("slot not found")

    for left, right in bonds:
        ci, ai = locate(left)
        cj, aj = locate(right)
        if ci == cj:
            f, labels = comps[ci]
            Ksub = kontr[np.ix_(f.supports[ai], f.supports[aj])]
            arr = np.tensordot(f.array, Ksub, axes=([ai, aj], [0, 1]))
            sups = tuple(s for q, s in enumerate(f.supports) if q not in (ai, aj))
            new_labels = [l for q, l in enumerate(labels) if q not in (ai, aj)]
            comps[ci] = [DenseK(sups, arr), new_labels]
        else:
            fi, li = comps[ci]
            fj, lj = comps[cj]
            Ksub = kontr[np.ix_(fi.supports[ai], fj.supports[aj])]
            leftarr = np.tensordot(fi.array, Ksub, axes=([ai], [0]))
            arr = np.tensordot(leftarr, fj.array, axes=([-1], [aj]))
            sups = (
                fi.supports[:ai]
                + fi.supports[ai + 1 :]
                + fj.supports[:aj]
                + fj.supports[aj + 1 :]
            )
            labels = [l for q, l in enumerate(li) if q != ai] + [
                l for q, l in enumerate(lj) if q != aj
            ]
            lo, hi = min(ci, cj), max(ci, cj)
            comps[lo] = [DenseK(sups, arr), labels]
            del comps[hi]
    out_factors = []
    out_labels = []
    for f, labels in comps:
        if f.grade == 0:
            scalar *= complex(f.array)
        else:
            out_factors.append(f)
            out_labels.extend(labels)
    return scalar, out_factors, out_labels


def _layout_sign(actual_labels, desired_labels) -> int:
    if len(actual_labels) != len(desired_labels):
        raise ValueError("label mismatch")
    pos = {l: i for i, l in enumerate(desired_labels)}
    return _perm_parity([pos[l] for l in actual_labels])


# -- the functional -----------------------------------------------------------


class GradedFunctional:
    def __init__(self, bg: Background, max_grade: int = MAX_GRADE_DEFAULT):
        self.bg = bg
        self.max_grade = max_grade
        self.parts: dict = {}  # (grade, hbar) -> complex | list[Term]

    # constructors
    @classmethod
    def c_number(cls, bg, value, hbar: int = 0, max_grade=MAX_GRADE_DEFAULT):
        out = cls(bg, max_grade)
        if value != 0:
            out.parts[(0, hbar)] = complex(value)
        return out

    @classmethod
    def from_dense(cls, bg, kernel: DenseK, hbar: int = 0, max_grade=MAX_GRADE_DEFAULT):
        out = cls(bg, max_grade)
        out.parts[(kernel.grade, hbar)] = [Term(1.0 + 0j, (kernel,))]
        return out

    def copy(self):
        out = GradedFunctional(self.bg, self.max_grade)
        for key, val in self.parts.items():
            out.parts[key] = val if key[0] == 0 else list(val)
        return out

    def _add_term(self, key, term):
        if term.bound() == 0.0:
            return
        self.parts.setdefault(key, [])
        self.parts[key].append(term)

    def _add_scalar(self, key, value):
        if value == 0:
            return
        self.parts[key] = self.parts.get(key, 0.0) + value

    # queries
    def grades(self):
        return sorted({k for (k, _) in self.parts})

    def hbar_orders(self):
        return sorted({p for (_, p) in self.parts})

    def c_number_part(self, hbar: int | None = None) -> complex:
        if hbar is None:
            return complex(sum(v for (k, _), v in self.parts.items() if k == 0))
        return complex(self.parts.get((0, hbar), 0.0))

    def term_bound(self) -> float:
        b = 0.0
        for key, val in self.parts.items():
            if key[0] == 0:
                b = max(b, abs(val))
            else:
                b = max(b, max((t.bound() for t in val), default=0.0))
        return b

    def site_support_mask(self) -> np.ndarray:
        lat = self.bg.lattice
        n = part_dim(self.bg)
        per_site = 2 * self.bg.group.dim_V
        mask = np.zeros(lat.Nt * lat.Nx, dtype=bool)
        for (k, _p), val in self.parts.items():
            if k == 0:
                continue
            for t in val:
                if t.bound() == 0.0:
                    continue
                for f in t.factors:
                    for ax, s in enumerate(f.supports):
                        amp = np.abs(f.array)
                        other = tuple(q for q in range(f.grade) if q != ax)
                        prof = amp.max(axis=other) if other else amp
                        live = s[prof > 0]
                        mask[np.unique((live % n) // per_site)] = True
        return mask.reshape(lat.Nt, lat.Nx)

    def is_local(self, radius: int = 2) -> bool:
        """True when every kernel entry pairs sites within `radius` steps of
        the diagonal (grade-2 single-factor terms; products are non-local)."""
        lat = self.bg.lattice
        n = part_dim(self.bg)
        per_site = 2 * self.bg.group.dim_V
        for (k, _p), val in self.parts.items():
            if k == 0:
                continue
            for t in val:
                if t.bound() == 0.0 or t.grade < 2:
                    continue
                if len(t.factors) > 1:
                    return False
                f = t.factors[0]
                sites = [(s % n) // per_site for s in f.supports]
                nz = np.argwhere(np.abs(f.array) > 1e-14 * f.max_abs())
                for entry in nz:
                    locs = [sites[a][entry[a]] for a in range(f.grade)]
                    ts = [loc // lat.Nx for loc in locs]
                    xs = [loc % lat.Nx for loc in locs]
                    for i in range(len(locs)):
                        for j in range(i + 1, len(locs)):
                            dxp = abs(xs[i] - xs[j])
                            dxp = min(dxp, lat.Nx - dxp)
                            if max(abs(ts[i] - ts[j]), dxp) > radius:
                                return False
        return True

    # arithmetic
    def __add__(self, other):
        out = self.copy()
        for key, val in other.parts.items():
            if key[0] == 0:
                out._add_scalar(key, val)
            else:
                out.parts.setdefault(key, [])
                out.parts[key] = list(out.parts[key]) + list(val)
        return out

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, a):
        out = GradedFunctional(self.bg, self.max_grade)
        for key, val in self.parts.items():
            if key[0] == 0:
                out.parts[key] = val * a
            else:
                out.parts[key] = [Term(t.coef * a, t.factors) for t in val]
        return out

    __rmul__ = __mul__

    def shift_hbar(self, dp: int):
        out = GradedFunctional(self.bg, self.max_grade)
        for (k, p), val in self.parts.items():
            out.parts[(k, p + dp)] = val if k == 0 else list(val)
        return out

    # evaluation
    def evaluate_word(self, word) -> complex:
        return complex(sum(self.evaluate_by_order(word).values()))

    def evaluate_by_order(self, word) -> dict:
        k = len(word)
        w = self.bg.lattice.weight
        out: dict = {}
        for (g, p), val in self.parts.items():
            if g != k:
                continue
            if g == 0:
                out[p] = out.get(p, 0j) + val
            else:
                acc = 0j
                for t in val:
                    acc += t.coef * _eval_term(t, word)
                out[p] = out.get(p, 0j) + acc * w**k
        return out


def _eval_term(t: Term, word) -> complex:
    k = t.grade
    total = 0j
    for perm in itertools.permutations(range(k)):
        sign = _perm_parity(perm)
        prod = 1.0 + 0j
        pos = 0
        dead = False
        for f in t.factors:
            arr = f.array
            for a in range(f.grade):
                arr = np.tensordot(arr, word[perm[pos + a]][f.supports[a]], axes=([0], [0]))
            val = complex(arr)
            if val == 0:
                dead = True
                break
            prod *= val
            pos += f.grade
        if not dead:
            total += sign * prod
    return total / math.factorial(k)


# -- products ------------------------------------------------------------------


def wedge(F: GradedFunctional, G: GradedFunctional, max_grade=None) -> GradedFunctional:
    mg = max_grade if max_grade is not None else max(F.max_grade, G.max_grade)
    out = GradedFunctional(F.bg, mg)
    for (k1, p1), v1 in F.parts.items():
        for (k2, p2), v2 in G.parts.items():
            k, p = k1 + k2, p1 + p2
            if k > mg:
                raise GradeOverflowError(f"wedge grade {k} exceeds cap {mg}")
            if k1 == 0 and k2 == 0:
                out._add_scalar((0, p), v1 * v2)
            elif k1 == 0:
                for t in v2:
                    out._add_term((k, p), Term(v1 * t.coef, t.factors))
            elif k2 == 0:
                for t in v1:
                    out._add_term((k, p), Term(v2 * t.coef, t.factors))
            else:
                for t1 in v1:
                    for t2 in v2:
                        out._add_term((k, p), Term(t1.coef * t2.coef, t1.factors + t2.factors))
    return out


def derivative(F: GradedFunctional, u_flat: np.ndarray) -> GradedFunctional:
    """F^(1)(u): leading-slot contraction, grade drops by one."""
    w = F.bg.lattice.weight
    out = GradedFunctional(F.bg, F.max_grade)
    for (k, p), val in F.parts.items():
        if k == 0:
            continue
        key = (k - 1, p)
        for t in val:
            smap = _slot_map(t.factors)
            for i, (fp, ax) in enumerate(smap):
                sign = 1 - 2 * (i & 1)
                coef = t.coef * sign * w / k
                newf = t.factors[fp].contract_vector(ax, u_flat)
                rest = t.factors[:fp] + ((newf,) if newf.grade else ()) + t.factors[fp + 1 :]
                extra = complex(newf.array) if newf.grade == 0 else 1.0
                if k - 1 == 0:
                    out._add_scalar(key, coef * extra)
                else:
                    out._add_term(key, Term(coef * extra, rest))
    return out


def gamma(F: GradedFunctional, K: TwoPoint | np.ndarray) -> GradedFunctional:
    """Gamma_K F: contract the two leading slots with the two-point kernel;
    grade drops by two and the hbar order rises by one."""
    kontr = K.contraction_matrix() if isinstance(K, TwoPoint) else K
    out = GradedFunctional(F.bg, F.max_grade)
    for (k, p), val in F.parts.items():
        if k < 2:
            continue
        key = (k - 2, p + 1)
        norm = 1.0 / (k * (k - 1))
        for t in val:
            for i in range(k):
                for j in range(k):
                    if i == j:
                        continue
                    rest = [s for s in range(k) if s not in (i, j)]
                    sign = _perm_parity(np.argsort([i, j] + rest))
                    scalar, fac, labels = _contract_bonds(list(t.factors), [(i, j)], kontr)
                    if fac:
                        sign *= _layout_sign(labels, rest)
                        out._add_term(key, Term(t.coef * norm * sign * scalar, tuple(fac)))
                    else:
                        out._add_scalar(key, t.coef * norm * sign * scalar)
    return out


def ordering_transport(F: GradedFunctional, K) -> GradedFunctional:
    """exp(hbar Gamma_K) F; the sum terminates because Gamma lowers the grade."""
    out = F.copy()
    cur = F
    n = 1
    while n <= 8:
        cur = gamma(cur, K)
        if not cur.parts:
            break
        out = out + (1.0 / math.factorial(n)) * cur
        n += 1
    return out


def star(F: GradedFunctional, G: GradedFunctional, omega: TwoPoint, max_grade=None) -> GradedFunctional:
    """F star G = wedge exp(hbar Gamma^x_omega) (F (x) G)."""
    kontr = omega.contraction_matrix()
    mg = max_grade if max_grade is not None else max(F.max_grade, G.max_grade)
    out = GradedFunctional(F.bg, mg)
    for (kF, pF), vF in F.parts.items():
        for (kG, pG), vG in G.parts.items():
            for n in range(0, min(kF, kG) + 1):
                k_out = kF + kG - 2 * n
                if k_out > mg:
                    raise GradeOverflowError(f"star grade {k_out} exceeds cap {mg}")
                pref = 1.0 / math.factorial(n)
                for l in range(n):
                    pref *= (1 - 2 * ((kF - l) & 1)) * (-1.0)  # (-1)^(kF - l + 1)
                    pref /= (kF - l) * (kG - l)
                key = (k_out, pF + pG + n)
                fslots = list(range(kF))
                gslots = list(range(kG))
                for i_tuple in itertools.permutations(fslots, n):
                    rest_f = [s for s in fslots if s not in i_tuple]
                    sign_f = _perm_parity(np.argsort(list(i_tuple) + rest_f))
                    for j_tuple in itertools.permutations(gslots, n):
                        rest_g = [s for s in gslots if s not in j_tuple]
                        sign_g = _perm_parity(np.argsort(list(j_tuple) + rest_g))
                        for tF in vF if kF else [None]:
                            for tG in vG if kG else [None]:
                                _star_accumulate(
                                    out, key, pref * sign_f * sign_g, tF, tG,
                                    vF if kF == 0 else None, vG if kG == 0 else None,
                                    i_tuple, j_tuple, rest_f, rest_g, kF, kontr,
                                )
    return out


def _star_accumulate(out, key, pref, tF, tG, cF, cG, i_tuple, j_tuple, rest_f, rest_g, kF, kontr):
    """Accumulate one (i_tuple, j_tuple) cross-contraction into `out`."""
    coefF = complex(cF) if tF is None else tF.coef
    coefG = complex(cG) if tG is None else tG.coef
    if (tF is None or tG is None) and i_tuple:
        return  # scalars have no slots to contract
    coef = pref * coefF * coefG
    if coef == 0:
        return
    factorsF = tF.factors if tF is not None else ()
    factorsG = tG.factors if tG is not None else ()
    n_f_slots = kF
    factors = list(factorsF) + list(factorsG)
    bonds = [(i, n_f_slots + j) for i, j in zip(i_tuple, j_tuple)]
    desired = rest_f + [n_f_slots + j for j in rest_g]
    if factors:
        scalar, fac, labels = _contract_bonds(factors, bonds, kontr)
        coef *= scalar
        if fac:
            sign = _layout_sign(labels, desired)
            out._add_term(key, Term(coef * sign, tuple(fac)))
        else:
            out._add_scalar(key, coef)
    else:
        out._add_scalar(key, coef)


# -- involution ----------------------------------------------------------------

_STAR_CACHE: dict = {}


def _star_tables(bg: Background):
    key = (bg.lattice.Nt, bg.lattice.Nx, bg.group.dim_V)
    if key in _STAR_CACHE:
        return _STAR_CACHE[key]
    n = part_dim(bg)
    dimV = bg.group.dim_V
    idx = np.arange(2 * n)
    part = idx // n
    local = idx % n
    alpha = (local % (2 * dimV)) // dimV
    perm = (1 - part) * n + local + (1 - 2 * alpha) * dimV
    sgn = np.where(alpha == 0, -1.0, 1.0) * np.where(part == 0, 1.0, -1.0)
    scale = 1j * sgn
    _STAR_CACHE[key] = (perm, scale)
    return perm, scale


def _star_factor(f: DenseK, bg: Background) -> DenseK:
    """Involution image of one factor: slots reversed, indices moved through
    the antilinear star map, entries conjugated."""
    perm, scale = _star_tables(bg)
    g = f.grade
    arr = np.conj(np.transpose(f.array, axes=tuple(reversed(range(g)))))
    sups = tuple(reversed(f.supports))
    new_sups = []
    for a, s in enumerate(sups):
        ns = perm[s]
        new_sups.append(ns)
        vec = np.conj(scale[ns])
        shape = [1] * g
        shape[a] = len(ns)
        arr = arr * vec.reshape(shape)
    return DenseK(tuple(new_sups), arr)


def involution(F: GradedFunctional) -> GradedFunctional:
    """F*(B) = conj(F(B*)): fiberwise conjugation with slot reversal."""
    out = GradedFunctional(F.bg, F.max_grade)
    for (k, p), val in F.parts.items():
        if k == 0:
            out.parts[(0, p)] = np.conj(val)
            continue
        out.parts[(k, p)] = [
            Term(np.conj(t.coef), tuple(_star_factor(f, F.bg) for f in reversed(t.factors)))
            for t in val
        ]
    return out


# -- slot maps (Moller pullback, gauge action) ---------------------------------


def map_slots(F: GradedFunctional, mat_cols) -> GradedFunctional:
    """Apply one linear slot transformation to every kernel slot (used for
    pullback of kernels through Moller maps)."""
    out = GradedFunctional(F.bg, F.max_grade)
    for (k, p), val in F.parts.items():
        if k == 0:
            out.parts[(0, p)] = val
            continue
        terms = []
        for t in val:
            factors = []
            for f in t.factors:
                g = f
                for a in range(f.grade):
                    g = g.apply_matrix(a, mat_cols)
                factors.append(g)
            terms.append(Term(t.coef, tuple(factors)))
        out.parts[(k, p)] = terms
    return out


def derivation_slots(F: GradedFunctional, mat_cols) -> GradedFunctional:
    """Sum of single-slot applications (a derivation, e.g. the Lie action)."""
    out = GradedFunctional(F.bg, F.max_grade)
    for (k, p), val in F.parts.items():
        if k == 0:
            continue
        terms = []
        for t in val:
            for fp, f in enumerate(t.factors):
                for a in range(f.grade):
                    g = f.apply_matrix(a, mat_cols)
                    terms.append(Term(t.coef, t.factors[:fp] + (g,) + t.factors[fp + 1 :]))
        if terms:
            out.parts[(k, p)] = terms
    return out


def _site_of(bg: Background, flat: np.ndarray):
    n = part_dim(bg)
    per_site = 2 * bg.group.dim_V
    local = flat % n
    site = local // per_site
    spin = (local % per_site) // bg.group.dim_V
    gauge = local % bg.group.dim_V
    part = flat // n
    return part, site, spin, gauge


def lie_slot_closure(bg: Background, c: np.ndarray):
    """Kernel-side matrix of the Lie action L(u, v) = (rho(c) u, -rho(c)^T v):
    new(Y) = sum_X f(X) L[X, Y], site- and spinor-diagonal, gauge mixing."""
    cmat = bg.group.rep(c).reshape(-1, bg.group.dim_V, bg.group.dim_V)  # per site
    dimV = bg.group.dim_V

    def mat_cols(supp):
        part, site, spin, gauge = _site_of(bg, supp)
        base = supp - gauge
        rows = np.unique(base[:, None] + np.arange(dimV)[None, :])
        rpart, rsite, rspin, rgauge = _site_of(bg, rows)
        block = np.zeros((len(rows), len(supp)), dtype=complex)
        rpos = {r: i for i, r in enumerate(rows)}
        for xpos, X in enumerate(supp):
            mat = cmat[site[xpos]]
            for aY in range(dimV):
                Y = base[xpos] + aY
                if part[xpos] == 0:
                    val = mat[gauge[xpos], aY]  # right multiplication by rho(c)
                else:
                    val = -mat[aY, gauge[xpos]]  # dual action
                if val != 0:
                    block[rpos[Y], xpos] += val
        return rows, block

    return mat_cols


def gauge_lie(F: GradedFunctional, c: GaugeParameter | np.ndarray) -> GradedFunctional:
    carr = c.c if isinstance(c, GaugeParameter) else c
    return derivation_slots(F, lie_slot_closure(F.bg, carr))


def gauge_lie_one_form(bg: Background, c, A: np.ndarray) -> np.ndarray:
    """Lie action on an E^1-valued test tensor: the adjoint bracket [c, A]."""
    carr = c.c if isinstance(c, GaugeParameter) else c
    return np.stack([bg.group.bracket(carr, A[mu]) for mu in range(2)])


# -- concrete fields -------------------------------------------------------------


def _flat_index(bg: Background, part: int, t: int, x: int, s: int, g: int) -> int:
    lat = bg.lattice
    n = part_dim(bg)
    return part * n + ((t * lat.Nx + (x % lat.Nx)) * 2 + s) * bg.group.dim_V + g


def linear_field(bg: Background, section) -> GradedFunctional:
    """psi(f): the linear functional <<f, B_1>>."""
    flat = section.to_flat() if isinstance(section, DoubleSection) else np.asarray(section)
    from .states import swap_parts

    dual = swap_parts(flat, bg)
    supp = np.nonzero(np.abs(dual) > 0)[0]
    if supp.size == 0:
        return GradedFunctional(bg)
    return GradedFunctional.from_dense(bg, DenseK((supp,), dual[supp]))


class _EntryAccumulator:
    def __init__(self):
        self.entries: dict = {}

    def add(self, row: int, col: int, val: complex):
        if val != 0:
            self.entries[(row, col)] = self.entries.get((row, col), 0.0) + val

    def to_kernel(self, weight: float) -> DenseK | None:
        """Antisymmetrized kernel (M - M^T) / (2 w) over the union support."""
        if not self.entries:
            return None
        keys = self.entries.keys()
        supp = np.unique(np.concatenate([[r for r, _ in keys], [c for _, c in keys]]))
        pos = {int(s): i for i, s in enumerate(supp)}
        arr = np.zeros((len(supp), len(supp)), dtype=complex)
        for (r, c), v in self.entries.items():
            arr[pos[r], pos[c]] += v / (2 * weight)
            arr[pos[c], pos[r]] -= v / (2 * weight)
        return DenseK((supp, supp), arr)


def _gauge_link_entries(bg: Background, acc: _EntryAccumulator, A: np.ndarray, wilson_r: float, f_weight=None):
    """Entries of the (dual x primal) matrix of the link-split gauge insertion."""
    lat, grp = bg.lattice, bg.group
    gam = (GAMMA0, GAMMA1)
    for mu in range(2):
        r_mu = wilson_r if mu == 1 else 0.0
        live = np.argwhere(np.any(np.abs(A[mu]) > 0, axis=-1))
        for t, x in live:
            if mu == 0 and t + 1 >= lat.Nt:
                continue
            Pm = grp.rep(A[mu, t, x])
            t2, x2 = (t + 1, x) if mu == 0 else (t, (x + 1) % lat.Nx)
            cplus = 0.5 * (-gam[mu] - r_mu * np.eye(2))
            cminus = 0.5 * (-gam[mu] + r_mu * np.eye(2))
            w1 = 1.0 if f_weight is None else f_weight[t, x]
            w2 = 1.0 if f_weight is None else f_weight[t2, x2]
            for s in range(2):
                for s2 in range(2):
                    if cplus[s, s2] != 0:
                        for g in range(grp.dim_V):
                            for g2 in range(grp.dim_V):
                                if Pm[g, g2] != 0:
                                    acc.add(
                                        _flat_index(bg, 1, t, x, s, g),
                                        _flat_index(bg, 0, t2, x2, s2, g2),
                                        w1 * cplus[s, s2] * Pm[g, g2],
                                    )
                    if cminus[s, s2] != 0:
                        for g in range(grp.dim_V):
                            for g2 in range(grp.dim_V):
                                if Pm[g, g2] != 0:
                                    acc.add(
                                        _flat_index(bg, 1, t2, x2, s, g),
                                        _flat_index(bg, 0, t, x, s2, g2),
                                        w2 * cminus[s, s2] * Pm[g, g2],
                                    )


def current(bg: Background, A, wilson_r: float = 1.0) -> GradedFunctional:
    """The gauge current j(A): grade-2 local functional pairing the dual and
    primal components through the link-split insertion of A."""
    arr = A.A if isinstance(A, Perturbation) else np.asarray(A)
    acc = _EntryAccumulator()
    _gauge_link_entries(bg, acc, arr, wilson_r)
    ker = acc.to_kernel(bg.lattice.weight)
    if ker is None:
        return GradedFunctional(bg)
    return GradedFunctional.from_dense(bg, ker)


def action(bg: Background, f_weights: np.ndarray, wilson_r: float = 1.0) -> GradedFunctional:
    """Free Dirac action S(f): grade-2 kernel with the full Dirac stencil in
    the second slot; f must vanish on the two boundary slices."""
    lat, grp = bg.lattice, bg.group
    if np.any(np.abs(f_weights[0]) > 0) or np.any(np.abs(f_weights[-1]) > 0):
        raise LocalityError("action weight must vanish on the boundary slices")
    acc = _EntryAccumulator()
    r = wilson_r
    live = np.argwhere(np.abs(f_weights) > 0)
    for t, x in live:
        fw = f_weights[t, x]
        msite = bg.m[t, x] + r / lat.dx
        for s in range(2):
            for g in range(grp.dim_V):
                acc.add(
                    _flat_index(bg, 1, t, x, s, g),
                    _flat_index(bg, 0, t, x, s, g),
                    fw * msite,
                )
        for mu, h in ((0, lat.dt), (1, lat.dx)):
            gam = (GAMMA0, GAMMA1)[mu]
            for sgn in (+1, -1):
                if mu == 0:
                    t2, x2 = t + sgn, x
                    if not (0 <= t2 < lat.Nt):
                        continue
                else:
                    t2, x2 = t, (x + sgn) % lat.Nx
                spin = -sgn * gam / (2 * h)
                if mu == 1:
                    spin = spin - (r / (2 * lat.dx)) * np.eye(2)
                for s in range(2):
                    for s2 in range(2):
                        if spin[s, s2] != 0:
                            for g in range(grp.dim_V):
                                acc.add(
                                    _flat_index(bg, 1, t, x, s, g),
                                    _flat_index(bg, 0, t2, x2, s2, g),
                                    fw * spin[s, s2],
                                )
    _gauge_link_entries(bg, acc, bg.A, wilson_r, f_weight=f_weights)
    ker = acc.to_kernel(lat.weight)
    if ker is None:
        return GradedFunctional(bg)
    return GradedFunctional.from_dense(bg, ker)


def dense_block(F: GradedFunctional, grade: int, hbar: int | None = None):
    """Materialize one grade <= 2 component as a DenseK over union supports."""
    terms = []
    for (k, p), val in F.parts.items():
        if k != grade:
            continue
        if hbar is not None and p != hbar:
            continue
        terms.extend(val)
    if not terms:
        return None
    if grade == 1:
        supp = np.unique(np.concatenate([t.factors[0].supports[0] for t in terms]))
        pos = {int(s): i for i, s in enumerate(supp)}
        arr = np.zeros(len(supp), dtype=complex)
        for t in terms:
            f = t.factors[0]
            for i, X in enumerate(f.supports[0]):
                arr[pos[int(X)]] += t.coef * f.array[i]
        return DenseK((supp,), arr)
    if grade != 2:
        raise ValueError("dense_block only materializes grades 1 and 2")
    sups = []
    for t in terms:
        for f in t.factors:
            sups.extend(f.supports)
    supp = np.unique(np.concatenate(sups))
    pos = {int(s): i for i, s in enumerate(supp)}
    arr = np.zeros((len(supp), len(supp)), dtype=complex)
    for t in terms:
        if len(t.factors) == 1:
            f = t.factors[0]
            ia = np.array([pos[int(X)] for X in f.supports[0]])
            ib = np.array([pos[int(X)] for X in f.supports[1]])
            blk = 0.5 * t.coef * f.array
            np.add.at(arr, np.ix_(ia, ib), blk)
            np.add.at(arr, np.ix_(ib, ia), -blk.T)
        else:
            fa, fb = t.factors
            va = np.zeros(len(supp), dtype=complex)
            vb = np.zeros(len(supp), dtype=complex)
            va[[pos[int(X)] for X in fa.supports[0]]] = fa.array
            vb[[pos[int(X)] for X in fb.supports[0]]] = fb.array
            arr += 0.5 * t.coef * (np.outer(va, vb) - np.outer(vb, va))
    return DenseK((supp, supp), arr)


def action_derivative(
    bg: Background,
    X: Perturbation,
    f_weights: np.ndarray,
    h: float = 1e-4,
    wilson_r: float = 1.0,
    richardson: bool = True,
) -> GradedFunctional:
    """S^(1)(X, f) by central differences of the action over perturb(bg, X, s);
    f must be identically one on the support of X (plus the stencil margin)."""
    supp = X.support
    if not supp.empty:
        for t, x in supp.sites():
            for dt_, dx_ in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
                tt, xx = t + dt_, (x + dx_) % bg.lattice.Nx
                if 0 <= tt < bg.lattice.Nt and abs(f_weights[tt, xx] - 1.0) > 1e-13:
                    raise LocalityError("f must equal one on supp X and its stencil margin")

    def fd(step):
        Sp = action(perturb(bg, X, +step), f_weights, wilson_r)
        Sm = action(perturb(bg, X, -step), f_weights, wilson_r)
        return (1.0 / (2 * step)) * (Sp - Sm)

    if not richardson:
        return fd(h)
    coarse = fd(h)
    fine = fd(h / 2)
    return (4.0 / 3.0) * fine - (1.0 / 3.0) * coarse


def dbar_current(bg: Background, c: GaugeParameter, wilson_r: float = 1.0) -> GradedFunctional:
    """(delta-bar j)(c) = j(d-bar c): the current smeared with a pure-gauge
    one-form; vanishes on shell exactly for the link-matched stencil."""
    return current(bg, d_bar(bg, c), wilson_r)


# -- on-shell testing and norms ---------------------------------------------------


def onshell_zero(F: GradedFunctional, basis, tol: float = 1e-9):
    """Evaluate F on wedge words built from on-shell basis elements; True if
    the largest residual is below tol."""
    flats = [b.to_flat() for b in basis]
    w = F.bg.lattice.weight
    residual = abs(F.c_number_part())
    k1 = dense_block(F, 1)
    if k1 is not None:
        vals = [abs(w * np.dot(k1.array, b[k1.supports[0]])) for b in flats]
        residual = max(residual, max(vals))
    k2 = dense_block(F, 2)
    if k2 is not None:
        B1 = np.stack([b[k2.supports[0]] for b in flats], axis=1)
        B2 = np.stack([b[k2.supports[1]] for b in flats], axis=1)
        E = B1.T @ k2.array @ B2
        M = 0.5 * w**2 * (E - E.T)
        residual = max(residual, float(np.max(np.abs(M))))
    top = max(F.grades(), default=0)
    if top >= 3:
        rng = np.random.default_rng(11)
        idx = rng.choice(len(flats), size=min(len(flats), 8), replace=False)
        for k in range(3, top + 1):
            for comb in itertools.combinations(idx, k):
                word = [flats[i] for i in comb]
                residual = max(residual, abs(F.evaluate_word(word)))
    return residual <= tol, residual


def word_letters(bg: Background, rng: np.random.Generator, count: int, t_margin: int = 2):
    from .states import random_interior_probe

    return [random_interior_probe(bg, rng, t_margin) for _ in range(count)]


def functional_norm(F: GradedFunctional, letters, max_words: int = 24) -> float:
    """Probe norm: |c-number| plus the largest evaluation on wedge words built
    from the given letters."""
    out = abs(F.c_number_part())
    for k in F.grades():
        if k == 0:
            continue
        combos = list(itertools.combinations(range(len(letters)), k))[:max_words]
        for comb in combos:
            word = [letters[i] for i in comb]
            out = max(out, abs(F.evaluate_word(word)))
    return out
