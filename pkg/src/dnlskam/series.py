"""Sparse truncated formal Hamiltonians, Poisson brackets, Lie transforms
and the norm machinery (weighted phase norm, momentum majorant norm,
Lipschitz semi-norms).

A term is keyed by ``(k, i, al, be)`` where ``k`` is the Fourier index
(tuple of length n), ``i`` the action powers (tuple of length n) and
``al``/``be`` are sorted tuples of ``(mode, power)`` pairs for the normal
variables z / zbar.  With an empty site set (n = 0) the same machinery
represents series in the lattice coordinates q, qbar: q plays the role
of z and the x, y parts are absent.

Coefficients are either a python complex (single series) or a
``numpy`` array of shape ``(width,)`` holding one value per parameter
grid point; all operations are elementwise in that axis.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .indices import Component, SiteSet, momentum_vf, sign

TermKey = Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[Tuple[int, int], ...], Tuple[Tuple[int, int], ...]]

PRUNE_DEFAULT = 1e-300


class LieNonConvergent(RuntimeError):
    """Raised when the Lie series keeps growing at the final retained order."""


@dataclass(frozen=True)
class TruncationBudget:
    """Retention limits: weighted degree (2 per action power, 1 per normal
    power), Fourier length |k|_1, and the mode cutoff."""

    degree_max: int
    fourier_max: int
    mode_cutoff: int

    def __post_init__(self):
        if self.degree_max < 1 or self.fourier_max < 0 or self.mode_cutoff < 1:
            raise ValueError("budget entries must be positive")

    def admits(self, key: TermKey) -> bool:
        k, i, al, be = key
        deg = 2 * sum(i) + sum(p for _, p in al) + sum(p for _, p in be)
        if deg > self.degree_max:
            return False
        if sum(abs(c) for c in k) > self.fourier_max:
            return False
        return True


def key_degree(key: TermKey) -> int:
    _, i, al, be = key
    return 2 * sum(i) + sum(p for _, p in al) + sum(p for _, p in be)


def key_momentum(key: TermKey, sites: SiteSet) -> int:
    k, _, al, be = key
    m = 0
    for kb, jb in zip(k, sites.sites):
        m += kb * jb
    for j, p in al:
        m += p * j
    for j, p in be:
        m -= p * j
    return m


def _merge_pairs(a: Tuple[Tuple[int, int], ...], b: Tuple[Tuple[int, int], ...]):
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for j, p in b:
        d[j] = d.get(j, 0) + p
    return tuple(sorted(d.items()))


def _mul_key(k1: TermKey, k2: TermKey) -> TermKey:
    return (
        tuple(x + y for x, y in zip(k1[0], k2[0])),
        tuple(x + y for x, y in zip(k1[1], k2[1])),
        _merge_pairs(k1[2], k2[2]),
        _merge_pairs(k1[3], k2[3]),
    )


def _cmax(c) -> float:
    if isinstance(c, np.ndarray):
        return float(np.max(np.abs(c)))
    return abs(c)


class FormalSeries:
    """Sparse truncated power series over one site set and budget."""

    __slots__ = ("sites", "budget", "width", "terms", "pruned_mass")

    def __init__(self, sites: SiteSet, budget: TruncationBudget, terms=None,
                 width: int = 1, prune: float = PRUNE_DEFAULT):
        self.sites = sites
        self.budget = budget
        self.width = width
        self.terms: Dict[TermKey, object] = {}
        self.pruned_mass = 0.0
        if terms:
            for key, c in terms.items():
                m = _cmax(c)
                if m < prune:
                    self.pruned_mass += m
                    continue
                if not budget.admits(key):
                    continue
                self.terms[key] = c

    # -- constructors -------------------------------------------------
    @classmethod
    def zero(cls, sites, budget, width: int = 1) -> "FormalSeries":
        return cls(sites, budget, None, width)

    @classmethod
    def monomial(cls, sites, budget, key: TermKey, coeff=1.0 + 0j, width: int = 1):
        return cls(sites, budget, {key: coeff}, width)

    def key(self, k=(), i=(), al=(), be=()) -> TermKey:
        n = self.sites.n
        k = tuple(k) if k else (0,) * n
        i = tuple(i) if i else (0,) * n
        return (k, i, tuple(sorted(al)), tuple(sorted(be)))

    def copy(self) -> "FormalSeries":
        out = FormalSeries.zero(self.sites, self.budget, self.width)
        out.terms = dict(self.terms)
        return out

    # -- basic queries ------------------------------------------------
    def __len__(self) -> int:
        return len(self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def coeff(self, key: TermKey):
        return self.terms.get(key, 0j)

    def min_degree(self) -> int:
        return min((key_degree(k) for k in self.terms), default=0)

    def coeff_mass(self) -> float:
        """L1 mass of the (per-point max) coefficients; cheap Lie-order gauge."""
        return float(sum(_cmax(c) for c in self.terms.values()))

    def momentum_conserving(self) -> bool:
        return all(key_momentum(k, self.sites) == 0 for k in self.terms)

    # -- arithmetic ---------------------------------------------------
    def _assert_compat(self, other: "FormalSeries"):
        if self.sites is not other.sites and self.sites != other.sites:
            raise ValueError("series live on different site sets")

    def __add__(self, other: "FormalSeries") -> "FormalSeries":
        self._assert_compat(other)
        out = dict(self.terms)
        for key, c in other.terms.items():
            if key in out:
                out[key] = out[key] + c
            else:
                out[key] = c
        return FormalSeries(self.sites, self.budget, out, max(self.width, other.width))

    def __sub__(self, other: "FormalSeries") -> "FormalSeries":
        return self + other.scale(-1.0)

    def scale(self, factor) -> "FormalSeries":
        if isinstance(factor, np.ndarray):
            w = max(self.width, factor.shape[0])
        else:
            w = self.width
        return FormalSeries(self.sites, self.budget,
                            {k: c * factor for k, c in self.terms.items()}, w)

    def multiply(self, other: "FormalSeries", budget: Optional[TruncationBudget] = None):
        self._assert_compat(other)
        budget = budget or self.budget
        out: Dict[TermKey, object] = {}
        _acc_product(out, self.terms, other.terms, 1.0, budget)
        return FormalSeries(self.sites, budget, out, max(self.width, other.width))

    def conj(self) -> "FormalSeries":
        """Complex conjugate Hamiltonian: c(k,i,al,be) -> conj(c) at (-k,i,be,al)."""
        out = {}
        for (k, i, al, be), c in self.terms.items():
            cc = np.conj(c) if isinstance(c, np.ndarray) else c.conjugate()
            out[(tuple(-x for x in k), i, be, al)] = cc
        return FormalSeries(self.sites, self.budget, out, self.width)

    def x_average(self) -> "FormalSeries":
        out = {key: c for key, c in self.terms.items() if not any(key[0])}
        return FormalSeries(self.sites, self.budget, out, self.width)

    def select(self, pred) -> "FormalSeries":
        out = {key: c for key, c in self.terms.items() if pred(key)}
        return FormalSeries(self.sites, self.budget, out, self.width)

    def at_point(self, g: int) -> "FormalSeries":
        """Single-grid-point view of a width-G series."""
        if self.width == 1:
            return self.copy()
        out = {k: complex(c[g]) if isinstance(c, np.ndarray) else c
               for k, c in self.terms.items()}
        return FormalSeries(self.sites, self.budget, out, 1)

    def broadcast(self, width: int) -> "FormalSeries":
        if self.width == width:
            return self
        if self.width != 1:
            raise ValueError("can only broadcast width-1 series")
        out = {k: (c * np.ones(width) if not isinstance(c, np.ndarray) else c)
               for k, c in self.terms.items()}
        return FormalSeries(self.sites, self.budget, out, width)

    # -- derivatives ----------------------------------------------------
    def diff(self, var: Component) -> "FormalSeries":
        kind, idx = var
        out: Dict[TermKey, object] = {}
        if kind == "x":
            for (k, i, al, be), c in self.terms.items():
                if k[idx]:
                    out[(k, i, al, be)] = c * (1j * k[idx])
        elif kind == "y":
            for (k, i, al, be), c in self.terms.items():
                if i[idx]:
                    ii = list(i)
                    p = ii[idx]
                    ii[idx] = p - 1
                    out[(k, tuple(ii), al, be)] = c * p
        elif kind in ("z", "zbar"):
            slot = 2 if kind == "z" else 3
            for key, c in self.terms.items():
                pairs = key[slot]
                for t, (j, p) in enumerate(pairs):
                    if j == idx:
                        new = pairs[:t] + ((j, p - 1),) + pairs[t + 1:] if p > 1 \
                            else pairs[:t] + pairs[t + 1:]
                        nk = list(key)
                        nk[slot] = new
                        newkey = tuple(nk)
                        if newkey in out:
                            out[newkey] = out[newkey] + c * p
                        else:
                            out[newkey] = c * p
                        break
        else:
            raise ValueError(f"unknown variable kind {kind!r}")
        return FormalSeries(self.sites, self.budget, out, self.width)

    # -- evaluation -----------------------------------------------------
    def evaluate(self, x, y, z: Dict[int, complex], zbar: Dict[int, complex], g: int = 0):
        tot = 0j
        for (k, i, al, be), c in self.terms.items():
            v = c[g] if isinstance(c, np.ndarray) else c
            phase = sum(kb * xb for kb, xb in zip(k, x))
            v = v * np.exp(1j * phase)
            for ib, yb in zip(i, y):
                if ib:
                    v = v * yb ** ib
            for j, p in al:
                v = v * z.get(j, 0j) ** p
            for j, p in be:
                v = v * zbar.get(j, 0j) ** p
            tot += v
        return tot


def _acc_product(out: dict, A: dict, B: dict, factor, budget: TruncationBudget):
    """out += factor * A * B, truncated by the budget."""
    if not A or not B:
        return
    dmax = budget.degree_max
    fmax = budget.fourier_max
    bl = [(k2, key_degree(k2), sum(abs(v) for v in k2[0]), c2)
          for k2, c2 in B.items()]
    for k1, c1 in A.items():
        d1 = key_degree(k1)
        f1 = sum(abs(v) for v in k1[0])
        fc1 = factor * c1
        for k2, d2, f2, c2 in bl:
            if d1 + d2 > dmax:
                continue
            key = _mul_key(k1, k2)
            # |k1 + k2| <= |k1| + |k2|: only re-check when the sum could exceed
            if f1 + f2 > fmax and sum(abs(v) for v in key[0]) > fmax:
                continue
            c = fc1 * c2
            if key in out:
                out[key] = out[key] + c
            else:
                out[key] = c


def _diff_z_all(terms: dict, slot: int) -> Dict[int, dict]:
    """All z (slot=2) or zbar (slot=3) derivatives, grouped by mode."""
    by_mode: Dict[int, dict] = {}
    for key, c in terms.items():
        pairs = key[slot]
        for t, (j, p) in enumerate(pairs):
            new = pairs[:t] + ((j, p - 1),) + pairs[t + 1:] if p > 1 else pairs[:t] + pairs[t + 1:]
            nk = list(key)
            nk[slot] = new
            newkey = tuple(nk)
            d = by_mode.setdefault(j, {})
            if newkey in d:
                d[newkey] = d[newkey] + c * p
            else:
                d[newkey] = c * p
    return by_mode


class BracketParts:
    """Precomputed derivative dictionaries of one bracket argument, so
    repeated brackets against the same generator (Lie series) do not
    re-differentiate it at every order."""

    __slots__ = ("fx", "fy", "fz", "fzb", "width")

    def __init__(self, F: FormalSeries):
        n = F.sites.n
        self.fx = [F.diff(("x", b)).terms for b in range(n)]
        self.fy = [F.diff(("y", b)).terms for b in range(n)]
        self.fz = _diff_z_all(F.terms, 2)
        self.fzb = _diff_z_all(F.terms, 3)
        self.width = F.width


def _bracket_against(H: FormalSeries, parts: BracketParts,
                     budget: TruncationBudget) -> FormalSeries:
    out: Dict[TermKey, object] = {}
    sites = H.sites
    for b, jb in enumerate(sites.sites):
        sb = sign(jb)
        Hx = H.diff(("x", b)).terms
        if Hx and parts.fy[b]:
            _acc_product(out, Hx, parts.fy[b], sb, budget)
        if parts.fx[b]:
            Hy = H.diff(("y", b)).terms
            if Hy:
                _acc_product(out, Hy, parts.fx[b], -sb, budget)
    Hz = _diff_z_all(H.terms, 2)
    Hzb = _diff_z_all(H.terms, 3)
    for j, dH in Hz.items():
        dF = parts.fzb.get(j)
        if dF:
            _acc_product(out, dH, dF, -1j * sign(j), budget)
    for j, dH in Hzb.items():
        dF = parts.fz.get(j)
        if dF:
            _acc_product(out, dH, dF, 1j * sign(j), budget)
    return FormalSeries(sites, budget, out, max(H.width, parts.width))


def poisson_bracket(H: FormalSeries, F: FormalSeries,
                    budget: Optional[TruncationBudget] = None) -> FormalSeries:
    """Poisson bracket {H, F} for the weighted symplectic structure.

    For n >= 1 this is
    ``sum_b sigma_{j_b}(H_x F_y - H_y F_x) - i sum_j sigma_j (H_z F_zbar - H_zbar F_z)``;
    with an empty site set only the second sum survives, which is the
    bracket of the lattice (q, qbar) coordinates.
    """
    H._assert_compat(F)
    budget = budget or H.budget
    return _bracket_against(H, BracketParts(F), budget)


def lie_transform(H: FormalSeries, F: FormalSeries, order_max: Optional[int] = None,
                  budget: Optional[TruncationBudget] = None, rel_tol: float = 1e-16,
                  hard_cap: int = 64, return_info: bool = False):
    """Truncated composition H o Phi_F^1 as the Lie series sum ad_F^m(H)/m!.

    When ``order_max`` is None the series is summed until a new order
    contributes nothing within the budget (guaranteed to happen when F
    has weighted degree > 2) or until the order-m mass falls below
    ``rel_tol`` times the running total.  A configuration whose
    consecutive order mass ratio still exceeds 1 when the cap is hit is
    flagged by raising :class:`LieNonConvergent`.
    """
    budget = budget or H.budget
    total = FormalSeries(H.sites, budget, dict(H.terms), max(H.width, F.width))
    T = H
    fact = 1.0
    prev_mass = H.coeff_mass()
    ratio = 0.0
    orders = 0
    cap = order_max if order_max is not None else hard_cap
    parts = BracketParts(F)
    for m in range(1, cap + 1):
        T = _bracket_against(T, parts, budget)
        fact *= m
        if T.is_zero():
            orders = m - 1
            ratio = 0.0
            break
        total = total + T.scale(1.0 / fact)
        mass = T.coeff_mass() / fact
        ratio = mass / prev_mass if prev_mass > 0 else math.inf
        prev_mass = mass if mass > 0 else prev_mass
        orders = m
        if order_max is None and mass <= rel_tol * max(total.coeff_mass(), 1e-300):
            break
    else:
        orders = cap
    if order_max is None and orders >= cap and ratio > 1.0:
        raise LieNonConvergent(
            f"Lie order mass still growing (ratio {ratio:.3g}) at order {orders}")
    if return_info:
        return total, {"orders": orders, "last_ratio": ratio}
    return total


def taylor_truncate_R(P: FormalSeries) -> Tuple[FormalSeries, FormalSeries]:
    """Split off the 2-jet R of P and its generalized-normal-form part.

    R keeps exactly the terms of weighted degree <= 2 (x-only, linear y,
    linear z/zbar and quadratic z/zbar blocks; there is no pure-y
    quadratic at weighted degree 2).  The normal part collects the
    x-averaged constant, the x-averaged linear-y block and the full
    (x-dependent) diagonal of the z-zbar block.
    """
    rterms = {}
    nterms = {}
    for key, c in P.terms.items():
        if key_degree(key) > 2:
            continue
        rterms[key] = c
        k, i, al, be = key
        if sum(i) == 1 and not al and not be:
            if not any(k):
                nterms[key] = c
        elif sum(i) == 0 and len(al) == 1 and len(be) == 1 \
                and al[0][1] == 1 and be[0][1] == 1 and al[0][0] == be[0][0]:
            nterms[key] = c
        elif sum(i) == 0 and not al and not be and not any(k):
            nterms[key] = c
    R = FormalSeries(P.sites, P.budget, rterms, P.width)
    normal = FormalSeries(P.sites, P.budget, nterms, P.width)
    return R, normal


def check_momentum_conservation(H: FormalSeries) -> bool:
    """True iff every stored monomial has zero momentum (exact integers)."""
    return H.momentum_conserving()


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

@dataclass
class VectorField:
    """Component-indexed family of series, X = sum_v X^(v) d_v."""

    sites: SiteSet
    budget: TruncationBudget
    components: Dict[Component, FormalSeries]
    width: int = 1

    def nonzero(self) -> "VectorField":
        comp = {v: s for v, s in self.components.items() if not s.is_zero()}
        return VectorField(self.sites, self.budget, comp, self.width)

    def scale(self, factor) -> "VectorField":
        return VectorField(self.sites, self.budget,
                           {v: s.scale(factor) for v, s in self.components.items()},
                           self.width)

    def __sub__(self, other: "VectorField") -> "VectorField":
        comp = dict(self.components)
        for v, s in other.components.items():
            comp[v] = (comp[v] - s) if v in comp else s.scale(-1.0)
        return VectorField(self.sites, self.budget, comp, max(self.width, other.width))

    def momentum_conserving(self) -> bool:
        for v, s in self.components.items():
            for key in s.terms:
                if momentum_vf(key[0], dict(key[2]), dict(key[3]), v, self.sites) != 0:
                    return False
        return True


def hamiltonian_vector_field(H: FormalSeries) -> VectorField:
    """X_H = (sigma_b H_y, -sigma_b H_x, -i sigma_j H_zbar, i sigma_j H_z)."""
    comp: Dict[Component, FormalSeries] = {}
    sites = H.sites
    for b, jb in enumerate(sites.sites):
        sb = sign(jb)
        dy = H.diff(("y", b))
        if not dy.is_zero():
            comp[("x", b)] = dy.scale(sb)
        dx = H.diff(("x", b))
        if not dx.is_zero():
            comp[("y", b)] = dx.scale(-sb)
    dz = _diff_z_all(H.terms, 2)
    dzb = _diff_z_all(H.terms, 3)
    for j, terms in dzb.items():
        comp[("z", j)] = FormalSeries(sites, H.budget, terms, H.width).scale(-1j * sign(j))
    for j, terms in dz.items():
        comp[("zbar", j)] = FormalSeries(sites, H.budget, terms, H.width).scale(1j * sign(j))
    return VectorField(sites, H.budget, comp, H.width)


def vf_directional(X: VectorField, Y: VectorField) -> VectorField:
    """dX[Y]: component v gets sum_w (d X^(v) / d w) * Y^(w)."""
    comp: Dict[Component, FormalSeries] = {}
    for v, s in X.components.items():
        acc: Dict[TermKey, object] = {}
        for w, yw in Y.components.items():
            ds = s.diff(w)
            if ds.is_zero() or yw.is_zero():
                continue
            _acc_product(acc, ds.terms, yw.terms, 1.0, X.budget)
        if acc:
            comp[v] = FormalSeries(X.sites, X.budget, acc, max(X.width, Y.width))
    return VectorField(X.sites, X.budget, comp, max(X.width, Y.width))


def vf_commutator(X: VectorField, Y: VectorField) -> VectorField:
    """[X, Y] = dX[Y] - dY[X]."""
    return vf_directional(X, Y) - vf_directional(Y, X)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormWeights:
    """Width/radius/regularity data for the (s, r)-weighted norms.

    ``p_or_q`` is the spatial exponent of the target space; ``domain_p``
    the exponent of the source ball B_r (defaults to ``p_or_q``).
    ``a_exp`` is the fixed exponential mode weight of the sequence
    space, ``a_mom`` the momentum weight.
    """

    s: float
    r: float
    p_or_q: float
    a_exp: float = 0.0
    a_mom: float = 0.0
    domain_p: Optional[float] = None
    domain_s: Optional[float] = None
    domain_r: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.s < 1 and 0 < self.r < 1):
            raise ValueError("require 0 < s, r < 1")
        if self.a_exp < 0 or self.a_mom < 0:
            raise ValueError("mode/momentum weights must be >= 0")

    @property
    def dom_p(self) -> float:
        return self.p_or_q if self.domain_p is None else self.domain_p

    @property
    def dom_s(self) -> float:
        return self.s if self.domain_s is None else self.domain_s

    @property
    def dom_r(self) -> float:
        return self.r if self.domain_r is None else self.domain_r

    def kam_momentum_ok(self, c_j: int) -> bool:
        """Hypothesis-list constraint a_mom <= s / (80 C_J)."""
        return c_j == 0 or self.a_mom <= self.s / (80.0 * c_j)


def _corner_factor(key: TermKey, w: NormWeights) -> float:
    """Per-term sup bound over the source ball D(dom_r) times the
    analyticity weight e^{|k| dom_s}; the output weights may belong to a
    narrower domain (see dom_s/dom_r)."""
    k, i, al, be = key
    f = math.exp(w.dom_s * sum(abs(c) for c in k)) * w.dom_r ** (2 * sum(i))
    pd = w.dom_p
    for j, p in al:
        f *= (w.dom_r * math.exp(-w.a_exp * abs(j)) * abs(j) ** (-pd)) ** p
    for j, p in be:
        f *= (w.dom_r * math.exp(-w.a_exp * abs(j)) * abs(j) ** (-pd)) ** p
    return f


def majorant_norm(X: VectorField, w: NormWeights):
    """Computable upper bound for the momentum majorant norm of a field.

    Each monomial's supremum over D(r) is replaced by its corner bound
    (|y|^i <= r^{2|i|}, |z_j| <= r e^{-a|j|} |j|^{-p}); the weighted sums
    per component are then aggregated with the (s, r)-weighted phase
    norm, using ``p_or_q`` for the output sequence regularity.  The
    result over-estimates the true supremum.
    """
    width = X.width
    sites = X.sites
    x_parts: List[np.ndarray] = []
    y_sum = np.zeros(width)
    z_sq = np.zeros(width)
    zb_sq = np.zeros(width)
    for v, s in X.components.items():
        acc = np.zeros(width)
        for key, c in s.terms.items():
            pi = momentum_vf(key[0], dict(key[2]), dict(key[3]), v, sites)
            fac = math.exp(w.a_mom * abs(pi)) * _corner_factor(key, w)
            acc = acc + np.abs(c) * fac
        kind, idx = v
        if kind == "x":
            x_parts.append(acc)
        elif kind == "y":
            y_sum = y_sum + acc
        elif kind == "z":
            z_sq = z_sq + (math.exp(w.a_exp * abs(idx)) * abs(idx) ** w.p_or_q) ** 2 * acc ** 2
        else:
            zb_sq = zb_sq + (math.exp(w.a_exp * abs(idx)) * abs(idx) ** w.p_or_q) ** 2 * acc ** 2
    total = np.zeros(width)
    if x_parts:
        total = total + np.max(x_parts, axis=0) / w.s
    total = total + y_sum / w.r ** 2
    total = total + np.sqrt(z_sq) / w.r + np.sqrt(zb_sq) / w.r
    return float(total[0]) if width == 1 else total


def weighted_phase_norm(x, y, z: Dict[int, complex], zbar: Dict[int, complex],
                        w: NormWeights, exponent: Optional[float] = None) -> float:
    """(s, r)-weighted norm of a phase-space point with finite support."""
    p = w.p_or_q if exponent is None else exponent
    nx = max((abs(v) for v in x), default=0.0) / w.s
    ny = sum(abs(v) for v in y) / w.r ** 2
    nz = math.sqrt(sum(math.exp(2 * w.a_exp * abs(j)) * abs(j) ** (2 * p) * abs(v) ** 2
                       for j, v in z.items()))
    nzb = math.sqrt(sum(math.exp(2 * w.a_exp * abs(j)) * abs(j) ** (2 * p) * abs(v) ** 2
                        for j, v in zbar.items()))
    return nx + ny + (nz + nzb) / w.r


@dataclass(frozen=True)
class ParameterGrid:
    """Finite parameter sample with declared Lipschitz difference pairs."""

    points: np.ndarray          # (G, n)
    pairs: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        for g, h in self.pairs:
            if g == h or not (0 <= g < len(pts) and 0 <= h < len(pts)):
                raise ValueError("invalid grid pair")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def diameter(self) -> float:
        if self.count < 2:
            return 0.0
        d = 0.0
        p = self.points
        for g in range(self.count):
            d = max(d, float(np.max(np.abs(p - p[g]))))
        return d

    def pair_distance(self, g: int, h: int) -> float:
        return float(np.max(np.abs(self.points[g] - self.points[h])))

    def in_dnls_domain(self, r: float) -> bool:
        """All points inside Xi_r = {xi in R^n_+ : |xi| <= r^{3/2}} (euclidean)."""
        p = self.points
        return bool(np.all(p >= 0) and np.all(np.linalg.norm(p, axis=1) <= r ** 1.5 + 1e-300))

    @classmethod
    def axes_and_diagonal(cls, points) -> "ParameterGrid":
        """Grid from explicit points; pairs = consecutive indices (covers
        axis/diagonal pair construction done by callers)."""
        pts = np.asarray(points, dtype=float)
        pairs = tuple((g, g + 1) for g in range(len(pts) - 1))
        return cls(pts, pairs)


def lipschitz_seminorm(X: VectorField, grid: ParameterGrid, w: NormWeights) -> float:
    """max over declared pairs of majorant(X(xi)-X(zeta)) / |xi-zeta|_inf."""
    if not grid.pairs:
        raise ValueError("need at least one grid pair")
    if X.width != grid.count:
        raise ValueError("field width does not match grid")
    best = 0.0
    for g, h in grid.pairs:
        comp = {}
        for v, s in X.components.items():
            dterms = {}
            for key, c in s.terms.items():
                arr = c if isinstance(c, np.ndarray) else c * np.ones(X.width)
                dterms[key] = complex(arr[g] - arr[h])
            comp[v] = FormalSeries(X.sites, X.budget, dterms, 1)
        dX = VectorField(X.sites, X.budget, comp, 1)
        best = max(best, majorant_norm(dX, w) / grid.pair_distance(g, h))
    return best


def sup_norm_sampled(X: VectorField, w: NormWeights, rng: np.random.Generator,
                     samples: int = 16) -> float:
    """Grid-sampled lower bound of the true sup of ||X(v)||_{s,r,q} on D(s,r)."""
    sites = X.sites
    n = sites.n
    modes = sites.normal_modes
    best = 0.0
    for _ in range(samples):
        x = rng.uniform(0, 2 * math.pi, n) + 1j * rng.uniform(-w.s, w.s, n) * 0.98
        y = rng.normal(size=n) + 1j * rng.normal(size=n) if n else np.zeros(0)
        if n:
            y = y / max(np.sum(np.abs(y)), 1e-30) * (w.r ** 2 * rng.uniform(0, 0.98))
        nm = len(modes)
        zv = rng.normal(size=nm) + 1j * rng.normal(size=nm)
        sc = math.sqrt(sum(math.exp(2 * w.a_exp * abs(j)) * abs(j) ** (2 * w.dom_p) * abs(v) ** 2
                           for j, v in zip(modes, zv)))
        zv = zv / max(sc, 1e-30) * (w.r * rng.uniform(0, 0.98))
        zbv = rng.normal(size=nm) + 1j * rng.normal(size=nm)
        sc = math.sqrt(sum(math.exp(2 * w.a_exp * abs(j)) * abs(j) ** (2 * w.dom_p) * abs(v) ** 2
                           for j, v in zip(modes, zbv)))
        zbv = zbv / max(sc, 1e-30) * (w.r * rng.uniform(0, 0.98))
        z = dict(zip(modes, zv))
        zbar = dict(zip(modes, zbv))
        vals_x = []
        vals_y = []
        val_z = {}
        val_zb = {}
        for v, s in X.components.items():
            value = s.evaluate(x, y, z, zbar)
            kind, idx = v
            if kind == "x":
                vals_x.append(value)
            elif kind == "y":
                vals_y.append(value)
            elif kind == "z":
                val_z[idx] = value
            else:
                val_zb[idx] = value
        best = max(best, weighted_phase_norm(vals_x, vals_y, val_z, val_zb, w))
    return best


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt_pairs(pairs) -> str:
    return ",".join(f"{j}:{p}" for j, p in pairs) if pairs else "."


def _parse_pairs(tok: str):
    if tok == ".":
        return ()
    return tuple(sorted((int(a), int(b)) for a, b in
                        (item.split(":") for item in tok.split(","))))


def _fmt_ints(v) -> str:
    return ",".join(str(c) for c in v) if v else "."


def _parse_ints(tok: str):
    if tok == ".":
        return ()
    return tuple(int(c) for c in tok.split(","))


def series_to_text(s: FormalSeries) -> str:
    """Line-oriented dump: 'k | i | alpha | beta | re im [re im ...]'."""
    lines = [
        "#dnlskam-series v1",
        f"#sites {_fmt_ints(s.sites.sites)} cutoff {s.sites.mode_cutoff}",
        f"#budget {s.budget.degree_max} {s.budget.fourier_max}",
        f"#width {s.width}",
    ]
    for key in sorted(s.terms):
        k, i, al, be = key
        c = s.terms[key]
        arr = c if isinstance(c, np.ndarray) else np.array([c])
        nums = " ".join(f"{v.real:.17g} {v.imag:.17g}" for v in arr)
        lines.append(f"{_fmt_ints(k)} | {_fmt_ints(i)} | {_fmt_pairs(al)} | {_fmt_pairs(be)} | {nums}")
    return "\n".join(lines) + "\n"


def series_from_text(text: str) -> FormalSeries:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "#dnlskam-series v1":
        raise ValueError("not a dnlskam series dump")
    toks = lines[1].split()
    sites = SiteSet(_parse_ints(toks[1]), int(toks[3]))
    _, dmax, fmax = lines[2].split()
    budget = TruncationBudget(int(dmax), int(fmax), sites.mode_cutoff)
    width = int(lines[3].split()[1])
    terms = {}
    for ln in lines[4:]:
        kf, inf_, alf, bef, nums = [t.strip() for t in ln.split("|")]
        vals = [float(v) for v in nums.split()]
        arr = np.array([complex(vals[2 * t], vals[2 * t + 1]) for t in range(len(vals) // 2)])
        key = (_parse_ints(kf), _parse_ints(inf_), _parse_pairs(alf), _parse_pairs(bef))
        terms[key] = arr if width > 1 else complex(arr[0])
    return FormalSeries(sites, budget, terms, width)


_MAGIC = b"DKFS"


def series_to_binary(s: FormalSeries) -> bytes:
    out = [_MAGIC, struct.pack("<IIiii", 1, s.width, s.sites.n,
                               s.sites.mode_cutoff, len(s.terms))]
    out.append(struct.pack(f"<{s.sites.n}i", *s.sites.sites))
    out.append(struct.pack("<ii", s.budget.degree_max, s.budget.fourier_max))
    for key in sorted(s.terms):
        k, i, al, be = key
        c = s.terms[key]
        arr = c if isinstance(c, np.ndarray) else np.array([c])
        out.append(struct.pack("<ii", len(al), len(be)))
        out.append(struct.pack(f"<{len(k)}i", *k) if k else b"")
        out.append(struct.pack(f"<{len(i)}i", *i) if i else b"")
        for j, p in al:
            out.append(struct.pack("<ii", j, p))
        for j, p in be:
            out.append(struct.pack("<ii", j, p))
        out.append(np.asarray(arr, dtype=np.complex128).tobytes())
    return b"".join(out)


def series_from_binary(data: bytes) -> FormalSeries:
    if data[:4] != _MAGIC:
        raise ValueError("bad magic")
    ver, width, n, cutoff, nterms = struct.unpack_from("<IIiii", data, 4)
    if ver != 1:
        raise ValueError(f"unsupported version {ver}")
    off = 4 + 20
    sites_t = struct.unpack_from(f"<{n}i", data, off)
    off += 4 * n
    dmax, fmax = struct.unpack_from("<ii", data, off)
    off += 8
    sites = SiteSet(sites_t, cutoff)
    budget = TruncationBudget(dmax, fmax, cutoff)
    terms = {}
    for _ in range(nterms):
        nal, nbe = struct.unpack_from("<ii", data, off)
        off += 8
        k = struct.unpack_from(f"<{n}i", data, off) if n else ()
        off += 4 * n
        i = struct.unpack_from(f"<{n}i", data, off) if n else ()
        off += 4 * n
        al = []
        for _ in range(nal):
            al.append(struct.unpack_from("<ii", data, off))
            off += 8
        be = []
        for _ in range(nbe):
            be.append(struct.unpack_from("<ii", data, off))
            off += 8
        arr = np.frombuffer(data, dtype=np.complex128, count=width, offset=off).copy()
        off += 16 * width
        terms[(tuple(k), tuple(i), tuple(al), tuple(be))] = arr if width > 1 else complex(arr[0])
    return FormalSeries(sites, budget, terms, width)
