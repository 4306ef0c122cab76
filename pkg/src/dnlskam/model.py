"""The derivative NLS Hamiltonian in Fourier coordinates, its partial
normal form of order four, and the reduction to action-angle variables
with explicit affine frequency maps.

The lattice Hamiltonian is built in (q, qbar) coordinates on the empty
site set; after the quartic normal-form step the tangential sites are
turned into angle/action pairs and the parameters xi enter through the
amplitude-frequency modulation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .indices import ADMISSIBLE, SiteSet, admissible, sign
from .series import (FormalSeries, ParameterGrid, TruncationBudget, key_degree,
                     lie_transform, poisson_bracket)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class DnlsConfig:
    """Model parameters for the lattice Hamiltonian.

    ``quintic`` holds finitely many coefficients (x_index, u_power,
    ubar_power, coeff) of the higher-order polynomial part; entries are
    symmetrized with their conjugates so the Hamiltonian stays real.
    ``delta_split_n`` is the band half-width N of the removable quartic
    index set; it defaults to max_b |j_b| at normal-form time.
    """

    mode_cutoff: int
    mu: float = 1.0
    quintic: Tuple[Tuple[int, int, int, complex], ...] = ()
    delta_split_n: Optional[int] = None
    degree_max: int = 4
    y_expansion_order: int = 3

    def __post_init__(self):
        if self.mode_cutoff < 1:
            raise ValueError("mode_cutoff must be positive")
        if self.mu == 0:
            raise ValueError("mu must be nonzero")
        for nu, a, b, _ in self.quintic:
            if a + b < 5:
                raise ValueError("higher-order entries need u-power + ubar-power >= 5")
            if a < 0 or b < 0:
                raise ValueError("powers must be nonnegative")
        if self.y_expansion_order < 1:
            raise ValueError("y_expansion_order must be >= 1")


@dataclass
class HamiltonianSplit:
    """Labelled pieces of H = Lambda + B + Q1 + Q2 + K on the q-lattice."""

    sites: SiteSet            # empty site set, all modes normal
    budget: TruncationBudget
    lam: FormalSeries
    b_part: FormalSeries
    q1: FormalSeries
    q2: FormalSeries
    k_part: FormalSeries
    delta_split_n: int

    @property
    def quartic(self) -> FormalSeries:
        return self.b_part + self.q1 + self.q2

    @property
    def total(self) -> FormalSeries:
        return self.lam + self.b_part + self.q1 + self.q2 + self.k_part


def _gamma(j: int) -> float:
    return math.sqrt(abs(j))


def build_dnls_hamiltonian(cfg: DnlsConfig) -> HamiltonianSplit:
    """Assemble H = Lambda + G + K in (q, qbar) coordinates and split G
    into its integrable part B and the removable/remainder parts Q1, Q2.

    G is the full symmetrized quartic sum over j - k + l - m = 0 with
    coefficient gamma_j gamma_k gamma_l gamma_m / (4 pi); monomial
    multiplicities come out of the accumulation over ordered quadruples.
    """
    sites = SiteSet((), cfg.mode_cutoff)
    budget = TruncationBudget(max(cfg.degree_max, 2), 0, cfg.mode_cutoff)
    modes = sites.normal_modes

    lam_terms = {}
    for j in modes:
        lam_terms[((), (), ((j, 1),), ((j, 1),))] = complex(sign(j) * j * j)
    lam = FormalSeries(sites, budget, lam_terms)

    # quartic sum over ordered quadruples with m = j - k + l
    g_terms: Dict[tuple, complex] = {}
    pref = cfg.mu / (4.0 * math.pi)
    mode_set = set(modes)
    if cfg.degree_max >= 4:
        for j in modes:
            for k in modes:
                for l in modes:
                    m = j - k + l
                    if m == 0 or m not in mode_set:
                        continue
                    coeff = pref * _gamma(j) * _gamma(k) * _gamma(l) * _gamma(m)
                    al = _merge_two(j, l)
                    be = _merge_two(k, m)
                    key = ((), (), al, be)
                    g_terms[key] = g_terms.get(key, 0j) + coeff

    b_terms, q1_terms, q2_terms = {}, {}, {}
    n_split = cfg.delta_split_n if cfg.delta_split_n is not None else cfg.mode_cutoff
    for key, c in g_terms.items():
        al, be = key[2], key[3]
        if al == be:
            b_terms[key] = c
            continue
        small = sum(p for j, p in al if abs(j) <= n_split) + \
            sum(p for j, p in be if abs(j) <= n_split)
        if small >= 2:
            q1_terms[key] = c
        else:
            q2_terms[key] = c

    k_terms: Dict[tuple, complex] = {}
    for nu, a, b, coeff in _symmetrized_quintic(cfg.quintic):
        if a + b > cfg.degree_max:
            continue
        norm = (TWO_PI) ** (1.0 - 0.5 * (a + b))
        for us in product(modes, repeat=a):
            gu = math.prod(_gamma(j) for j in us)
            su = sum(us)
            for vs in product(modes, repeat=b - 1) if b else [()]:
                if b:
                    last = nu + su - sum(vs)
                    if last == 0 or last not in mode_set:
                        continue
                    full_vs = vs + (last,)
                else:
                    if nu + su != 0:
                        continue
                    full_vs = ()
                gv = math.prod(_gamma(j) for j in full_vs)
                al = tuple(sorted(_count(us).items()))
                be = tuple(sorted(_count(full_vs).items()))
                key = ((), (), al, be)
                k_terms[key] = k_terms.get(key, 0j) + coeff * gu * gv * norm
    k_part = FormalSeries(sites, budget, k_terms)

    return HamiltonianSplit(
        sites, budget, lam,
        FormalSeries(sites, budget, b_terms),
        FormalSeries(sites, budget, q1_terms),
        FormalSeries(sites, budget, q2_terms),
        k_part, n_split,
    )


def _merge_two(a: int, b: int):
    if a == b:
        return ((a, 2),)
    return tuple(sorted(((a, 1), (b, 1))))


def _count(idx: Sequence[int]) -> Dict[int, int]:
    d: Dict[int, int] = {}
    for j in idx:
        d[j] = d.get(j, 0) + 1
    return d


def _symmetrized_quintic(entries):
    """Entries plus their conjugates, halved, so that F_{>=5} is real."""
    out = []
    for nu, a, b, coeff in entries:
        c = complex(coeff)
        out.append((nu, a, b, 0.5 * c))
        out.append((-nu, b, a, 0.5 * c.conjugate()))
    return out


@dataclass
class BirkhoffReport:
    zero_divisor_terms: List[tuple]
    lie_orders: int
    q1_residual_rel: float
    removed_terms: int


def birkhoff_divisor(lam: FormalSeries, key) -> float:
    """Divisor of one quartic monomial, computed by bracketing with the
    diagonal part: {Lambda, m} = -i d m.  Never evaluated from a
    hand-coded sign formula."""
    mono = FormalSeries.monomial(lam.sites, lam.budget, key, 1.0 + 0j)
    br = poisson_bracket(lam, mono)
    c = br.coeff(key)
    return float((1j * c).real)


def partial_birkhoff(split: HamiltonianSplit,
                     budget: Optional[TruncationBudget] = None,
                     order_max: Optional[int] = None):
    """Remove Q1 at order four: find F with {Lambda, F} + Q1 = 0 on the
    retained monomials and push H through the time-1 flow of X_F.

    Returns (F, transformed H, report).  Monomials whose divisor
    vanishes (impossible for the zero-momentum quartic, but guarded for
    user-supplied data) are left untouched and flagged.
    """
    budget = budget or split.budget
    f_terms = {}
    zero_div = []
    for key, c in split.q1.terms.items():
        d = birkhoff_divisor(split.lam, key)
        if d == 0.0:
            zero_div.append(key)
            continue
        f_terms[key] = c / (1j * d)
    f4 = FormalSeries(split.sites, budget, f_terms)

    total = FormalSeries(split.sites, budget, dict(split.total.terms))
    if f4.is_zero():
        h_nf, info = total, {"orders": 0, "last_ratio": 0.0}
    else:
        h_nf, info = lie_transform(total, f4, order_max=order_max,
                                   budget=budget, return_info=True)

    scale = max((abs(c) for c in split.q1.terms.values()), default=1.0)
    resid = 0.0
    n_split = split.delta_split_n
    for key, c in h_nf.terms.items():
        if key_degree(key) != 4 or key in zero_div:
            continue
        al, be = key[2], key[3]
        if al == be:
            continue
        small = sum(p for j, p in al if abs(j) <= n_split) + \
            sum(p for j, p in be if abs(j) <= n_split)
        if small >= 2:
            resid = max(resid, abs(c) / scale)
    report = BirkhoffReport(zero_div, info["orders"], resid, len(f_terms))
    return f4, h_nf, report


# ---------------------------------------------------------------------------
# frequency maps and action-angle reduction
# ---------------------------------------------------------------------------

@dataclass
class FrequencyData:
    """Affine frequency maps with per-step tabulated corrections.

    ``omega`` has shape (G, n), ``omega_bar`` shape (G, M) over the
    retained normal modes; the x-dependent corrections (zero at step 0)
    are stored separately by the iteration driver.
    """

    sites: SiteSet
    grid: ParameterGrid
    omega: np.ndarray
    omega_bar: np.ndarray
    c_values: np.ndarray
    jac: np.ndarray
    jac_inv: np.ndarray

    def mode_col(self, j: int) -> int:
        return self.sites.mode_index(j)

    def copy(self) -> "FrequencyData":
        return FrequencyData(self.sites, self.grid, self.omega.copy(),
                             self.omega_bar.copy(), self.c_values.copy(),
                             self.jac, self.jac_inv)


def xi_zeta_matrices(sites: SiteSet) -> Tuple[np.ndarray, np.ndarray]:
    """d xi / d zeta and its displayed closed-form inverse."""
    n = sites.n
    absj = np.array([abs(j) for j in sites.sites], dtype=float)
    c = np.ones((n, n)) - 0.5 * np.eye(n)
    jac = (c * absj[None, :]) / math.pi
    d = np.ones((n, n)) + (1.5 - n - 1.0) * np.eye(n)
    jac_inv = (4.0 * math.pi / (2 * n - 1)) * (np.diag(1.0 / absj) @ d)
    return jac, jac_inv


def frequency_maps(sites: SiteSet, grid: ParameterGrid,
                   bypass_admissibility: bool = False) -> FrequencyData:
    """Affine tangential/normal frequencies over the parameter grid:
    omega_b = j_b^2 + j_b xi_b and Omega_j = j^2 + c j with
    c = 2 sum(xi) / (2n - 1)."""
    if not bypass_admissibility and admissible(sites) != ADMISSIBLE:
        raise ValueError(f"site set {sites.sites} is not admissible "
                         "(pass bypass_admissibility=True to study it anyway)")
    xi = grid.points
    jb = np.array(sites.sites, dtype=float)
    omega = jb[None, :] ** 2 + jb[None, :] * xi
    cvals = 2.0 * xi.sum(axis=1) / (2 * sites.n - 1)
    modes = np.array(sites.normal_modes, dtype=float)
    omega_bar = modes[None, :] ** 2 + cvals[:, None] * modes[None, :]
    jac, jac_inv = xi_zeta_matrices(sites)
    return FrequencyData(sites, grid, omega, omega_bar, cvals, jac, jac_inv)


def zeta_from_xi(sites: SiteSet, xi: np.ndarray) -> np.ndarray:
    _, jac_inv = xi_zeta_matrices(sites)
    return xi @ jac_inv.T


def xi_from_zeta(sites: SiteSet, zeta: np.ndarray) -> np.ndarray:
    jac, _ = xi_zeta_matrices(sites)
    return zeta @ jac.T


@dataclass
class ReducedHamiltonian:
    """Output of the action-angle reduction: H = N + P over the grid."""

    sites: SiteSet
    budget: TruncationBudget
    grid: ParameterGrid
    freq: FrequencyData
    p_series: FormalSeries          # width = grid count
    n_series: FormalSeries          # affine normal form as a series
    constant: np.ndarray
    binomial_tail_bound: np.ndarray
    extraction_error: float         # max |series-extracted - affine| frequency gap


def _binom(h: float, t: int) -> float:
    out = 1.0
    for u in range(t):
        out *= (h - u) / (u + 1)
    return out


def action_angle_reduce(h_q: FormalSeries, sites: SiteSet, grid: ParameterGrid,
                        budget: TruncationBudget, y_order: int = 3,
                        r_radius: float = 0.0,
                        bypass_admissibility: bool = False) -> ReducedHamiltonian:
    """Substitute q_{j_b} = sqrt(zeta_b + y_b) e^{i x_b} on the tangential
    sites and q_j = z_j on the normal ones, tabulated over the grid.

    Odd half-powers of (zeta_b + y_b) are expanded as a binomial series
    in y_b / zeta_b through order ``y_order``; the discarded tail is
    bounded and reported per grid point.  The affine normal form N is
    subtracted, so P carries everything else (including any residual
    k = 0 linear/diagonal terms of higher-order origin).
    """
    freq = frequency_maps(sites, grid, bypass_admissibility)
    n = sites.n
    G = grid.count
    zeta = zeta_from_xi(sites, grid.points)   # (G, n)
    if np.any(zeta <= 0):
        raise ValueError("grid point with zeta_b <= 0: expansion undefined")
    if r_radius and np.any(zeta.min(axis=1) <= r_radius ** 2):
        raise ValueError("y-radius r^2 >= min_b zeta_b: expansion leaves its domain")

    site_pos = {j: b for b, j in enumerate(sites.sites)}
    out_terms: Dict[tuple, np.ndarray] = {}
    tail = np.zeros(G)
    u_bound = (r_radius ** 2 / zeta.min(axis=1)) if r_radius else np.zeros(G)

    for (k0, i0, al, be), c in h_q.terms.items():
        # split tangential/normal exponents
        tang_a = {}
        tang_b = {}
        normal_al = []
        normal_be = []
        for j, p in al:
            if j in site_pos:
                tang_a[site_pos[j]] = p
            else:
                normal_al.append((j, p))
        for j, p in be:
            if j in site_pos:
                tang_b[site_pos[j]] = p
            else:
                normal_be.append((j, p))
        normal_deg = sum(p for _, p in normal_al) + sum(p for _, p in normal_be)
        k_vec = tuple(tang_a.get(b, 0) - tang_b.get(b, 0) for b in range(n))
        cvec = c * np.ones(G) if not isinstance(c, np.ndarray) else c.astype(complex)

        # per-site factors (zeta_b + y_b)^{h_b}
        factors: List[List[Tuple[int, np.ndarray]]] = []
        for b in range(n):
            tot = tang_a.get(b, 0) + tang_b.get(b, 0)
            if tot == 0:
                factors.append([(0, np.ones(G))])
                continue
            h = 0.5 * tot
            opts: List[Tuple[int, np.ndarray]] = []
            if tot % 2 == 0:
                hh = tot // 2
                for t in range(hh + 1):
                    opts.append((t, _binom(float(hh), t) * zeta[:, b] ** (hh - t)))
            else:
                for t in range(y_order + 1):
                    opts.append((t, _binom(h, t) * zeta[:, b] ** (h - t)))
                tail = tail + np.abs(cvec) * abs(_binom(h, y_order + 1)) * \
                    zeta[:, b] ** h * u_bound ** (y_order + 1)
            factors.append(opts)

        base_al = tuple(sorted(normal_al))
        base_be = tuple(sorted(normal_be))
        for combo in product(*factors):
            i_vec = tuple(t for t, _ in combo)
            deg = 2 * sum(i_vec) + normal_deg
            if deg > budget.degree_max:
                continue
            coeff = cvec.copy()
            for _, fac in combo:
                coeff = coeff * fac
            key = (k_vec, i_vec, base_al, base_be)
            if not budget.admits(key):
                continue
            if key in out_terms:
                out_terms[key] = out_terms[key] + coeff
            else:
                out_terms[key] = coeff

    h_aa = FormalSeries(sites, budget, out_terms, width=G)

    # affine normal form as a series
    n_terms: Dict[tuple, np.ndarray] = {}
    zero_k = (0,) * n
    for b, jb in enumerate(sites.sites):
        i_vec = tuple(1 if t == b else 0 for t in range(n))
        n_terms[(zero_k, i_vec, (), ())] = sign(jb) * freq.omega[:, b].astype(complex)
    for col, j in enumerate(sites.normal_modes):
        key = (zero_k, (0,) * n, ((j, 1),), ((j, 1),))
        n_terms[key] = sign(j) * freq.omega_bar[:, col].astype(complex)
    n_series = FormalSeries(sites, budget, n_terms, width=G)

    const_key = (zero_k, (0,) * n, (), ())
    cterm = h_aa.terms.get(const_key, np.zeros(G, dtype=complex))
    constant = np.asarray(cterm) + np.zeros(G, dtype=complex)

    # The normal form is split off by exact coefficient extraction: the
    # affine-map values agree with the extracted ones only to float
    # rounding, and blindly subtracting the formulas would leave a
    # ~1e-16-relative 2-jet residue for the iteration to "solve".  A
    # residual beyond that rounding level (higher-order normal-form
    # shifts, e.g. from the optional quintic) is genuine and stays in P.
    p_series = h_aa
    p_series.terms.pop(const_key, None)
    err = 0.0
    noise_rel = 1e-12
    keys = [((zero_k, tuple(1 if t == b else 0 for t in range(n)), (), ()))
            for b in range(n)]
    keys += [(zero_k, (0,) * n, ((j, 1),), ((j, 1),)) for j in sites.normal_modes]
    for key in keys:
        c = p_series.terms.pop(key, None)
        if c is None:
            continue
        aff = np.asarray(n_series.coeff(key))
        resid = np.asarray(c) - aff
        gap = _cabs_max(resid)
        err = max(err, gap)
        scale = max(_cabs_max(aff), _cabs_max(np.asarray(c)), 1e-300)
        if gap > noise_rel * scale:
            p_series.terms[key] = resid

    return ReducedHamiltonian(sites, budget, grid, freq, p_series, n_series,
                              constant, tail, err)


def _cabs_max(c) -> float:
    if isinstance(c, np.ndarray):
        return float(np.max(np.abs(c)))
    return abs(c)
