"""The quadratic iteration: parameter schedule, one step of the scheme
(2-jet extraction, homological solve, normal-form update, new
perturbation), the driver, and contraction diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from .homological import (DispatchResult, FourierFunction, dispatch_and_solve_all)
from .indices import SiteSet, sign
from .model import FrequencyData, ReducedHamiltonian
from .nonres import ExclusionLedger, ResonanceZone, _l_family_arrays, _k_ball
from .series import (FormalSeries, NormWeights, ParameterGrid, TruncationBudget,
                     hamiltonian_vector_field, key_degree, lie_transform,
                     majorant_norm, poisson_bracket, taylor_truncate_R)


class ContractionFailure(RuntimeError):
    """Measured new perturbation exceeded the schedule bound."""

    def __init__(self, msg, reports=None):
        super().__init__(msg)
        self.reports = reports or []


class AllExcluded(RuntimeError):
    """Every parameter grid point has been removed."""


@dataclass(frozen=True)
class ScheduleGlobals:
    """Step-independent iteration constants."""

    n: int
    c_j: int
    tau: float
    beta: Fraction
    s0: float
    r0: float
    alpha0: float
    eps0: float
    gamma0: float
    bsigma_c: float = 1.0
    m0: float = 0.5
    e0: float = 1.0
    m1_0: float = 1.0
    m2_0: float = 1.0
    m3_0: float = 1.0

    @property
    def beta_prime(self) -> Fraction:
        return Fraction(1, 2) * min(self.beta / (1 + self.beta), Fraction(1, 4))

    @property
    def kappa(self) -> Fraction:
        return Fraction(4, 3) - self.beta_prime / 3

    @property
    def m_total(self) -> float:
        return self.m1_0 + self.m2_0


@dataclass
class ScheduleRow:
    nu: int
    m: float
    e: float
    m1: float
    m2: float
    m3: float
    j_bound: float
    s: float
    sigma: float
    a_mom: float
    b_const: float
    eps: float
    k_trunc: float
    pi_trunc: float
    alpha1: float
    alpha2: float
    lam: float
    eta: float
    r: float

    @property
    def m_total(self) -> float:
        return self.m1 + self.m2


class KamSchedule:
    """Memoized per-step parameter rows, exactly the app's set-up list:
    s_nu = s0 2^-nu, sigma_nu = s_nu/20, a_nu = sigma_nu/C_J,
    K_nu = 5|ln eps_nu|/(4 sigma_nu), Pi_nu = 5|ln eps_nu|/(2 a_nu),
    alpha_{1,nu} = alpha0 (9+2^-nu)/10, alpha_{2,nu} = alpha0 2^-nu / Pi_nu,
    (2 eta_nu)^3 = eps_nu^{1-beta'} B_nu / alpha_{2,nu},
    eps_{nu+1} = (B_nu/alpha_{2,nu})^{1/3} eps_nu^kappa.
    """

    def __init__(self, g: ScheduleGlobals):
        if not (0 < g.eps0 < 1):
            raise ValueError("eps0 must lie in (0, 1): the schedule takes logs")
        self.globals = g
        self._rows: List[ScheduleRow] = []

    def row(self, nu: int) -> ScheduleRow:
        while len(self._rows) <= nu:
            self._rows.append(self._build(len(self._rows)))
        return self._rows[nu]

    def _build(self, nu: int) -> ScheduleRow:
        g = self.globals
        two = 2.0 ** (-nu)
        kappa = float(g.kappa)
        bprime = float(g.beta_prime)
        if nu == 0:
            eps = g.eps0
            r = g.r0
        else:
            prev = self.row(nu - 1)
            eps = (prev.b_const / prev.alpha2) ** (1.0 / 3.0) * prev.eps ** kappa
            # eta >= 1 only occurs outside the smallness regime; the
            # nested domains never grow, so the radius factor caps at 1
            r = min(prev.eta, 1.0) * prev.r
        if eps >= 1.0:
            raise ValueError(f"schedule eps_{nu} >= 1; iteration undefined")
        s = g.s0 * two
        sigma = s / 20.0
        a_mom = sigma / g.c_j if g.c_j else sigma
        b_const = 24.0 * g.bsigma_c * sigma ** (-(4 * g.n + 4 * g.tau + 5))
        lneps = abs(math.log(eps))
        k_trunc = 5.0 * lneps / (4.0 * sigma)
        pi_trunc = 5.0 * lneps / (2.0 * a_mom)
        alpha1 = g.alpha0 * (9.0 + two) / 10.0
        alpha2 = g.alpha0 * two / pi_trunc
        m = g.m0 * (9.0 + two) / 10.0
        e = g.e0 * (10.0 - two) / 9.0
        m1 = g.m1_0 * (10.0 - two) / 9.0
        m2 = g.m2_0 * (10.0 - two) / 9.0
        m3 = g.m3_0 * (9.0 + two) / 10.0
        j_bound = 0.0 if nu == 0 else g.gamma0 ** (-(kappa ** (nu - 1)) / (g.tau + 1))
        lam = g.alpha0 / (g.m1_0 + g.m2_0) if nu == 0 else alpha2 / (m1 + m2)
        eta = 0.5 * (eps ** (1.0 - bprime) * b_const / alpha2) ** (1.0 / 3.0)
        return ScheduleRow(nu, m, e, m1, m2, m3, j_bound, s, sigma, a_mom,
                           b_const, eps, k_trunc, pi_trunc, alpha1, alpha2,
                           lam, eta, r)

    def smallness_gate(self, terms: int = 80) -> dict:
        """Evaluate (reported, never asserted) the iteration smallness
        condition eps0 <= (alpha0 gamma0 / 80)^{1/(1-2 beta')}
        * prod (2^mu B_mu)^{-1/(3 kappa^{mu+1})}."""
        g = self.globals
        kappa = float(g.kappa)
        bprime = float(g.beta_prime)
        log_rhs = math.log(g.alpha0 * g.gamma0 / 80.0) / (1.0 - 2.0 * bprime)
        for mu in range(terms):
            log_sigma = math.log(g.s0 / 20.0) - mu * math.log(2.0)
            log_b_mu = math.log(24.0 * g.bsigma_c) - (4 * g.n + 4 * g.tau + 5) * log_sigma
            log_rhs -= (mu * math.log(2.0) + log_b_mu) / (3.0 * kappa ** (mu + 1))
        return {"log10_eps0": math.log10(g.eps0),
                "log10_gate": log_rhs / math.log(10.0),
                "holds": math.log(g.eps0) <= log_rhs}


def schedule(nu: int, g: ScheduleGlobals) -> ScheduleRow:
    """One row of the iteration parameters."""
    return KamSchedule(g).row(nu)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class KamState:
    nu: int
    sites: SiteSet
    budget: TruncationBudget
    grid: ParameterGrid
    active: np.ndarray
    omega: np.ndarray                    # (G, n)
    omega_bar: np.ndarray                # (G, M)
    omega_tilde: Dict[int, FourierFunction]
    p_series: FormalSeries
    ledger: ExclusionLedger
    generators: List[FormalSeries] = field(default_factory=list)

    def freq_view(self) -> FrequencyData:
        cvals = np.zeros(self.grid.count)
        return FrequencyData(self.sites, self.grid, self.omega, self.omega_bar,
                             cvals, np.eye(self.sites.n), np.eye(self.sites.n))

    @classmethod
    def from_reduced(cls, red: ReducedHamiltonian) -> "KamState":
        g = red.grid.count
        return cls(0, red.sites, red.budget, red.grid,
                   np.ones(g, dtype=bool), red.freq.omega.copy(),
                   red.freq.omega_bar.copy(), {}, red.p_series,
                   ExclusionLedger(g))


@dataclass
class KamStepReport:
    nu: int
    eps_measured: float
    eps_sup: float
    eps_lip: float
    eps_schedule: float
    eps_next_measured: float
    eps_next_schedule: float
    drift_omega: float
    drift_omega_lip: float
    drift_omega_bound: float
    drift_normal: float
    excluded_new: int
    active_count: int
    case_counts: Dict[str, int]
    solver_residual: float
    contraction_ratio: float
    horizon_exceeded: bool
    lie_orders: int
    hypotheses: Dict[str, bool]
    f_terms: int
    rhat_terms: int

    def to_dict(self) -> dict:
        return {
            "nu": self.nu,
            "eps_measured": self.eps_measured,
            "eps_sup": self.eps_sup,
            "eps_lip": self.eps_lip,
            "eps_schedule": self.eps_schedule,
            "eps_next_measured": self.eps_next_measured,
            "eps_next_schedule": self.eps_next_schedule,
            "drift_omega": self.drift_omega,
            "drift_omega_lip": self.drift_omega_lip,
            "drift_omega_bound": self.drift_omega_bound,
            "drift_normal": self.drift_normal,
            "excluded_new": self.excluded_new,
            "active_count": self.active_count,
            "case_counts": dict(self.case_counts),
            "solver_residual": self.solver_residual,
            "contraction_ratio": self.contraction_ratio,
            "horizon_exceeded": self.horizon_exceeded,
            "lie_orders": self.lie_orders,
            "hypotheses": dict(self.hypotheses),
            "f_terms": self.f_terms,
            "rhat_terms": self.rhat_terms,
        }


@dataclass
class EngineOptions:
    max_steps: int = 4
    eps_floor: float = 1e-30
    stop_at_horizon: bool = False
    enforce_schedule: bool = True
    excl_k_max: Optional[int] = None      # default: fourier budget
    audit_k_max: int = 6
    lie_rel_tol: float = 1e-18
    lie_order_cap: int = 16
    p_exponent: float = 2.0
    q_exponent: float = 1.0
    a_exp: float = 0.05


def measured_epsilon(P: FormalSeries, w: NormWeights, lam: float,
                     grid: ParameterGrid, active: np.ndarray) -> Tuple[float, float, float]:
    """||X_P||^lambda over the active grid: sup of the majorant plus
    lambda times the max pairwise difference quotient."""
    X = hamiltonian_vector_field(P)
    maj = majorant_norm(X, w)
    maj = np.atleast_1d(np.asarray(maj, dtype=float))
    if maj.shape[0] == 1 and grid.count > 1:
        maj = np.repeat(maj, grid.count)
    sup = float(maj[active].max()) if active.any() else 0.0
    lip = 0.0
    for gidx, hidx in grid.pairs:
        if not (active[gidx] and active[hidx]):
            continue
        comp = {}
        for v, s in X.components.items():
            dterms = {}
            for key, c in s.terms.items():
                arr = np.asarray(c) * np.ones(X.width)
                dterms[key] = complex(arr[gidx] - arr[hidx])
            comp[v] = FormalSeries(X.sites, X.budget, dterms, 1)
        from .series import VectorField
        dX = VectorField(X.sites, X.budget, comp, 1)
        lip = max(lip, majorant_norm(dX, w) / grid.pair_distance(gidx, hidx))
    return sup + lam * lip, sup, lip


def lie_integral(A: FormalSeries, B: FormalSeries, F: FormalSeries,
                 budget: TruncationBudget, rel_tol: float = 1e-18,
                 cap: int = 16) -> Tuple[FormalSeries, int]:
    """Closed-form t-integral of {(1-t) A' + t (A'+B), F} o X_F^t:
    sum_{M>=1} ad^M(A)/M! + M ad^M(B)/(M+1)!  with A = N-hat + R-hat and
    B = R - A.  Each Lie order's t-polynomial is integrated exactly, so
    no quadrature error enters."""
    from .series import BracketParts, _bracket_against
    out = FormalSeries.zero(A.sites, budget, max(A.width, B.width, F.width))
    ta, tb = A, B
    fact = 1.0
    orders = 0
    base = max(A.coeff_mass() + B.coeff_mass(), 1e-300)
    parts = BracketParts(F)
    for m in range(1, cap + 1):
        ta = _bracket_against(ta, parts, budget)
        tb = _bracket_against(tb, parts, budget)
        fact *= m
        contrib = ta.scale(1.0 / fact) + tb.scale(float(m) / (fact * (m + 1)))
        out = out + contrib
        orders = m
        if ta.is_zero() and tb.is_zero():
            break
        if contrib.coeff_mass() <= rel_tol * base:
            break
    return out, orders


def _strip_constant(P: FormalSeries) -> FormalSeries:
    n = P.sites.n
    const = ((0,) * n, (0,) * n, (), ())
    if const in P.terms:
        out = P.copy()
        out.terms.pop(const, None)
        return out
    return P


def _enumerate_exclusions(state: KamState, row: ScheduleRow, tau: float,
                          k_max: int) -> Tuple[List[ResonanceZone], List[ResonanceZone]]:
    """Zones of Eq-style step exclusion with the current tabulated
    frequencies: the general family (k != 0, |l| <= 2, l not an opposite
    pair) at level alpha_1 and the opposite-pair family (all k,
    |j| <= Pi) at level alpha_2.  Only zones that exclude an active
    point are materialized."""
    from .nonres import DivisorSpec
    sites = state.sites
    n = sites.n
    modes = np.array(sites.normal_modes, dtype=np.int64)
    col = {j: t for t, j in enumerate(sites.normal_modes)}
    act = state.active
    zones_general: List[ResonanceZone] = []
    zones_pair: List[ResonanceZone] = []
    if not act.any():
        return zones_general, zones_pair

    ks = _k_ball(n, k_max)
    komega = ks.astype(float) @ state.omega.T          # (K, G)
    knorm = np.abs(ks).sum(axis=1)

    def emit(zlist, kvec, lpairs, vals, thr, weight):
        mask = (np.abs(vals) < thr) & act
        if mask.any():
            spec = DivisorSpec(tuple(int(v) for v in kvec), lpairs)
            zlist.append(ResonanceZone(spec, row.alpha1 if zlist is zones_general
                                       else row.alpha2, tau, weight, thr, mask,
                                       float(np.min(np.abs(vals)))))

    # general family
    L1cols = []
    lspecs = []
    for t, j in enumerate(modes):
        for c in (1, -1, 2, -2):
            L1cols.append(c * state.omega_bar[:, col[j]])
            lspecs.append((((int(j), c),), max(1, abs(c * j))))
    for t1 in range(len(modes)):
        for t2 in range(t1 + 1, len(modes)):
            ji, jj = int(modes[t1]), int(modes[t2])
            for s1, s2 in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                if s1 * s2 == -1 and ji == -jj:
                    continue  # opposite pairs belong to the alpha2 family
                L1cols.append(s1 * state.omega_bar[:, col[ji]] +
                              s2 * state.omega_bar[:, col[jj]])
                lspecs.append((tuple(sorted(((ji, s1), (jj, s2)))),
                               max(1, abs(s1 * ji), abs(s2 * jj))))
    lvals = np.stack(L1cols, axis=0) if L1cols else np.zeros((0, state.grid.count))
    nz = knorm > 0
    for kidx in np.flatnonzero(nz):
        base = komega[kidx]                      # (G,)
        kn = max(1, int(knorm[kidx]))
        # l = 0 zone
        thr0 = row.alpha1 * 1.0 / kn ** tau
        mask0 = (np.abs(base) < thr0) & act
        if mask0.any():
            from .nonres import DivisorSpec as DS
            zones_general.append(ResonanceZone(DS(tuple(int(v) for v in ks[kidx]), ()),
                                               row.alpha1, tau, 1.0, thr0, mask0,
                                               float(np.min(np.abs(base)))))
        if lvals.shape[0]:
            d = base[None, :] + lvals            # (S, G)
            ws = np.array([w for _, w in lspecs], dtype=float)
            thr = row.alpha1 * ws / kn ** tau
            bad = (np.abs(d) < thr[:, None]) & act[None, :]
            for srow in np.flatnonzero(bad.any(axis=1)):
                emit(zones_general, ks[kidx], lspecs[srow][0], d[srow],
                     float(thr[srow]), float(ws[srow]))

    # opposite-pair family, all k, |j| <= Pi
    pair_js = [int(j) for j in modes if j > 0 and -j in col and j <= row.pi_trunc]
    for j in pair_js:
        lval = state.omega_bar[:, col[-j]] - state.omega_bar[:, col[j]]
        thr = row.alpha2 * j  # divided by <k>^tau per k below
        for kidx in range(ks.shape[0]):
            kn = max(1, int(knorm[kidx]))
            vals = komega[kidx] + lval
            t = thr / kn ** tau
            mask = (np.abs(vals) < t) & act
            if mask.any():
                from .nonres import DivisorSpec as DS
                spec = DS(tuple(int(v) for v in ks[kidx]), ((-j, 1), (j, -1)))
                zones_pair.append(ResonanceZone(spec, row.alpha2, tau, float(j),
                                                float(t), mask,
                                                float(np.min(np.abs(vals)))))
    return zones_general, zones_pair


def _hypothesis_audit(state: KamState, row: ScheduleRow, g: ScheduleGlobals,
                      w: NormWeights, audit_k_max: int) -> Dict[str, bool]:
    act = state.active
    out: Dict[str, bool] = {}
    if not act.any():
        return {"active": False}
    out["omega_bounded"] = bool(np.max(np.abs(state.omega[act])) <= row.e)
    lip1 = 0.0
    lip2 = 0.0
    for gi, hi in state.grid.pairs:
        if not (act[gi] and act[hi]):
            continue
        d = state.grid.pair_distance(gi, hi)
        lip1 = max(lip1, float(np.max(np.abs(state.omega[gi] - state.omega[hi]))) / d)
        jabs = np.abs(np.array(state.sites.normal_modes, dtype=float))
        lip2 = max(lip2, float(np.max(np.abs(state.omega_bar[gi] - state.omega_bar[hi]) / jabs)) / d)
    out["omega_lip"] = lip1 <= row.m1 * (1 + 1e-12)
    out["normal_lip"] = lip2 <= row.m2 * (1 + 1e-12)
    # assumption (A) with Omega_0 = 0 on the retained modes
    modes = np.array(state.sites.normal_modes + (0,), dtype=float)
    vals = np.concatenate([state.omega_bar, np.zeros((state.grid.count, 1))], axis=1)
    m_meas = math.inf
    for a in range(len(modes)):
        den = np.abs(modes ** 2 - modes[a] ** 2)
        sel = den > 0
        if sel.any():
            q = np.abs(vals[act][:, sel] - vals[act][:, a:a + 1]) / den[None, sel]
            m_meas = min(m_meas, float(q.min()))
    out["assumption_A"] = m_meas >= row.m * (1 - 1e-12)
    # Omega-tilde smallness (17.10.16.6-style)
    bound_ok = True
    lim = (g.alpha0 - row.alpha1) * g.gamma0
    for j, f in state.omega_tilde.items():
        tot = np.asarray(f.norm_tau(row.s, g.tau)) + np.asarray(f.norm_majorant(row.s, row.a_mom))
        if float(np.max(np.atleast_1d(tot)[act])) > lim * abs(j) + 1e-30:
            bound_ok = False
    out["normal_correction_small"] = bound_ok
    # assumption (C) small-range audit with the current frequencies
    sites = state.sites
    n = sites.n
    ks = _k_ball(n, audit_k_max)
    col = {j: t for t, j in enumerate(sites.normal_modes)}
    worst = math.inf
    for j1 in sites.normal_modes:
        for c1 in (1, -1):
            lval = c1 * state.omega_bar[:, col[j1]]
            denom_l = abs(c1 * j1)
            d = ks.astype(float) @ state.omega.T + lval[None, :]
            gnorm = np.abs(ks).sum(axis=1).astype(float)
            denom = np.maximum(gnorm, denom_l)
            inf_d = np.min(np.abs(d[:, act]), axis=1)
            # twist along the gradient via pairwise quotients
            tw = np.zeros(ks.shape[0])
            for gi, hi in state.grid.pairs:
                if act[gi] and act[hi]:
                    q = np.abs(d[:, gi] - d[:, hi]) / state.grid.pair_distance(gi, hi)
                    tw = np.maximum(tw, q)
            ratio = (inf_d + tw) / np.maximum(denom, 1.0)
            worst = min(worst, float(ratio.min()))
    out["assumption_C_audit"] = worst >= row.m3 * (1 - 1e-9) if worst < math.inf else True
    return out


def kam_step(state: KamState, sched: KamSchedule,
             opts: EngineOptions) -> Tuple[KamState, KamStepReport]:
    """One iteration step at every surviving grid point."""
    g = sched.globals
    row = sched.row(state.nu)
    row1 = sched.row(state.nu + 1)
    sites = state.sites
    n = sites.n
    budget = state.budget
    G = state.grid.count
    width = state.p_series.width if state.p_series.width > 1 else G
    tau = g.tau
    k_excl = opts.excl_k_max if opts.excl_k_max is not None else budget.fourier_max

    w_now = NormWeights(s=row.s, r=row.r, p_or_q=opts.q_exponent, a_exp=opts.a_exp,
                        a_mom=row.a_mom, domain_p=opts.p_exponent)
    eps_now, sup_now, lip_now = measured_epsilon(state.p_series, w_now, row.lam,
                                                 state.grid, state.active)

    # (e)-first: remove grid points violating the divisor floors
    zg, zp = _enumerate_exclusions(state, row, tau, k_excl)
    newly = state.ledger.add_step(state.nu, zg, zp)
    active1 = state.active & ~newly
    if not active1.any():
        raise AllExcluded(f"all grid points excluded at step {state.nu}")

    # (a) 2-jet and its normal part
    P = _strip_constant(state.p_series)
    R, normal = taylor_truncate_R(P)
    R_solve = R - normal

    # (b) homological solve with four-way dispatch
    col = sites.mode_index
    disp = dispatch_and_solve_all(
        R_solve, state.omega, state.omega_bar, state.omega_tilde, sites, budget,
        alpha1=row.alpha1, alpha2=row.alpha2, tau=tau, K=row.k_trunc,
        Pi=row.pi_trunc, C0=2.0 * row.e / row.m, active=active1,
        mode_col=col, width=width)
    if disp.events:
        for ev in disp.events:
            active1[ev[0]] = False
        if not active1.any():
            raise AllExcluded(f"all grid points excluded at step {state.nu}")
        disp = dispatch_and_solve_all(
            R_solve, state.omega, state.omega_bar, state.omega_tilde, sites, budget,
            alpha1=row.alpha1, alpha2=row.alpha2, tau=tau, K=row.k_trunc,
            Pi=row.pi_trunc, C0=2.0 * row.e / row.m, active=active1,
            mode_col=col, width=width)
    F = disp.f_series
    rhat = disp.rhat

    # (c) normal-form update: omega-hat = [R^y], Omega-hat = R_jj + <d_x Omega~, F^y>
    omega_new = state.omega.copy()
    omega_bar_new = state.omega_bar.copy()
    omega_tilde_new = {j: f.copy() for j, f in state.omega_tilde.items()}
    nhat_terms: Dict[tuple, object] = {}
    zero_k = (0,) * n
    drift_omega = 0.0
    for b, jb in enumerate(sites.sites):
        i_vec = tuple(1 if t == b else 0 for t in range(n))
        c = normal.coeff((zero_k, i_vec, (), ()))
        if _nonzero(c):
            arr = np.asarray(c) * np.ones(G)
            omega_new[:, b] += sign(jb) * arr.real
            nhat_terms[(zero_k, i_vec, (), ())] = c
    # diagonal z-zbar part (all k): k=0 -> Omega-bar, k!=0 -> Omega-tilde
    for key, c in normal.terms.items():
        k, i, al, be = key
        if sum(i) or not al:
            continue
        j = al[0][0]
        sj = sign(j)
        nhat_terms[key] = c
        arr = np.asarray(c) * np.ones(G)
        if not any(k):
            omega_bar_new[:, col(j)] += sj * arr.real
        else:
            f = omega_tilde_new.setdefault(j, FourierFunction.zero(sites, 0, G))
            f.coeffs[k] = f.coeffs.get(k, 0j) + sj * arr
    # bracket term sigma_j <d_x Omega~_j, F^y> z_j zbar_j
    fy_blocks: Dict[int, FourierFunction] = {}
    for (k, i, al, be), c in F.terms.items():
        if sum(i) == 1 and not al and not be:
            b = i.index(1)
            f = fy_blocks.setdefault(b, FourierFunction.zero(sites, 0, G))
            f.coeffs[k] = f.coeffs.get(k, 0j) + np.asarray(c) * np.ones(G)
    if state.omega_tilde and fy_blocks:
        from .homological import convolve
        for j, omt in state.omega_tilde.items():
            acc = FourierFunction.zero(sites, 0, G)
            for b, fy in fy_blocks.items():
                sb = sign(sites.sites[b])
                dx = FourierFunction(sites, {k: (1j * k[b]) * (np.asarray(c) * np.ones(G))
                                             for k, c in omt.coeffs.items() if k[b]}, 0, G)
                if dx.is_zero():
                    continue
                acc = acc + convolve(dx, fy, budget.fourier_max).scale(sb)
            if not acc.is_zero():
                sj = sign(j)
                for k, c in acc.coeffs.items():
                    key = (k, zero_k, ((j, 1),), ((j, 1),))
                    nhat_terms[key] = nhat_terms.get(key, 0j) + sj * c
                    if not any(k):
                        omega_bar_new[:, col(j)] += (sj * sj) * np.asarray(c).real
                    else:
                        f = omega_tilde_new.setdefault(j, FourierFunction.zero(sites, 0, G))
                        f.coeffs[k] = f.coeffs.get(k, 0j) + c
    nhat = FormalSeries(sites, budget, nhat_terms, width)
    nhat = _strip_constant(nhat)

    # (d) the new perturbation
    A = nhat + rhat
    Bser = R - A
    integral, lie_orders = lie_integral(A, Bser, F, budget,
                                        rel_tol=opts.lie_rel_tol, cap=opts.lie_order_cap)
    p_minus_r = P - R
    if F.is_zero():
        transported = p_minus_r
    else:
        transported = lie_transform(p_minus_r, F, budget=budget,
                                    rel_tol=opts.lie_rel_tol, hard_cap=opts.lie_order_cap)
    p_next = _strip_constant(rhat + integral + transported)

    # (f) measure the new perturbation at the next step's weights
    w_next = NormWeights(s=row1.s, r=row1.r, p_or_q=opts.q_exponent, a_exp=opts.a_exp,
                         a_mom=row1.a_mom, domain_p=opts.p_exponent)
    new_state = KamState(state.nu + 1, sites, budget, state.grid, active1,
                         omega_new, omega_bar_new, omega_tilde_new, p_next,
                         state.ledger, state.generators + [F])
    eps_next, sup_next, lip_next = measured_epsilon(p_next, w_next, row1.lam,
                                                    state.grid, active1)

    drift_omega = float(np.max(np.abs((omega_new - state.omega)[active1]))) \
        if active1.any() else 0.0
    drift_lip = 0.0
    for gi, hi in state.grid.pairs:
        if active1[gi] and active1[hi]:
            dd = (omega_new - state.omega)[gi] - (omega_new - state.omega)[hi]
            drift_lip = max(drift_lip, float(np.max(np.abs(dd))) /
                            state.grid.pair_distance(gi, hi))
    jabs = np.abs(np.array(sites.normal_modes, dtype=float))
    dbar = np.abs((omega_bar_new - state.omega_bar)[active1]) / jabs[None, :]
    drift_normal = float(dbar.max()) if active1.any() and dbar.size else 0.0
    for j, f in omega_tilde_new.items():
        old = state.omega_tilde.get(j)
        diff = f - old if old is not None else f
        val = np.asarray(diff.norm_majorant(row1.s, row.a_mom))
        if val.size and active1.any():
            drift_normal = max(drift_normal, float(np.max(np.atleast_1d(val)[active1])) / abs(j))

    hyp = _hypothesis_audit(new_state, row1, g, w_next, opts.audit_k_max)
    horizon = (row.k_trunc > budget.fourier_max) or (row.pi_trunc > budget.mode_cutoff)
    ratio = (math.log(eps_next) / math.log(eps_now)) \
        if 0 < eps_next < 1 and 0 < eps_now < 1 else 0.0
    report = KamStepReport(
        nu=state.nu, eps_measured=eps_now, eps_sup=sup_now, eps_lip=lip_now,
        eps_schedule=row.eps, eps_next_measured=eps_next,
        eps_next_schedule=row1.eps, drift_omega=drift_omega,
        drift_omega_lip=drift_lip, drift_omega_bound=row.b_const * row.eps,
        drift_normal=drift_normal, excluded_new=int(newly.sum()),
        active_count=int(active1.sum()), case_counts=disp.case_counts,
        solver_residual=disp.max_residual, contraction_ratio=ratio,
        horizon_exceeded=horizon, lie_orders=lie_orders, hypotheses=hyp,
        f_terms=len(F.terms), rhat_terms=len(rhat.terms))

    if opts.enforce_schedule and eps_next > row1.eps:
        raise ContractionFailure(
            f"step {state.nu}: measured eps_{state.nu + 1} = {eps_next:.6g} "
            f"exceeds the schedule bound {row1.eps:.6g}", [report])
    return new_state, report


def _nonzero(c) -> bool:
    return bool(np.max(np.abs(np.asarray(c))) > 0)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class TorusOutput:
    """Composed transformation evaluated on the torus y = z = 0."""

    sites: SiteSet
    grid: ParameterGrid
    surviving: np.ndarray
    frequencies: np.ndarray
    x_shift: Dict[int, FormalSeries]
    y_embed: Dict[int, FormalSeries]
    z_embed: Dict[int, FormalSeries]
    zbar_embed: Dict[int, FormalSeries]


@dataclass
class RunResult:
    reports: List[KamStepReport]
    state: KamState
    torus: TorusOutput
    schedule: KamSchedule
    smallness: dict


def _compose_torus(state: KamState) -> TorusOutput:
    """Pull the coordinate functions through Phi_1 o ... o Phi_nu and
    restrict to y = z = 0."""
    sites = state.sites
    budget = state.budget
    n = sites.n
    G = state.grid.count

    def on_torus(series: FormalSeries) -> FormalSeries:
        return series.select(lambda key: sum(key[1]) == 0 and not key[2] and not key[3])

    x_shift: Dict[int, FormalSeries] = {}
    y_embed: Dict[int, FormalSeries] = {}
    z_embed: Dict[int, FormalSeries] = {}
    zbar_embed: Dict[int, FormalSeries] = {}
    zero_k = (0,) * n

    for b in range(n):
        shift = FormalSeries.zero(sites, budget, G)
        for Fgen in state.generators:
            extra = Fgen.diff(("y", b)).scale(float(sign(sites.sites[b])))
            # x_b o Phi = x_b + sum_m ad^{m-1}({x_b, F})/m!
            term = extra
            acc = FormalSeries.zero(sites, budget, G)
            fact = 1.0
            for m in range(1, 8):
                fact *= m
                acc = acc + term.scale(1.0 / fact)
                term = poisson_bracket(term, Fgen, budget)
                if term.is_zero():
                    break
            shift = lie_transform(shift, Fgen, budget=budget) + acc \
                if not shift.is_zero() else acc
        x_shift[b] = on_torus(shift)

        ycoord = FormalSeries.monomial(sites, budget,
                                       (zero_k, tuple(1 if t == b else 0 for t in range(n)), (), ()),
                                       1.0 + 0j, G)
        for Fgen in state.generators:
            ycoord = lie_transform(ycoord, Fgen, budget=budget)
        y_embed[b] = on_torus(ycoord)

    for j in sites.normal_modes:
        zc = FormalSeries.monomial(sites, budget, (zero_k, (0,) * n, ((j, 1),), ()),
                                   1.0 + 0j, G)
        zb = FormalSeries.monomial(sites, budget, (zero_k, (0,) * n, (), ((j, 1),)),
                                   1.0 + 0j, G)
        for Fgen in state.generators:
            zc = lie_transform(zc, Fgen, budget=budget)
            zb = lie_transform(zb, Fgen, budget=budget)
        ze = on_torus(zc)
        zbe = on_torus(zb)
        if not ze.is_zero():
            z_embed[j] = ze
        if not zbe.is_zero():
            zbar_embed[j] = zbe

    return TorusOutput(sites, state.grid, state.active.copy(),
                       state.omega.copy(), x_shift, y_embed, z_embed, zbar_embed)


def run(initial: KamState, g: ScheduleGlobals, opts: EngineOptions) -> RunResult:
    """Iterate the step up to opts.max_steps, stopping at the eps floor,
    at the truncation horizon (only when requested), or when every
    parameter is excluded.  ContractionFailure propagates with the
    collected reports attached."""
    sched = KamSchedule(g)
    smallness = sched.smallness_gate()
    reports: List[KamStepReport] = []
    state = initial
    for _ in range(opts.max_steps):
        row = sched.row(state.nu)
        if opts.stop_at_horizon and (row.k_trunc > state.budget.fourier_max or
                                     row.pi_trunc > state.budget.mode_cutoff):
            break
        if row.eps < opts.eps_floor:
            break
        try:
            sched.row(state.nu + 1)
        except ValueError:
            break   # schedule lost control (eps_{nu+1} >= 1): stop cleanly
        try:
            state, rep = kam_step(state, sched, opts)
        except ContractionFailure as exc:
            exc.reports = reports + exc.reports
            raise
        reports.append(rep)
        if rep.eps_next_measured <= 0 or rep.eps_next_measured < opts.eps_floor:
            break
    torus = _compose_torus(state)
    return RunResult(reports, state, torus, sched, smallness)


def verify_contraction(reports: List[KamStepReport]) -> Tuple[bool, dict]:
    """Every measured eps_{nu+1} must sit below its schedule value and
    every drift below B_nu eps_nu."""
    if len(reports) < 1:
        raise ValueError("need at least one step report")
    diags = {"eps_ok": [], "drift_ok": [], "monotone": []}
    ok = True
    prev = None
    for rep in reports:
        e_ok = rep.eps_next_measured <= rep.eps_next_schedule
        d_ok = (rep.drift_omega + rep.drift_omega_lip * 0.0) <= rep.drift_omega_bound \
            and rep.drift_normal <= rep.drift_omega_bound
        m_ok = rep.eps_next_measured < rep.eps_measured
        diags["eps_ok"].append(e_ok)
        diags["drift_ok"].append(d_ok)
        diags["monotone"].append(m_ok)
        ok = ok and e_ok and d_ok and m_ok
        prev = rep
    return ok, diags
