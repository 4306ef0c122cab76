"""The seven homological equations of one iteration step.

All block equations reduce to the model problem
``-i d_omega u + lambda u + mu(x) u = p(x)`` on the torus, solved either
exactly over the retained Fourier modes or as the Gamma_K-truncated
system; the four-way case dispatch decides which, and books the
unresolved remainders.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .indices import SiteSet, sign
from .series import FormalSeries, NormWeights, TruncationBudget


class ExcludedParameter(Exception):
    """A divisor fell below its floor at some parameter point."""


class HypothesisFailure(Exception):
    """A solver lemma hypothesis is violated by the input data."""


class SolveFailure(Exception):
    """The assembled linear system could not be solved to tolerance."""


@dataclass
class FourierFunction:
    """Sparse function on the torus with an attached momentum tag.

    ``coeffs`` maps Fourier indices k (tuples of length n) to complex
    values or (G,) arrays.  The momentum tag m enters the majorant norm
    through pi(k, m) = sum_b k_b j_b + m.
    """

    sites: SiteSet
    coeffs: Dict[Tuple[int, ...], object]
    momentum: int = 0
    width: int = 1

    def copy(self) -> "FourierFunction":
        return FourierFunction(self.sites, dict(self.coeffs), self.momentum, self.width)

    def is_zero(self) -> bool:
        return not self.coeffs

    @staticmethod
    def zero(sites: SiteSet, momentum: int = 0, width: int = 1) -> "FourierFunction":
        return FourierFunction(sites, {}, momentum, width)

    def average(self):
        zero = (0,) * self.sites.n
        return self.coeffs.get(zero, 0j)

    def remove_average(self) -> "FourierFunction":
        zero = (0,) * self.sites.n
        out = dict(self.coeffs)
        out.pop(zero, None)
        return FourierFunction(self.sites, out, self.momentum, self.width)

    def scale(self, factor) -> "FourierFunction":
        return FourierFunction(self.sites, {k: c * factor for k, c in self.coeffs.items()},
                               self.momentum, self.width)

    def __add__(self, other: "FourierFunction") -> "FourierFunction":
        out = dict(self.coeffs)
        for k, c in other.coeffs.items():
            out[k] = out.get(k, 0j) + c
        return FourierFunction(self.sites, out, self.momentum,
                               max(self.width, other.width))

    def __sub__(self, other: "FourierFunction") -> "FourierFunction":
        return self + other.scale(-1.0)

    def pi(self, k) -> int:
        return sum(kb * jb for kb, jb in zip(k, self.sites.sites)) + self.momentum

    def norm_majorant(self, s: float, a_mom: float):
        """|u|_{s, a, m} = sum |u_k| e^{|k| s} e^{a |pi(k, m)|}."""
        tot = 0.0
        for k, c in self.coeffs.items():
            w = math.exp(s * sum(abs(v) for v in k) + a_mom * abs(self.pi(k)))
            tot = tot + np.abs(c) * w
        return tot if isinstance(tot, np.ndarray) else float(tot)

    def norm_tau(self, s: float, tau: float):
        """|u|_{s, tau+1} = sum |u_k| |k|^{tau+1} e^{|k| s}."""
        tot = 0.0
        for k, c in self.coeffs.items():
            kn = sum(abs(v) for v in k)
            tot = tot + np.abs(c) * (kn ** (tau + 1) * math.exp(s * kn))
        return tot if isinstance(tot, np.ndarray) else float(tot)

    def sup_lower_bound(self, samples: Sequence[np.ndarray]) -> float:
        best = 0.0
        for x in samples:
            v = 0j
            for k, c in self.coeffs.items():
                v += (c if not isinstance(c, np.ndarray) else c[0]) * \
                    np.exp(1j * sum(kb * xb for kb, xb in zip(k, x)))
            best = max(best, abs(v))
        return best

    def at_point(self, g: int) -> "FourierFunction":
        out = {k: (complex(c[g]) if isinstance(c, np.ndarray) else c)
               for k, c in self.coeffs.items()}
        return FourierFunction(self.sites, out, self.momentum, 1)

    def is_real_valued(self, tol: float = 1e-12) -> bool:
        for k, c in self.coeffs.items():
            mk = tuple(-v for v in k)
            other = self.coeffs.get(mk, 0j)
            d = np.max(np.abs(np.conj(np.asarray(other)) - np.asarray(c)))
            if d > tol * max(1.0, float(np.max(np.abs(np.asarray(c))))):
                return False
        return True


def truncate(f: FourierFunction, K: float) -> Tuple[FourierFunction, FourierFunction]:
    """Gamma_K projection: (modes |k| <= K, tail)."""
    if K < 0:
        raise ValueError("K must be >= 0")
    head, tail = {}, {}
    for k, c in f.coeffs.items():
        (head if sum(abs(v) for v in k) <= K else tail)[k] = c
    return (FourierFunction(f.sites, head, f.momentum, f.width),
            FourierFunction(f.sites, tail, f.momentum, f.width))


def convolve(f: FourierFunction, g: FourierFunction,
             fourier_max: Optional[int] = None) -> FourierFunction:
    out: Dict[tuple, object] = {}
    for k1, c1 in f.coeffs.items():
        for k2, c2 in g.coeffs.items():
            k = tuple(a + b for a, b in zip(k1, k2))
            if fourier_max is not None and sum(abs(v) for v in k) > fourier_max:
                continue
            out[k] = out.get(k, 0j) + c1 * c2
    return FourierFunction(f.sites, out, f.momentum + g.momentum,
                           max(f.width, g.width))


def solve_diagonal(rhs: FourierFunction, omega: np.ndarray, remove_average: bool = False,
                   floor: Optional[Tuple[float, float]] = None,
                   raise_on_exclusion: bool = True):
    """Solve d_omega F = rhs (minus its average when requested):
    F_k = rhs_k / (i <k, omega>), F_0 = 0.

    ``omega`` is (n,) or (G, n).  When a floor (alpha1, tau) is given,
    modes with |<k, omega>| < alpha1/<k>^tau are excluded: an
    ExcludedParameter is raised, or with ``raise_on_exclusion=False``
    the offending (point, mode) pairs are returned as events.
    """
    om = np.atleast_2d(np.asarray(omega, dtype=float))
    src = rhs.remove_average() if remove_average else rhs
    events: List[tuple] = []
    out: Dict[tuple, object] = {}
    zero = (0,) * rhs.sites.n
    for k, c in src.coeffs.items():
        if k == zero:
            if not remove_average and _cabs(c) > 0:
                raise ExcludedParameter("nonzero average cannot be removed by d_omega")
            continue
        div = om @ np.array(k, dtype=float)         # (G,)
        if floor is not None:
            alpha1, tau = floor
            kn = max(1, sum(abs(v) for v in k))
            bad = np.abs(div) < alpha1 / kn ** tau
            if bad.any():
                if raise_on_exclusion:
                    raise ExcludedParameter(f"divisor floor failed at mode {k}")
                events.extend((int(g), k, float(div[g])) for g in np.flatnonzero(bad))
                div = np.where(bad, np.inf, div)
        vals = np.asarray(c) / (1j * div)
        out[k] = vals if vals.shape and vals.shape[0] > 1 else complex(vals.reshape(-1)[0])
    u = FourierFunction(rhs.sites, out, rhs.momentum, rhs.width)
    return (u, events) if not raise_on_exclusion else u


def _cabs(c) -> float:
    return float(np.max(np.abs(np.asarray(c))))


def lemma_constant(n: int, tau: float) -> float:
    """c(n, tau) = 4^{n+tau} (8e+8)^n (6e+6)^n (1 + (3 tau / e)^tau)."""
    e = math.e
    return 4.0 ** (n + tau) * (8 * e + 8) ** n * (6 * e + 6) ** n \
        * (1.0 + (3.0 * tau / e) ** tau)


@dataclass
class HomologicalProblem:
    """One model equation -i d_omega u + lambda u + mu u = p."""

    sites: SiteSet
    omega: np.ndarray
    lam: complex
    mu: FourierFunction
    p: FourierFunction
    s: float
    sigma: float
    a_mom: float
    tau: float
    alpha1: float
    alpha2: float
    gamma_tilde: float
    K: int
    mode_pair: Tuple[int, int] = (0, 0)
    case: str = ""
    C: Optional[float] = None


def _mode_list(n: int, K: int) -> List[tuple]:
    rng = range(-K, K + 1)
    return sorted(k for k in product(rng, repeat=n) if sum(abs(v) for v in k) <= K)


def _dense_solve(modes: List[tuple], omega: np.ndarray, lam: complex,
                 mu: FourierFunction, p: FourierFunction) -> Dict[tuple, complex]:
    idx = {k: t for t, k in enumerate(modes)}
    m = len(modes)
    a = np.zeros((m, m), dtype=complex)
    karr = np.array(modes, dtype=float)
    np.fill_diagonal(a, karr @ omega + lam)
    for t, k in enumerate(modes):
        for km, c in mu.coeffs.items():
            k2 = tuple(x - y for x, y in zip(k, km))
            u = idx.get(k2)
            if u is not None:
                a[t, u] += c if not isinstance(c, np.ndarray) else complex(c[0])
    rhs = np.zeros(m, dtype=complex)
    for k, c in p.coeffs.items():
        t = idx.get(k)
        if t is not None:
            rhs[t] = c if not isinstance(c, np.ndarray) else complex(c[0])
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(str(exc)) from exc
    return {k: sol[t] for t, k in enumerate(modes) if sol[t] != 0}


def _residual_norm(u: FourierFunction, omega: np.ndarray, lam: complex,
                   mu: FourierFunction, p: FourierFunction, K: Optional[int],
                   gamma_trunc: bool) -> float:
    """mass of -i d_omega u + lambda u + (Gamma_K)(mu u) - (Gamma_K) p."""
    res: Dict[tuple, complex] = {}

    def acc(k, v):
        res[k] = res.get(k, 0j) + v

    for k, c in u.coeffs.items():
        c0 = c if not isinstance(c, np.ndarray) else complex(c[0])
        acc(k, (float(np.dot(k, omega)) + lam) * c0)
    prod = convolve(mu, u)
    for k, c in prod.coeffs.items():
        if gamma_trunc and K is not None and sum(abs(v) for v in k) > K:
            continue
        acc(k, c if not isinstance(c, np.ndarray) else complex(c[0]))
    for k, c in p.coeffs.items():
        if gamma_trunc and K is not None and sum(abs(v) for v in k) > K:
            continue
        acc(k, -(c if not isinstance(c, np.ndarray) else complex(c[0])))
    return float(sum(abs(v) for v in res.values()))


def solve_variable_exact(prob: HomologicalProblem, strict: bool = True,
                         residual_tol: float = 1e-9):
    """Exact solve of -i d_omega u + lambda u + mu u = p over the retained
    modes |k| <= prob.K, with the solvability hypotheses checked
    numerically on the truncated data and the norm bound evaluated.
    """
    n = prob.sites.n
    modes = _mode_list(n, prob.K)
    om = np.asarray(prob.omega, dtype=float)
    checks: Dict[str, object] = {}
    worst1 = math.inf
    worst2 = math.inf
    wit1 = wit2 = None
    for k in modes:
        kn = sum(abs(v) for v in k)
        dv = float(np.dot(k, om))
        if kn:
            q = abs(dv) * kn ** prob.tau
            if q < worst1:
                worst1, wit1 = q, k
        q2 = abs(dv + prob.lam) * (1.0 + kn ** prob.tau)
        if q2 < worst2:
            worst2, wit2 = q2, k
    checks["h_small_divisor"] = worst1 >= prob.alpha1
    checks["h_lambda_divisor"] = worst2 >= prob.alpha2 * prob.gamma_tilde
    mu_tau = float(np.max(np.asarray(prob.mu.norm_tau(prob.s, prob.tau))))
    c_const = prob.C if prob.C is not None else \
        (mu_tau / prob.gamma_tilde if prob.gamma_tilde > 0 else 0.0)
    checks["C"] = c_const
    checks["h_mu_small"] = mu_tau <= c_const * prob.gamma_tilde + 1e-15
    checks["h_mu_zero_average"] = _cabs(prob.mu.average()) == 0.0 if not prob.mu.is_zero() else True
    checks["h_mu_real"] = prob.mu.is_real_valued()
    checks["h_width"] = 4.0 * prob.a_mom * prob.sites.c_j <= prob.sigma < min(1.0, prob.s)
    if strict:
        if not checks["h_small_divisor"]:
            raise ExcludedParameter(f"<k,omega> floor failed at k={wit1}")
        if not checks["h_lambda_divisor"]:
            raise ExcludedParameter(f"<k,omega>+lambda floor failed at k={wit2}")
        if not (checks["h_mu_small"] and checks["h_mu_zero_average"]):
            raise HypothesisFailure("mu violates the smallness/average hypotheses")

    u_coeffs = _dense_solve(modes, om, prob.lam, prob.mu, prob.p)
    u = FourierFunction(prob.sites, u_coeffs, prob.p.momentum, 1)
    p_mass = float(np.asarray(prob.p.norm_majorant(prob.s, prob.a_mom)))
    # residual on the retained modes |k| <= K (the system actually solved)
    resid = _residual_norm(u, om, prob.lam, prob.mu, prob.p, prob.K, True)
    checks["residual"] = resid
    if resid > residual_tol * max(p_mass, 1e-300):
        raise SolveFailure(f"residual {resid:.3g} above tolerance")

    lhs = float(np.asarray(u.norm_majorant(prob.s - prob.sigma, prob.a_mom)))
    if prob.gamma_tilde > 0 and p_mass > 0:
        # the bound's exponential factor can overflow; compare in logs
        log_rhs = math.log(lemma_constant(n, prob.tau)) \
            - math.log(prob.alpha2 * prob.gamma_tilde) \
            - (2 * n + prob.tau) * math.log(prob.sigma) \
            + 2.0 * c_const * prob.gamma_tilde * prob.s / prob.alpha1 \
            + math.log(p_mass)
        rhs = math.exp(log_rhs) if log_rhs < 700 else math.inf
        holds = (math.log(lhs) <= log_rhs) if lhs > 0 else True
    else:
        rhs = math.inf
        holds = True
    checks["bound_lhs"] = lhs
    checks["bound_rhs"] = rhs
    checks["bound_holds"] = holds
    return u, checks


def solve_variable_truncated(prob: HomologicalProblem, strict: bool = True,
                             residual_tol: float = 1e-10):
    """Solve the Gamma_K-truncated equation
    -i d_omega u + lambda u + Gamma_K(mu u) = Gamma_K p, u = Gamma_K u,
    and return (u, tail, checks) with tail = (1 - Gamma_K)(mu u)."""
    if prob.lam == 0:
        raise HypothesisFailure("lambda must be nonzero")
    om = np.asarray(prob.omega, dtype=float)
    om_inf = float(np.max(np.abs(om))) if om.size else 0.0
    mu_mass = float(np.asarray(prob.mu.norm_majorant(prob.s, prob.a_mom)))
    ok_freq = 2.0 * prob.K * om_inf <= abs(prob.lam)
    ok_mu = mu_mass <= abs(prob.lam) / 4.0
    if strict and not ok_freq:
        raise HypothesisFailure("2 K |omega| > |lambda|")
    if strict and not ok_mu:
        raise HypothesisFailure("|mu|_{s,a,0} > |lambda|/4")

    p_head, _ = truncate(prob.p, prob.K)
    modes = _mode_list(prob.sites.n, prob.K)
    mu_head, _ = truncate(prob.mu, prob.K * 2)
    u_coeffs = _dense_solve(modes, om, prob.lam, mu_head, p_head)
    u = FourierFunction(prob.sites, u_coeffs, prob.p.momentum, 1)
    _, tail = truncate(convolve(prob.mu, u), prob.K)

    checks: Dict[str, object] = {"h_freq": ok_freq, "h_mu": ok_mu}
    p_mass = float(np.asarray(prob.p.norm_majorant(prob.s, prob.a_mom)))
    resid = _residual_norm(u, om, prob.lam, prob.mu, p_head, prob.K, True)
    checks["residual"] = resid
    if resid > residual_tol * max(p_mass, 1e-300):
        raise SolveFailure(f"residual {resid:.3g} above tolerance")
    u_mass = float(np.asarray(u.norm_majorant(prob.s, prob.a_mom)))
    checks["u_bound_lhs"] = u_mass
    checks["u_bound_rhs"] = 4.0 / abs(prob.lam) * p_mass
    checks["u_bound_holds"] = u_mass <= checks["u_bound_rhs"] * (1 + 1e-12)
    tail_mass = float(np.asarray(tail.norm_majorant(prob.s - prob.sigma, prob.a_mom)))
    checks["tail_bound_lhs"] = tail_mass
    checks["tail_bound_rhs"] = math.exp(-prob.K * prob.sigma) * p_mass
    checks["tail_bound_holds"] = tail_mass <= checks["tail_bound_rhs"] * (1 + 1e-12)
    return u, tail, checks


# ---------------------------------------------------------------------------
# block extraction and the four-way dispatch
# ---------------------------------------------------------------------------

def extract_blocks(R: FormalSeries) -> Dict[tuple, Dict[tuple, object]]:
    """Group the 2-jet series into its x / y / z / zbar / zz / zbzb / zzb
    blocks, each a dict of Fourier coefficients."""
    blocks: Dict[tuple, Dict[tuple, object]] = {}

    def put(tag, k, c):
        blocks.setdefault(tag, {})[k] = c

    for (k, i, al, be), c in R.terms.items():
        deg = 2 * sum(i) + sum(p for _, p in al) + sum(p for _, p in be)
        if deg > 2:
            raise ValueError("extract_blocks expects a 2-jet")
        if sum(i) == 1:
            put(("y", i.index(1)), k, c)
        elif not al and not be:
            put(("x",), k, c)
        elif len(al) == 1 and not be and al[0][1] == 1:
            put(("z", al[0][0]), k, c)
        elif len(be) == 1 and not al and be[0][1] == 1:
            put(("zbar", be[0][0]), k, c)
        elif not be and sum(p for _, p in al) == 2:
            pair = (al[0][0], al[0][0]) if len(al) == 1 else (al[0][0], al[1][0])
            put(("zz", pair), k, c)
        elif not al and sum(p for _, p in be) == 2:
            pair = (be[0][0], be[0][0]) if len(be) == 1 else (be[0][0], be[1][0])
            put(("zbzb", pair), k, c)
        else:
            put(("zzb", (al[0][0], be[0][0])), k, c)
    return blocks


def block_key(tag: tuple, k: tuple, n: int) -> tuple:
    """Series term key for one block Fourier mode."""
    i0 = (0,) * n
    kind = tag[0]
    if kind == "x":
        return (k, i0, (), ())
    if kind == "y":
        i = tuple(1 if t == tag[1] else 0 for t in range(n))
        return (k, i, (), ())
    if kind == "z":
        return (k, i0, ((tag[1], 1),), ())
    if kind == "zbar":
        return (k, i0, (), ((tag[1], 1),))
    if kind == "zz":
        a, b = tag[1]
        al = ((a, 2),) if a == b else tuple(sorted(((a, 1), (b, 1))))
        return (k, i0, al, ())
    if kind == "zbzb":
        a, b = tag[1]
        be = ((a, 2),) if a == b else tuple(sorted(((a, 1), (b, 1))))
        return (k, i0, (), be)
    if kind == "zzb":
        a, b = tag[1]
        return (k, i0, ((a, 1),), ((b, 1),))
    raise ValueError(tag)


def block_momentum_tag(tag: tuple) -> int:
    kind = tag[0]
    if kind in ("x", "y"):
        return 0
    if kind == "z":
        return tag[1]
    if kind == "zbar":
        return -tag[1]
    a, b = tag[1]
    if kind == "zz":
        return a + b
    if kind == "zbzb":
        return -a - b
    return a - b


@dataclass
class DispatchResult:
    f_series: FormalSeries
    rhat: FormalSeries
    events: List[tuple]
    case_counts: Dict[str, int]
    max_residual: float
    bound_failures: int
    solved_blocks: int


def dispatch_and_solve_all(R: FormalSeries, omega: np.ndarray, omega_bar: np.ndarray,
                           omega_tilde: Dict[int, FourierFunction], sites: SiteSet,
                           budget: TruncationBudget, *, alpha1: float, alpha2: float,
                           tau: float, K: float, Pi: float, C0: float,
                           active: np.ndarray, mode_col, width: int,
                           neumann_tol: float = 1e-13,
                           neumann_iters: int = 60) -> "DispatchResult":
    """Assemble the generating function F block by block.

    Case (1): max{|i|,|j|} <= C0 K and i != -j -> exact solve on the
    retained modes.  Case (2): max{|i|,|j|} > C0 K -> Gamma_K-truncated
    solve, tail into R-hat.  Case (3): i = -j, |j| <= Pi -> exact solve
    against the alpha2 floor.  Case (4): i = -j, |j| > Pi -> F = 0 and
    the block moves to R-hat.  Diagonal z-zbar terms and k = 0 averages
    never reach this routine (they feed the normal form instead).

    Divisor floors are checked per grid point over the full unknown mode
    set; failures become exclusion events, never errors.
    """
    n = sites.n
    blocks = extract_blocks(R)
    f_terms: Dict[tuple, object] = {}
    rhat_terms: Dict[tuple, object] = {}
    events: List[tuple] = []
    case_counts = {"x": 0, "y": 0, "case1": 0, "case2": 0, "case3": 0, "case4": 0}
    max_resid = 0.0
    solved = 0
    om = np.atleast_2d(np.asarray(omega, dtype=float))
    G = om.shape[0]
    act = np.asarray(active, dtype=bool)

    def solve_block(tag, coeffs, lam_bar, mu: Optional[FourierFunction],
                    family_alpha: float, floor_w: float, truncate_at: Optional[float]):
        """Diagonal + Neumann solve of one block equation at every active
        grid point.  The unknown mode set is closed under convolution
        with mu (up to the Fourier budget, or up to K when truncated) so
        the solve identity holds on everything the series represents.
        Returns F-coeffs, the R-hat tail, and divisor-floor events.
        """
        nonlocal max_resid, solved
        limit = truncate_at if truncate_at is not None else budget.fourier_max
        p = {k: -1j * (np.asarray(c) * np.ones(G)) for k, c in coeffs.items()}
        kept = {k: v for k, v in p.items() if sum(abs(x) for x in k) <= limit}
        cut = {k: v for k, v in p.items() if k not in kept}
        if mu is not None and not mu.is_zero():
            frontier = set(kept)
            for _ in range(3):   # mu is O(eps); depth-3 closure is ample
                new = set()
                for km in mu.coeffs:
                    for k in frontier:
                        k2 = tuple(a + b for a, b in zip(km, k))
                        if k2 not in kept and new.isdisjoint({k2}) \
                                and sum(abs(x) for x in k2) <= limit:
                            new.add(k2)
                for k2 in new:
                    kept[k2] = np.zeros(G, dtype=complex)
                if not new:
                    break
                frontier = new
        div_map: Dict[tuple, np.ndarray] = {}
        ev = []
        fam = "alpha2" if family_alpha == alpha2 else "alpha1"
        for k in kept:
            div = om @ np.array(k, dtype=float) + lam_bar
            div_map[k] = div
            kn = max(1, sum(abs(v) for v in k))
            floor = family_alpha * floor_w / kn ** tau
            bad = act & (np.abs(div) < floor)
            for g in np.flatnonzero(bad):
                ev.append((int(g), fam, tag, k, float(div[g]), float(floor)))
        u: Dict[tuple, np.ndarray] = {}
        for k, v in kept.items():
            with np.errstate(divide="ignore", invalid="ignore"):
                u[k] = np.where(act & (div_map[k] != 0), v / div_map[k], 0.0)

        def mu_conv(uu):
            corr: Dict[tuple, np.ndarray] = {}
            if mu is None or mu.is_zero():
                return corr
            for km, cm in mu.coeffs.items():
                cmv = np.asarray(cm) * np.ones(G)
                for k, uv in uu.items():
                    k2 = tuple(a + b for a, b in zip(km, k))
                    if k2 in kept:
                        corr[k2] = corr.get(k2, 0.0) + cmv * uv
            return corr

        if mu is not None and not mu.is_zero():
            for _ in range(neumann_iters):
                corr = mu_conv(u)
                delta = 0.0
                newu = {}
                for k, v in kept.items():
                    resid_k = v - corr.get(k, 0.0)
                    with np.errstate(divide="ignore", invalid="ignore"):
                        nk = np.where(act & (div_map[k] != 0), resid_k / div_map[k], 0.0)
                    delta = max(delta, float(np.max(np.abs(nk - u.get(k, 0.0)))))
                    newu[k] = nk
                u = newu
                scale = max((float(np.max(np.abs(v))) for v in kept.values()), default=0.0)
                if delta <= neumann_tol * max(scale, 1e-300):
                    break
            else:
                raise SolveFailure(f"Neumann iteration stalled on block {tag}")
        # residual bookkeeping (max defect on kept modes, relative to p)
        resid = 0.0
        corr = mu_conv(u)
        pscale = max((float(np.max(np.abs(v[act]))) for v in kept.values() if act.any()),
                     default=0.0)
        for k, v in kept.items():
            d = div_map[k] * u[k] + corr.get(k, 0.0) - v
            resid = max(resid, float(np.max(np.abs(d[act]))) if act.any() else 0.0)
        if pscale > 0:
            max_resid = max(max_resid, resid / pscale)
        solved += 1
        # tail: (1 - Gamma_K)(R - i Omega~ F), back in the R-normalization
        tail: Dict[tuple, np.ndarray] = {}
        if truncate_at is not None:
            for k, v in cut.items():
                tail[k] = 1j * v
            if mu is not None and not mu.is_zero():
                for km, cm in mu.coeffs.items():
                    cmv = np.asarray(cm) * np.ones(G)
                    for k, uv in u.items():
                        k2 = tuple(a + b for a, b in zip(km, k))
                        if sum(abs(x) for x in k2) > truncate_at:
                            tail[k2] = tail.get(k2, 0.0) + 1j * cmv * uv
        return u, tail, ev

    def mu_for(i_mode: Optional[int], j_mode: Optional[int], s1: float, s2: float):
        out = FourierFunction.zero(sites, 0, width)
        if i_mode is not None and i_mode in omega_tilde:
            out = out + omega_tilde[i_mode].scale(s1)
        if j_mode is not None and j_mode in omega_tilde:
            out = out + omega_tilde[j_mode].scale(s2)
        return None if out.is_zero() else out

    for tag in sorted(blocks, key=repr):
        coeffs = blocks[tag]
        kind = tag[0]
        if kind in ("x", "y"):
            ff = FourierFunction(sites, coeffs, 0, width).remove_average()
            u, ev = solve_diagonal(ff, om, remove_average=False,
                                   floor=(alpha1, tau), raise_on_exclusion=False)
            events.extend((g, "alpha1", tag, k, d, 0.0) for g, k, d in ev)
            for k, c in u.coeffs.items():
                f_terms[block_key(tag, k, n)] = c
            case_counts[kind] += 1
            continue

        if kind == "z":
            lam_bar = -omega_bar[:, mode_col(tag[1])]
            mu = mu_for(tag[1], None, -1.0, 0.0)
            size = abs(tag[1])
            is_pair = False
            fw = float(max(1, abs(tag[1])))
        elif kind == "zbar":
            lam_bar = omega_bar[:, mode_col(tag[1])]
            mu = mu_for(tag[1], None, 1.0, 0.0)
            size = abs(tag[1])
            is_pair = False
            fw = float(max(1, abs(tag[1])))
        elif kind == "zz":
            a, b = tag[1]
            lam_bar = -(omega_bar[:, mode_col(a)] + omega_bar[:, mode_col(b)])
            mu = mu_for(a, b, -1.0, -1.0)
            size = max(abs(a), abs(b))
            is_pair = False
            fw = float(max(1, abs(a), abs(b)))
        elif kind == "zbzb":
            a, b = tag[1]
            lam_bar = omega_bar[:, mode_col(a)] + omega_bar[:, mode_col(b)]
            mu = mu_for(a, b, 1.0, 1.0)
            size = max(abs(a), abs(b))
            is_pair = False
            fw = float(max(1, abs(a), abs(b)))
        else:  # zzb: the monomial z_a zbar_b is annihilated by the divisor
            # <k, omega> + Omega_b - Omega_a (zbar index minus z index)
            a, b = tag[1]
            if a == b:
                raise ValueError("diagonal z-zbar block reached the dispatcher")
            lam_bar = omega_bar[:, mode_col(b)] - omega_bar[:, mode_col(a)]
            mu = mu_for(a, b, -1.0, 1.0)
            size = max(abs(a), abs(b))
            is_pair = (a == -b)
            fw = float(max(1, abs(a), abs(b)))

        if is_pair:
            jj = abs(tag[1][1])
            if jj > Pi:
                for k, c in coeffs.items():
                    rhat_terms[block_key(tag, k, n)] = c
                case_counts["case4"] += 1
                continue
            u, tail, ev = solve_block(tag, coeffs, lam_bar, mu, alpha2, float(jj), None)
            case_counts["case3"] += 1
        elif size <= C0 * K:
            u, tail, ev = solve_block(tag, coeffs, lam_bar, mu, alpha1, fw, None)
            case_counts["case1"] += 1
        else:
            u, tail, ev = solve_block(tag, coeffs, lam_bar, mu, alpha1, fw, K)
            case_counts["case2"] += 1
        events.extend(ev)
        # closure modes whose coefficients sit below double-precision
        # relevance only bloat later brackets; drop them
        bscale = max((float(np.max(np.abs(c))) for c in u.values()), default=0.0)
        for k, c in u.items():
            if float(np.max(np.abs(c))) > 1e-17 * bscale:
                f_terms[block_key(tag, k, n)] = c
        for k, c in tail.items():
            if float(np.max(np.abs(c))) > 0.0:
                key = block_key(tag, k, n)
                rhat_terms[key] = rhat_terms.get(key, 0.0) + c

    f_series = FormalSeries(sites, budget, f_terms, width)
    rhat = FormalSeries(sites, budget, rhat_terms, width)
    # [[F]] = 0: no k = 0 y-average, no diagonal z-zbar entries
    for (k, i, al, be) in f_series.terms:
        if sum(i) == 1 and not any(k):
            raise AssertionError("F contains a y-average")
        if len(al) == 1 and len(be) == 1 and al[0][0] == be[0][0] \
                and al[0][1] == be[0][1] == 1:
            raise AssertionError("F contains a diagonal z-zbar block")
    return DispatchResult(f_series, rhat, events, case_counts, max_resid, 0, solved)
