"""Small divisors: the n+1-inequality dichotomy, assumption (A)/(B)/(C)
audits, resonance zones and the excluded-measure estimator.

Divisor index arithmetic is exact: the scalar entry points use integer /
rational arithmetic, and the exhaustive audits multiply the inequalities
through by their (positive, integer) denominators so that int64 numpy
comparisons are mathematically identical to rational ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .indices import SiteSet
from .model import FrequencyData

INEQ_NONE = "none"


@dataclass(frozen=True)
class DivisorSpec:
    """One small divisor <k, omega> + <l, Omega>: a Fourier index k and a
    normal-mode combination l with at most two units of mass."""

    k: Tuple[int, ...]
    l: Tuple[Tuple[int, int], ...]   # sorted ((mode, coeff)) pairs, coeff != 0

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in self.k))
        object.__setattr__(self, "l", tuple(sorted((int(j), int(c)) for j, c in self.l)))
        if sum(abs(c) for _, c in self.l) > 2:
            raise ValueError("|l| must be <= 2")
        if any(j == 0 or c == 0 for j, c in self.l):
            raise ValueError("l must be supported on nonzero modes with nonzero coeffs")

    @property
    def k_norm(self) -> int:
        return sum(abs(v) for v in self.k)

    @property
    def jl_sum(self) -> int:
        """sum_j |j l_j|."""
        return sum(abs(j * c) for j, c in self.l)

    @property
    def l_inf_weight(self) -> int:
        """<l>_inf = max{1, sup |j l_j|}."""
        return max(1, max((abs(j * c) for j, c in self.l), default=0))

    def is_opposite_pair(self) -> bool:
        """True for the e_{-j} - e_j family."""
        if len(self.l) != 2:
            return False
        (j1, c1), (j2, c2) = self.l
        return j1 == -j2 and c1 + c2 == 0 and abs(c1) == 1


def integer_part(spec: DivisorSpec, sites: SiteSet) -> int:
    """sum_b k_b j_b^2 + sum_j l_j j^2 (the xi-independent divisor part)."""
    return sum(kb * jb * jb for kb, jb in zip(spec.k, sites.sites)) + \
        sum(c * j * j for j, c in spec.l)


def gradient(spec: DivisorSpec, sites: SiteSet) -> Tuple[Fraction, ...]:
    """Exact xi-gradient of the affine divisor:
    g_b = k_b j_b + 2 (sum_j l_j j) / (2n - 1)."""
    n = sites.n
    lsum = sum(c * j for j, c in spec.l)
    return tuple(Fraction(kb * jb) + Fraction(2 * lsum, 2 * n - 1)
                 for kb, jb in zip(spec.k, sites.sites))


def divisor(spec: DivisorSpec, xi: Sequence, sites: SiteSet, exact: bool = False):
    """Affine divisor value <k, omega(xi)> + <l, Omega(xi)>.

    With ``exact=True`` and rational xi entries the value is a Fraction;
    otherwise a float.
    """
    ipart = integer_part(spec, sites)
    g = gradient(spec, sites)
    if exact:
        return Fraction(ipart) + sum(gb * Fraction(x) for gb, x in zip(g, xi))
    return float(ipart) + float(sum(float(gb) * float(x) for gb, x in zip(g, xi)))


def divisor_on_freq(spec: DivisorSpec, freq: FrequencyData) -> np.ndarray:
    """Divisor evaluated with the current (possibly drifted) tabulated
    frequencies, one value per grid point."""
    vals = np.zeros(freq.grid.count)
    for b, kb in enumerate(spec.k):
        if kb:
            vals = vals + kb * freq.omega[:, b]
    for j, c in spec.l:
        vals = vals + c * freq.omega_bar[:, freq.mode_col(j)]
    return vals


# ---------------------------------------------------------------------------
# the n+1-inequality dichotomy
# ---------------------------------------------------------------------------

def lemma32(k: Sequence[int], l, sites: SiteSet) -> str:
    """First satisfied inequality of the dichotomy, in exact arithmetic.

    Checks, in order, the quadratic-form inequality
    |sum k_b j_b^2 + sum l_j j^2| >= max{|k|, sum|j l_j|} / (100 n)
    and then, for b = 1..n,
    |k_b j_b + sum l_j j/(n-1/2)| >= max{|k|, sum|j l_j|} / (100 n sum|j_b|).
    Returns 'inequality_0', 'inequality_b', or 'none' if all fail.
    """
    spec = DivisorSpec(tuple(k), tuple(l.items()) if isinstance(l, dict) else tuple(l))
    n = sites.n
    if n < 1:
        raise ValueError("need at least one site")
    rhs = max(spec.k_norm, spec.jl_sum)
    a = integer_part(spec, sites)
    if 100 * n * abs(a) >= rhs:
        return "inequality_0"
    sumj = sum(abs(j) for j in sites.sites)
    lsum = sum(c * j for j, c in spec.l)
    for b, jb in enumerate(sites.sites):
        lhs = abs((2 * n - 1) * spec.k[b] * jb + 2 * lsum)
        if 100 * n * sumj * lhs >= (2 * n - 1) * rhs:
            return f"inequality_{b + 1}"
    return INEQ_NONE


def _l_family_arrays(modes: np.ndarray):
    """All l with |l| <= 2 supported on ``modes``: returns int64 arrays
    (L1, L2, W) = (sum l_j j^2, sum l_j j, sum |j l_j|), one row per l,
    plus a structure list to reconstruct witnesses."""
    m = modes.astype(np.int64)
    parts_l1: List[np.ndarray] = [np.zeros(1, dtype=np.int64)]
    parts_l2: List[np.ndarray] = [np.zeros(1, dtype=np.int64)]
    parts_w: List[np.ndarray] = [np.zeros(1, dtype=np.int64)]
    structure: List[tuple] = [("zero",)]

    for coeff in (1, -1, 2, -2):
        parts_l1.append(coeff * m * m)
        parts_l2.append(coeff * m)
        parts_w.append(np.abs(coeff * m))
        structure.append(("single", coeff))
    if len(m) >= 2:
        ii, jj = np.triu_indices(len(m), k=1)
        mi, mj = m[ii], m[jj]
        for s1, s2 in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
            parts_l1.append(s1 * mi * mi + s2 * mj * mj)
            parts_l2.append(s1 * mi + s2 * mj)
            parts_w.append(np.abs(s1 * mi) + np.abs(s2 * mj))
            structure.append(("pair", s1, s2, ii, jj))
    return (np.concatenate(parts_l1), np.concatenate(parts_l2),
            np.concatenate(parts_w), structure, m)


def _describe_l(idx: int, structure, modes: np.ndarray):
    """Reconstruct the l combination behind a flat family index."""
    off = 0
    nm = len(modes)
    np_pairs = nm * (nm - 1) // 2
    for entry in structure:
        size = {"zero": 1, "single": nm, "pair": np_pairs}[entry[0]]
        if idx < off + size:
            local = idx - off
            if entry[0] == "zero":
                return ()
            if entry[0] == "single":
                return ((int(modes[local]), entry[1]),)
            _, s1, s2, ii, jj = entry
            return tuple(sorted(((int(modes[ii[local]]), s1),
                                 (int(modes[jj[local]]), s2))))
        off += size
    raise IndexError(idx)


def _k_ball(n: int, k_max: int) -> np.ndarray:
    """All k in Z^n with |k|_1 <= k_max."""
    rng = range(-k_max, k_max + 1)
    pts = [k for k in product(rng, repeat=n) if sum(abs(v) for v in k) <= k_max]
    return np.array(pts, dtype=np.int64)


@dataclass
class DichotomyAudit:
    total: int
    satisfied: int
    none_witnesses: List[tuple]

    @property
    def all_satisfied(self) -> bool:
        return self.satisfied == self.total


def lemma32_exhaustive(sites: SiteSet, k_max: int = 20, mode_max: int = 60,
                       chunk: int = 1024, max_witnesses: int = 16) -> DichotomyAudit:
    """Exhaustive integer check of the dichotomy over |k|_1 <= k_max and
    all |l| <= 2 supported on the normal modes with |j| <= mode_max."""
    n = sites.n
    modes = np.array([j for j in range(-mode_max, mode_max + 1)
                      if j != 0 and j not in sites.sites], dtype=np.int64)
    L1, L2, W, structure, m = _l_family_arrays(modes)
    ks = _k_ball(n, k_max)
    j_arr = np.array(sites.sites, dtype=np.int64)
    kj2 = ks @ (j_arr * j_arr)           # (K,)
    knorm = np.abs(ks).sum(axis=1)       # (K,)
    sumj = int(np.abs(j_arr).sum())
    two_n1 = 2 * n - 1

    # int64 overflow guard: every factor below is far inside 2^63
    bound = 100 * n * sumj * (two_n1 * k_max * sites.c_j + 2 * 2 * mode_max)
    assert bound < 2 ** 62

    total = ks.shape[0] * L1.shape[0]
    satisfied = 0
    witnesses: List[tuple] = []
    for lo in range(0, ks.shape[0], chunk):
        hi = min(lo + chunk, ks.shape[0])
        a = kj2[lo:hi, None] + L1[None, :]
        rhs = np.maximum(knorm[lo:hi, None], W[None, :])
        ok = 100 * n * np.abs(a) >= rhs
        for b in range(n):
            lhs = np.abs(two_n1 * ks[lo:hi, b:b + 1] * j_arr[b] + 2 * L2[None, :])
            ok |= 100 * n * sumj * lhs >= two_n1 * rhs
        satisfied += int(ok.sum())
        if not ok.all() and len(witnesses) < max_witnesses:
            bad = np.argwhere(~ok)
            for kb_i, l_i in bad[: max_witnesses - len(witnesses)]:
                witnesses.append((tuple(int(v) for v in ks[lo + kb_i]),
                                  _describe_l(int(l_i), structure, modes)))
    return DichotomyAudit(total, satisfied, witnesses)


# ---------------------------------------------------------------------------
# assumption audit
# ---------------------------------------------------------------------------

@dataclass
class AssumptionAudit:
    m: float
    m1: float
    m2: float
    m3_estimate: float
    witnesses: Dict[str, object] = field(default_factory=dict)


def audit_assumptions(freq: FrequencyData, k_max: int = 20, mode_max: int = 60,
                      chunk: int = 512) -> AssumptionAudit:
    """Best constants realized on the enumerated range.

    m from min |Omega_i - Omega_j| / |i^2 - j^2| (i, j in Z_* and 0,
    Omega_0 = 0); M1/M2 from grid difference quotients (parameter metric
    is the max-norm); M3 from the minimum over all divisor specs of
    (inf_grid |D| + twist)/max{|k|, sum|j l_j|} with the twist taken
    along the unit xi-gradient direction.
    """
    sites = freq.sites
    grid = freq.grid
    n = sites.n
    modes = np.array([0] + [j for j in range(-mode_max, mode_max + 1)
                            if j != 0 and j not in sites.sites], dtype=float)
    omega_ext = modes[None, :] ** 2 + freq.c_values[:, None] * modes[None, :]
    sq = modes ** 2
    m_best = math.inf
    m_wit = None
    for a in range(len(modes)):
        denom = np.abs(sq - sq[a])
        mask = denom > 0
        if not mask.any():
            continue
        ratios = np.abs(omega_ext[:, mask] - omega_ext[:, a:a + 1]) / denom[None, mask]
        g, idx = np.unravel_index(np.argmin(ratios), ratios.shape)
        if ratios[g, idx] < m_best:
            m_best = float(ratios[g, idx])
            m_wit = (int(modes[a]), int(modes[mask][idx]), int(g))

    m1 = 0.0
    m2 = 0.0
    m1_wit = m2_wit = None
    for g, h in grid.pairs:
        dxi = grid.pair_distance(g, h)
        if dxi == 0:
            continue
        q1 = float(np.max(np.abs(freq.omega[g] - freq.omega[h]))) / dxi
        dc = abs(freq.c_values[g] - freq.c_values[h])
        q2 = dc / dxi   # sup_j |j|^{-1} |Delta Omega_j| = |Delta c| for affine maps
        if q1 > m1:
            m1, m1_wit = q1, (g, h)
        if q2 > m2:
            m2, m2_wit = q2, (g, h)

    L1, L2, W, structure, marr = _l_family_arrays(
        np.array([j for j in range(-mode_max, mode_max + 1)
                  if j != 0 and j not in sites.sites], dtype=np.int64))
    ks = _k_ball(n, k_max)
    j_arr = np.array(sites.sites, dtype=float)
    kj2 = ks.astype(float) @ (j_arr * j_arr)
    knorm = np.abs(ks).sum(axis=1).astype(float)
    xi = grid.points
    m3_best = math.inf
    m3_wit = None
    zero_divisors: List[tuple] = []
    for lo in range(0, ks.shape[0], chunk):
        hi = min(lo + chunk, ks.shape[0])
        kc = ks[lo:hi].astype(float)
        ipart = kj2[lo:hi, None] + L1[None, :].astype(float)
        gs = [kc[:, b:b + 1] * j_arr[b] + 2.0 * L2[None, :] / (2 * n - 1)
              for b in range(n)]
        dmin = None
        for gpt in range(grid.count):
            d = ipart.copy()
            for b in range(n):
                d += gs[b] * xi[gpt, b]
            d = np.abs(d)
            dmin = d if dmin is None else np.minimum(dmin, d)
        gsq = sum(g * g for g in gs)
        ginf = np.maximum.reduce([np.abs(g) for g in gs])
        twist = np.divide(gsq, ginf, out=np.zeros_like(gsq), where=ginf > 0)
        denom = np.maximum(knorm[lo:hi, None], W[None, :].astype(float))
        value = dmin + twist
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(denom > 0, value / denom, np.inf)
        g_i, l_i = np.unravel_index(np.argmin(ratio), ratio.shape)
        if ratio[g_i, l_i] < m3_best:
            m3_best = float(ratio[g_i, l_i])
            m3_wit = (tuple(int(v) for v in ks[lo + g_i]),
                      _describe_l(int(l_i), structure, marr))
        if len(zero_divisors) < 8:
            zd = np.argwhere((value == 0) & (denom > 0))
            for a_i, b_i in zd[: 8 - len(zero_divisors)]:
                zero_divisors.append((tuple(int(v) for v in ks[lo + a_i]),
                                      _describe_l(int(b_i), structure, marr)))

    return AssumptionAudit(
        m=m_best, m1=m1, m2=m2, m3_estimate=m3_best,
        witnesses={"m": m_wit, "m1_pair": m1_wit, "m2_pair": m2_wit,
                   "m3": m3_wit, "zero_divisors": zero_divisors},
    )


# ---------------------------------------------------------------------------
# resonance zones and measure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasureDomain:
    """Axis-aligned box with a regular cell grid for measure estimates."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    res: Tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or len(self.lo) != len(self.res):
            raise ValueError("dimension mismatch")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("empty box")
        if any(r < 1 for r in self.res):
            raise ValueError("resolution must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def cell_volume(self) -> float:
        return math.prod((h - l) / r for l, h, r in zip(self.lo, self.hi, self.res))

    @property
    def volume(self) -> float:
        return math.prod(h - l for l, h in zip(self.lo, self.hi))

    def centers(self) -> np.ndarray:
        axes = [l + (h - l) * (np.arange(r) + 0.5) / r
                for l, h, r in zip(self.lo, self.hi, self.res)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_diag(self) -> float:
        return math.sqrt(sum(((h - l) / r) ** 2
                             for l, h, r in zip(self.lo, self.hi, self.res)))


def halfspace_box_volume(lo, hi, g, u: float) -> float:
    """Volume of {xi in box : g . xi <= u} by inclusion-exclusion."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    g = np.asarray(g, dtype=float)
    w = hi - lo
    u = u - float(g @ lo)
    # reflect negative directions onto [0, w]
    a = g * w
    for t in range(len(a)):
        if a[t] < 0:
            u -= a[t]
            a[t] = -a[t]
    active = a > 0
    const_vol = math.prod(float(x) for x in w)
    a = a[active]
    m = len(a)
    if m == 0:
        return const_vol if u >= 0 else 0.0
    if u <= 0:
        return 0.0
    if u >= a.sum():
        return const_vol
    total = 0.0
    for sz in range(m + 1):
        for subset in combinations(range(m), sz):
            v = u - sum(a[t] for t in subset)
            if v > 0:
                total += (-1) ** sz * v ** m
    frac = total / (math.factorial(m) * math.prod(float(x) for x in a))
    return const_vol * frac


def slab_box_volume(lo, hi, g, c0: float, t: float) -> float:
    """Measure of {xi in box : |c0 + g . xi| < t} for an affine divisor."""
    g = np.asarray(g, dtype=float)
    if np.all(g == 0):
        vol = math.prod(h - l for l, h in zip(lo, hi))
        return vol if abs(c0) < t else 0.0
    return halfspace_box_volume(lo, hi, g, t - c0) - halfspace_box_volume(lo, hi, g, -t - c0)


@dataclass
class ResonanceZone:
    spec: DivisorSpec
    alpha: float
    tau: float
    weight: float
    threshold: float
    excluded_mask: np.ndarray
    min_abs_divisor: float
    analytic_measure: Optional[float] = None

    @property
    def excluded_fraction(self) -> float:
        return float(self.excluded_mask.mean()) if self.excluded_mask.size else 0.0


def resonance_zone(spec: DivisorSpec, alpha: float, tau: float,
                   freq: FrequencyData,
                   domain: Optional[MeasureDomain] = None) -> ResonanceZone:
    """Mask of grid points where the divisor falls below its threshold.

    The weight is <l>_inf for the general family and |j| for the
    opposite-pair family; for affine divisors over a box domain the
    analytic slab measure is attached.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sites = freq.sites
    if spec.is_opposite_pair():
        weight = float(abs(spec.l[0][0]))
    else:
        weight = float(spec.l_inf_weight)
    thr = alpha * weight / max(1, spec.k_norm) ** tau
    vals = divisor_on_freq(spec, freq)
    mask = np.abs(vals) < thr
    analytic = None
    if domain is not None:
        g = [float(x) for x in gradient(spec, sites)]
        analytic = slab_box_volume(domain.lo, domain.hi, g,
                                   float(integer_part(spec, sites)), thr)
    return ResonanceZone(spec, alpha, tau, weight, thr, mask,
                         float(np.min(np.abs(vals))), analytic)


@dataclass
class ExclusionLedger:
    """Per-step record of resonance zones and the cumulative mask."""

    grid_count: int
    steps: List[dict] = field(default_factory=list)

    def add_step(self, nu: int, zones_general: List[ResonanceZone],
                 zones_pair: List[ResonanceZone]) -> np.ndarray:
        mask = np.zeros(self.grid_count, dtype=bool)
        for z in zones_general:
            mask |= z.excluded_mask
        pair_mask = np.zeros(self.grid_count, dtype=bool)
        for z in zones_pair:
            pair_mask |= z.excluded_mask
        self.steps.append({
            "nu": nu,
            "general": zones_general,
            "pair": zones_pair,
            "mask_general": mask,
            "mask_pair": pair_mask,
        })
        return mask | pair_mask

    def cumulative_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid_count, dtype=bool)
        for st in self.steps:
            mask |= st["mask_general"] | st["mask_pair"]
        return mask

    def family_masks(self) -> Tuple[np.ndarray, np.ndarray]:
        g = np.zeros(self.grid_count, dtype=bool)
        p = np.zeros(self.grid_count, dtype=bool)
        for st in self.steps:
            g |= st["mask_general"]
            p |= st["mask_pair"]
        return g, p


def measure_report(ledger: ExclusionLedger, alpha: float, rho: float,
                   sweep: Optional[Dict[float, float]] = None) -> dict:
    """Cumulative excluded fraction, per-family totals and, when an
    alpha-doubling sweep {alpha: excluded measure} is supplied, the
    per-doubling ratios of the excluded measure."""
    cum = ledger.cumulative_mask()
    gmask, pmask = ledger.family_masks()
    per_step_pair = [float(st["mask_pair"].mean()) for st in ledger.steps]
    report = {
        "alpha": alpha,
        "rho": rho,
        "excluded_fraction": float(cum.mean()) if cum.size else 0.0,
        "theta1_fraction": float(gmask.mean()) if gmask.size else 0.0,
        "theta2_fraction": float(pmask.mean()) if pmask.size else 0.0,
        "theta2_per_step_fraction": per_step_pair,
        "realized_c1": (float(cum.mean()) / (rho ** (max(ledger_dim(ledger), 2) - 1) * alpha)
                        if alpha > 0 and rho > 0 and cum.size else 0.0),
    }
    if sweep:
        alphas = sorted(sweep)
        ratios = []
        for a0, a1 in zip(alphas, alphas[1:]):
            lo, hi_v = sweep[a0], sweep[a1]
            ratios.append(hi_v / lo if lo > 0 else math.inf)
        report["sweep_alphas"] = alphas
        report["sweep_measures"] = [sweep[a] for a in alphas]
        report["sweep_ratios"] = ratios
    return report


def ledger_dim(ledger: ExclusionLedger) -> int:
    for st in ledger.steps:
        for z in st["general"] + st["pair"]:
            return len(z.spec.k)
    return 2


# -- bulk zone enumeration (vectorized over specs) --------------------------

def enumerate_spec_arrays(sites: SiteSet, k_max: int, mode_max: int,
                          family: str) -> dict:
    """Integer arrays describing all specs of one family.

    family 'general': k != 0, |l| <= 2, l not of the opposite-pair form
    (includes l = 0); family 'pair': all k, l = e_{-j} - e_j with j > 0.
    Returns dict with ks (S, n), ipart (S,), grads computed on demand,
    weight (S,), and reconstruction info.
    """
    n = sites.n
    j_arr = np.array(sites.sites, dtype=np.int64)
    if family == "pair":
        ks = _k_ball(n, k_max)
        jj = np.array([j for j in range(1, mode_max + 1)
                       if j not in sites.sites and -j not in sites.sites], dtype=np.int64)
        K, M = ks.shape[0], jj.shape[0]
        ks_full = np.repeat(ks, M, axis=0)
        j_full = np.tile(jj, K)
        # l = e_{-j} - e_j:  integer part adds j^2 - j^2 = 0, L2 = -2j
        ipart = ks_full @ (j_arr * j_arr)
        l2 = -2 * j_full
        weight = j_full.astype(float)
        return {"ks": ks_full, "ipart": ipart, "l2": l2, "weight": weight,
                "mode": j_full, "family": "pair"}

    modes = np.array([j for j in range(-mode_max, mode_max + 1)
                      if j != 0 and j not in sites.sites], dtype=np.int64)
    L1, L2, W, structure, marr = _l_family_arrays(modes)
    # drop opposite pairs from the general family
    keep = np.ones(L1.shape[0], dtype=bool)
    off = 1 + 4 * len(modes)
    npairs = len(modes) * (len(modes) - 1) // 2
    ii, jj_ = (np.triu_indices(len(modes), k=1) if len(modes) >= 2 else (None, None))
    if ii is not None:
        for block, (s1, s2) in enumerate(((1, 1), (-1, -1), (1, -1), (-1, 1))):
            if s1 * s2 == -1:
                opp = modes[ii] == -modes[jj_]
                keep[off + block * npairs: off + (block + 1) * npairs][opp] = False
    ks = _k_ball(n, k_max)
    ks = ks[np.abs(ks).sum(axis=1) > 0]
    K, S = ks.shape[0], int(keep.sum())
    kj2 = ks @ (j_arr * j_arr)
    ks_full = np.repeat(ks, S, axis=0)
    ipart = np.repeat(kj2, S) + np.tile(L1[keep], K)
    l2 = np.tile(L2[keep], K)
    weight = np.maximum(1, np.tile(W[keep], K)).astype(float)
    l_index = np.tile(np.flatnonzero(keep), K)
    return {"ks": ks_full, "ipart": ipart, "l2": l2, "weight": weight,
            "l_index": l_index, "structure": structure, "modes": marr,
            "family": "general"}


def bulk_zone_masks(arrs: dict, sites: SiteSet, points: np.ndarray,
                    alpha: float, tau: float, chunk: int = 20000):
    """Union mask over all specs of one family at level alpha, plus the
    per-spec excluded counts (for zone tables).  Affine step-0 divisors."""
    n = sites.n
    j_arr = np.array(sites.sites, dtype=float)
    ks = arrs["ks"]
    total_mask = np.zeros(points.shape[0], dtype=bool)
    counts = np.zeros(ks.shape[0], dtype=np.int64)
    knorm = np.abs(ks).sum(axis=1).astype(float)
    thr_all = alpha * arrs["weight"] / np.maximum(1.0, knorm) ** tau
    for lo in range(0, ks.shape[0], chunk):
        hi = min(lo + chunk, ks.shape[0])
        kc = ks[lo:hi].astype(float)
        g = kc * j_arr[None, :] + (2.0 * arrs["l2"][lo:hi, None] / (2 * n - 1))
        d = arrs["ipart"][lo:hi, None].astype(float) + g @ points.T
        mask = np.abs(d) < thr_all[lo:hi, None]
        counts[lo:hi] = mask.sum(axis=1)
        total_mask |= mask.any(axis=0)
    return total_mask, counts, thr_all
