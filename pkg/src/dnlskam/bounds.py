"""Numeric spot-verification of the five auxiliary inequalities backing
the scheme: the exponential lattice sums, the tau-norm vs majorant norm
comparison, the matrix-field lift, the commutator estimate and the
flow-composition estimate.

Random truncated instances satisfying each hypothesis are generated and
both sides of the inequality are evaluated; failures are reported with
their witness, never raised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional

import numpy as np

from .homological import FourierFunction
from .indices import SiteSet
from .series import (FormalSeries, NormWeights, TruncationBudget, VectorField,
                     hamiltonian_vector_field, lie_transform, majorant_norm,
                     vf_commutator)


@dataclass
class LemmaReport:
    name: str
    passed: int = 0
    failed: int = 0
    witnesses: List[dict] = field(default_factory=list)

    def record(self, ok: bool, witness: Optional[dict] = None):
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            if witness is not None and len(self.witnesses) < 8:
                self.witnesses.append(witness)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "failed": self.failed,
                "witnesses": self.witnesses}


def _k_ball_iter(n: int, kmax: int):
    rng = range(-kmax, kmax + 1)
    for k in product(rng, repeat=n):
        if sum(abs(v) for v in k) <= kmax:
            yield k


def check_lattice_sums(rng: np.random.Generator, n: int, kmax: int) -> List[bool]:
    """sum e^{-2|k|sigma} <= (1+e)^n/sigma^n;
    sum e^{-2|k|sigma}|k|^nu <= (nu/e)^nu (1+e)^n / sigma^{nu+n};
    sup e^{-|k|sigma}|k|^nu <= (nu/e)^nu / sigma^nu."""
    sigma = float(rng.uniform(0.05, 1.0))
    nu = float(rng.uniform(0.5, 8.0))
    s0 = s1 = 0.0
    sup = 0.0
    for m in range(0, n * kmax + 1):
        count = _l1_sphere_count(n, m)
        s0 += count * math.exp(-2 * m * sigma)
        s1 += count * math.exp(-2 * m * sigma) * m ** nu
        sup = max(sup, math.exp(-m * sigma) * m ** nu)
    e = math.e
    ok0 = s0 <= (1 + e) ** n / sigma ** n * (1 + 1e-12)
    ok1 = s1 <= (nu / e) ** nu * (1 + e) ** n / sigma ** (nu + n) * (1 + 1e-12)
    ok2 = sup <= (nu / e) ** nu / sigma ** nu * (1 + 1e-12)
    return [ok0, ok1, ok2]


def _l1_sphere_count(n: int, m: int) -> int:
    """#{k in Z^n : |k|_1 = m}."""
    if m == 0:
        return 1
    total = 0
    for j in range(1, min(n, m) + 1):
        total += 2 ** j * math.comb(n, j) * math.comb(m - 1, j - 1)
    return total


def _random_fourier(rng: np.random.Generator, sites: SiteSet, kmax: int,
                    nterms: int, momentum: int = 0) -> FourierFunction:
    n = sites.n
    coeffs = {}
    for _ in range(nterms):
        k = tuple(int(v) for v in rng.integers(-kmax, kmax + 1, n))
        if sum(abs(v) for v in k) > kmax:
            continue
        coeffs[k] = complex(rng.normal(), rng.normal())
    return FourierFunction(sites, coeffs, momentum, 1)


def check_tau_norm(rng: np.random.Generator, sites: SiteSet, kmax: int) -> bool:
    """|u|_{s-sigma, tau+1} <= ((tau+1)/e)^{tau+1} sigma^{-(tau+1)} |u|_{s, a, 0}."""
    s = float(rng.uniform(0.2, 0.9))
    sigma = float(rng.uniform(0.05, 0.95)) * s
    tau = float(rng.uniform(1.0, 8.0))
    a_mom = float(rng.uniform(0.0, 0.02))
    u = _random_fourier(rng, sites, kmax, int(rng.integers(1, 12)))
    lhs = float(np.asarray(u.norm_tau(s - sigma, tau)))
    rhs = ((tau + 1) / math.e) ** (tau + 1) / sigma ** (tau + 1) \
        * float(np.asarray(u.norm_majorant(s, a_mom)))
    return lhs <= rhs * (1 + 1e-12)


def _matrix_hamiltonian(sites: SiteSet, budget: TruncationBudget,
                        entries: Dict[tuple, Dict[tuple, complex]]) -> FormalSeries:
    """<M z, zbar> as a series from {(i, j): {k: coeff}}."""
    n = sites.n
    terms = {}
    for (i, j), kk in entries.items():
        for k, c in kk.items():
            key = (k, (0,) * n, ((i, 1),), ((j, 1),))
            terms[key] = terms.get(key, 0j) + c
    return FormalSeries(sites, budget, terms)


def check_matrix_lift(rng: np.random.Generator, sites: SiteSet,
                      budget: TruncationBudget, kmax: int) -> Optional[bool]:
    """If every matrix element satisfies
    sum_k |F_ijk| e^{|k|(s-sigma)} e^{a|pi(k,i-j)|}
      <= (1/max{|i|,|j|}) sum_k |R_ijk| e^{|k|s} e^{a|pi(k,i-j)|},
    then ||X_<Fz,zbar>||_{s-2sigma,r,p,a} <= (3/sigma) ||X_<Rz,zbar>||_{s,r,p-1,a}."""
    s = float(rng.uniform(0.3, 0.9))
    sigma = float(rng.uniform(0.1, 0.45)) * min(1.0, s / 2)
    r = float(rng.uniform(0.1, 0.9))
    a_exp = float(rng.uniform(0.0, 0.1))
    a_mom = float(rng.uniform(0.0, 0.02))
    p = 2.0
    modes = sites.normal_modes
    npairs = int(rng.integers(1, 6))
    rent: Dict[tuple, Dict[tuple, complex]] = {}
    fent: Dict[tuple, Dict[tuple, complex]] = {}
    for _ in range(npairs):
        i = int(modes[rng.integers(0, len(modes))])
        j = int(modes[rng.integers(0, len(modes))])
        kk = {}
        for _ in range(int(rng.integers(1, 5))):
            k = tuple(int(v) for v in rng.integers(-kmax, kmax + 1, sites.n))
            if sum(abs(v) for v in k) <= kmax:
                kk[k] = complex(rng.normal(), rng.normal())
        if not kk:
            continue
        rent.setdefault((i, j), {}).update(kk)
    if not rent:
        return None
    for (i, j), kk in rent.items():
        rf = FourierFunction(sites, kk, i - j, 1)
        rmass = float(np.asarray(rf.norm_majorant(s, a_mom)))
        scaled = {k: c * float(rng.uniform(0.2, 1.0)) for k, c in kk.items()}
        ff = FourierFunction(sites, scaled, i - j, 1)
        fmass = float(np.asarray(ff.norm_majorant(s - sigma, a_mom)))
        target = rmass / max(abs(i), abs(j))
        scale = float(rng.uniform(0.1, 1.0)) * target / fmass if fmass > 0 else 0.0
        fent[(i, j)] = {k: c * scale for k, c in scaled.items()}
    hr = _matrix_hamiltonian(sites, budget, rent)
    hf = _matrix_hamiltonian(sites, budget, fent)
    xr = hamiltonian_vector_field(hr)
    xf = hamiltonian_vector_field(hf)
    w_lhs = NormWeights(s - 2 * sigma, r, p, a_exp, a_mom, domain_p=p)
    w_rhs = NormWeights(s, r, p - 1, a_exp, a_mom, domain_p=p)
    lhs = float(np.asarray(majorant_norm(xf, w_lhs)))
    rhs = 3.0 / sigma * float(np.asarray(majorant_norm(xr, w_rhs)))
    return lhs <= rhs * (1 + 1e-12)


def _random_field(rng: np.random.Generator, sites: SiteSet, budget: TruncationBudget,
                  kmax: int, nterms: int) -> VectorField:
    n = sites.n
    modes = sites.normal_modes
    comp: Dict[tuple, FormalSeries] = {}
    kinds: List[tuple] = [("x", b) for b in range(n)] + [("y", b) for b in range(n)] \
        + [("z", j) for j in modes] + [("zbar", j) for j in modes]
    for _ in range(nterms):
        v = kinds[int(rng.integers(0, len(kinds)))]
        k = tuple(int(x) for x in rng.integers(-2, 3, n))
        if sum(abs(x) for x in k) > kmax:
            continue
        i = tuple(int(x) for x in rng.integers(0, 2, n))
        al = []
        be = []
        for _ in range(int(rng.integers(0, 3))):
            (al if rng.random() < 0.5 else be).append(
                (int(modes[rng.integers(0, len(modes))]), 1))
        key = (k, i, tuple(sorted(dict(al).items())), tuple(sorted(dict(be).items())))
        if not budget.admits(key):
            continue
        c = complex(rng.normal(), rng.normal())
        ser = comp.setdefault(v, FormalSeries.zero(sites, budget))
        ser.terms[key] = ser.terms.get(key, 0j) + c
    return VectorField(sites, budget, comp, 1)


def check_commutator(rng: np.random.Generator, sites: SiteSet,
                     budget: TruncationBudget, kmax: int) -> bool:
    """||[X,Y]||_{s',r',q,a} <= 2^{2n+3} max{s/(s-s'), r/(r-r')}
    ||X||_{s,r,q,a} ||Y||_{s,r,p,a}."""
    n = sites.n
    s = float(rng.uniform(0.3, 0.9))
    r = float(rng.uniform(0.3, 0.9))
    sp = float(rng.uniform(0.5, 0.95)) * s
    rp = float(rng.uniform(0.5, 0.95)) * r
    sp, rp = max(sp, s / 2), max(rp, r / 2)
    a_exp = float(rng.uniform(0.0, 0.1))
    a_mom = float(rng.uniform(0.0, 0.02))
    p, q = 2.0, 1.0
    X = _random_field(rng, sites, budget, kmax, int(rng.integers(1, 6)))
    Y = _random_field(rng, sites, budget, kmax, int(rng.integers(1, 6)))
    comm = vf_commutator(X, Y)
    shrink = max(s / (s - sp), r / (r - rp))
    w_out = NormWeights(sp, rp, q, a_exp, a_mom, domain_p=p)
    w_x = NormWeights(s, r, q, a_exp, a_mom, domain_p=p)
    w_y = NormWeights(s, r, p, a_exp, a_mom, domain_p=p)
    lhs = float(np.asarray(majorant_norm(comm, w_out)))
    rhs = 2.0 ** (2 * n + 3) * shrink * float(np.asarray(majorant_norm(X, w_x))) \
        * float(np.asarray(majorant_norm(Y, w_y)))
    return lhs <= rhs * (1 + 1e-12)


def _random_hamiltonian(rng: np.random.Generator, sites: SiteSet,
                        budget: TruncationBudget, kmax: int, nterms: int) -> FormalSeries:
    n = sites.n
    modes = sites.normal_modes
    terms = {}
    for _ in range(nterms):
        k = tuple(int(x) for x in rng.integers(-2, 3, n))
        if sum(abs(x) for x in k) > kmax:
            continue
        i = tuple(int(x) for x in rng.integers(0, 2, n))
        al = {}
        be = {}
        for _ in range(int(rng.integers(0, 3))):
            j = int(modes[rng.integers(0, len(modes))])
            d = al if rng.random() < 0.5 else be
            d[j] = d.get(j, 0) + 1
        key = (k, i, tuple(sorted(al.items())), tuple(sorted(be.items())))
        if budget.admits(key):
            terms[key] = terms.get(key, 0j) + complex(rng.normal(), rng.normal())
    return FormalSeries(sites, budget, terms)


def check_flow_composition(rng: np.random.Generator, sites: SiteSet,
                           budget: TruncationBudget, kmax: int) -> Optional[bool]:
    """Under 2^{2n+5} e max{s/(s-s'), r/(r-r')} ||X_F||_{s,r,p,a} < 1:
    ||X_{H o Phi_F^1}||_{s',r',q,a} <= ||X_H||_{s,r,q,a} / (1 - theta)."""
    n = sites.n
    s = float(rng.uniform(0.3, 0.9))
    r = float(rng.uniform(0.3, 0.9))
    sp = max(float(rng.uniform(0.5, 0.95)) * s, s / 2)
    rp = max(float(rng.uniform(0.5, 0.95)) * r, r / 2)
    a_exp = float(rng.uniform(0.0, 0.1))
    a_mom = float(rng.uniform(0.0, 0.02))
    p, q = 2.0, 1.0
    shrink = max(s / (s - sp), r / (r - rp))
    H = _random_hamiltonian(rng, sites, budget, kmax, int(rng.integers(1, 6)))
    F = _random_hamiltonian(rng, sites, budget, kmax, int(rng.integers(1, 4)))
    if H.is_zero() or F.is_zero():
        return None
    w_f = NormWeights(s, r, p, a_exp, a_mom, domain_p=p)
    xf_norm = float(np.asarray(majorant_norm(hamiltonian_vector_field(F), w_f)))
    if xf_norm == 0:
        return None
    theta = float(rng.uniform(0.05, 0.8))
    F = F.scale(theta / (2.0 ** (2 * n + 5) * math.e * shrink * xf_norm))
    HF = lie_transform(H, F, budget=budget)
    w_out = NormWeights(sp, rp, q, a_exp, a_mom, domain_p=p)
    # the right side measures X_H over the source domain D(s, r) in the
    # target's weighting; with F = 0 both sides then agree and the
    # inequality is purely about the flow overhead
    w_h = NormWeights(sp, rp, q, a_exp, a_mom, domain_p=p, domain_s=s, domain_r=r)
    lhs = float(np.asarray(majorant_norm(hamiltonian_vector_field(HF), w_out)))
    rhs = float(np.asarray(majorant_norm(hamiltonian_vector_field(H), w_h))) / (1 - theta)
    return lhs <= rhs * (1 + 1e-12)


def verify_appendix_bounds(sample_count: int, rng_seed: int, kmax_sums: int = 40,
                           kmax_fields: int = 4, n: int = 2) -> Dict[str, dict]:
    """Evaluate both sides of each auxiliary inequality on random
    hypothesis-satisfying instances; failures are data (reported with a
    witness), not errors."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    sites = SiteSet((-1, 2), 5)
    budget = TruncationBudget(6, max(kmax_sums, 8), 5)
    reports = {name: LemmaReport(name) for name in
               ("lattice_sums", "tau_norm", "matrix_lift", "commutator", "flow")}
    for idx in range(sample_count):
        for ok in check_lattice_sums(rng, n, kmax_sums):
            reports["lattice_sums"].record(ok, {"sample": idx})
        reports["tau_norm"].record(check_tau_norm(rng, sites, kmax_sums),
                                   {"sample": idx})
        res = check_matrix_lift(rng, sites, budget, kmax_fields)
        if res is not None:
            reports["matrix_lift"].record(res, {"sample": idx})
        reports["commutator"].record(check_commutator(rng, sites, budget, kmax_fields),
                                     {"sample": idx})
        res = check_flow_composition(rng, sites, budget, kmax_fields)
        if res is not None:
            reports["flow"].record(res, {"sample": idx})
    return {k: v.to_dict() for k, v in reports.items()}
