import math

import numpy as np
import pytest

from dnlskam.indices import SiteSet, sign
from dnlskam.series import (FormalSeries, NormWeights, ParameterGrid,
                            TruncationBudget, check_momentum_conservation,
                            hamiltonian_vector_field, lie_transform,
                            lipschitz_seminorm, majorant_norm, poisson_bracket,
                            series_from_binary, series_from_text,
                            series_to_binary, series_to_text, sup_norm_sampled,
                            taylor_truncate_R, weighted_phase_norm)

SITES = SiteSet((-1, 2), 6)
BUDGET = TruncationBudget(6, 8, 6)


def mono(key_kwargs, coeff=1.0 + 0j, sites=SITES, budget=BUDGET):
    s = FormalSeries.zero(sites, budget)
    key = s.key(**key_kwargs)
    return FormalSeries.monomial(sites, budget, key, coeff)


def rand_series(rng, nterms=8, sites=SITES, budget=BUDGET):
    out = FormalSeries.zero(sites, budget)
    modes = sites.normal_modes
    for _ in range(nterms):
        k = tuple(int(v) for v in rng.integers(-2, 3, sites.n))
        i = tuple(int(v) for v in rng.integers(0, 2, sites.n))
        al = {}
        be = {}
        for _ in range(int(rng.integers(0, 3))):
            j = int(modes[rng.integers(0, len(modes))])
            d = al if rng.random() < 0.5 else be
            d[j] = d.get(j, 0) + 1
        key = (k, i, tuple(sorted(al.items())), tuple(sorted(be.items())))
        if budget.admits(key):
            out.terms[key] = out.terms.get(key, 0j) + complex(rng.normal(), rng.normal())
    return out


def series_close(a: FormalSeries, b: FormalSeries, tol=1e-10) -> float:
    keys = set(a.terms) | set(b.terms)
    scale = max([abs(c) for c in a.terms.values()] +
                [abs(c) for c in b.terms.values()] + [1e-30])
    worst = 0.0
    for k in keys:
        worst = max(worst, abs(a.terms.get(k, 0j) - b.terms.get(k, 0j)) / scale)
    return worst


# -- bracket ----------------------------------------------------------------

def test_bracket_canonical_pairs():
    # {x_b, y_b} = sigma_{j_b}
    for b, jb in enumerate(SITES.sites):
        xb = mono({"k": tuple(1 if t == b else 0 for t in range(2))})
        # x_b itself is not a monomial; use H = e^{i x_b} instead: test z pair
    # {z_j, zbar_j} = -i sigma_j as series constant
    for j in (1, -3):
        zj = mono({"al": ((j, 1),)})
        zbj = mono({"be": ((j, 1),)})
        br = poisson_bracket(zj, zbj)
        const = br.coeff(zj.key())
        assert abs(const - (-1j * sign(j))) < 1e-14


def test_bracket_lambda_quartic_divisor():
    # q-frame: {Lambda, q_j qbar_k q_l qbar_m} = -i (k^2+m^2-j^2-l^2) monomial
    qsites = SiteSet((), 6)
    qbud = TruncationBudget(6, 0, 6)
    lam = FormalSeries.zero(qsites, qbud)
    for j in qsites.normal_modes:
        lam.terms[((), (), ((j, 1),), ((j, 1),))] = complex(sign(j) * j * j)
    j, k, l, m = 1, 2, 3, 2
    key = ((), (), tuple(sorted({1: 1, 3: 1}.items())), ((2, 2),))
    monoq = FormalSeries.monomial(qsites, qbud, key, 1.0 + 0j)
    br = poisson_bracket(lam, monoq)
    expected = -1j * (k ** 2 + m ** 2 - j ** 2 - l ** 2)
    assert abs(br.coeff(key) - expected) < 1e-12
    assert len(br.terms) == 1


def test_bracket_antisymmetry_and_jacobi():
    # a budget wide enough that no triple-bracket term is truncated:
    # Jacobi holds exactly up to budget degree
    wide = TruncationBudget(30, 60, 6)
    rng = np.random.default_rng(0)
    H = rand_series(rng, budget=wide)
    F = rand_series(rng, budget=wide)
    G = rand_series(rng, budget=wide)
    hf = poisson_bracket(H, F)
    fh = poisson_bracket(F, H)
    assert series_close(hf, fh.scale(-1.0)) < 1e-14
    jac = poisson_bracket(poisson_bracket(H, F), G) + \
        poisson_bracket(poisson_bracket(F, G), H) + \
        poisson_bracket(poisson_bracket(G, H), F)
    scale = max((abs(c) for c in jac.terms.values()), default=0.0)
    base = max(abs(c) for c in hf.terms.values()) if hf.terms else 1.0
    assert scale < 1e-10 * max(base, 1.0)


def test_bracket_momentum_closure_and_grading():
    rng = np.random.default_rng(3)
    modes = SITES.normal_modes
    # build momentum-conserving homogeneous series
    def zero_mom_series(deg):
        out = FormalSeries.zero(SITES, BUDGET)
        while len(out.terms) < 5:
            al = {}
            be = {}
            for _ in range(deg - 1):
                j = int(modes[rng.integers(0, len(modes))])
                d = al if rng.random() < 0.5 else be
                d[j] = d.get(j, 0) + 1
            bal = sum(j * p for j, p in al.items()) - sum(j * p for j, p in be.items())
            # close momentum with one more factor if possible
            need = -bal
            if need != 0 and abs(need) <= 6 and need in modes:
                al[need] = al.get(need, 0) + 1
            elif need != 0 and -need in modes:
                be[-need] = be.get(-need, 0) + 1
            elif need != 0:
                continue
            else:
                j = int(modes[rng.integers(0, len(modes))])
                al[j] = al.get(j, 0) + 1
                be[j] = be.get(j, 0) + 1
            key = ((0, 0), (0, 0), tuple(sorted(al.items())), tuple(sorted(be.items())))
            if BUDGET.admits(key):
                out.terms[key] = complex(rng.normal(), rng.normal())
        return out

    A = zero_mom_series(3)
    B = zero_mom_series(3)
    assert check_momentum_conservation(A) and check_momentum_conservation(B)
    br = poisson_bracket(A, B)
    assert check_momentum_conservation(br)
    # grading: deg d1, d2 series bracket to d1 + d2 - 2
    from dnlskam.series import key_degree
    degs = {key_degree(k) for k in br.terms}
    d1 = {key_degree(k) for k in A.terms}
    d2 = {key_degree(k) for k in B.terms}
    if degs:
        assert degs <= {a + b - 2 for a in d1 for b in d2}


# -- vector field -----------------------------------------------------------

def test_hamiltonian_vector_field_normal_form():
    # H = sigma_{j_b} omega_b y_b -> x-component omega_b
    omega = 2.7
    b = 1
    jb = SITES.sites[b]
    H = mono({"i": (0, 1)}, coeff=sign(jb) * omega)
    X = hamiltonian_vector_field(H)
    comp = X.components[("x", b)]
    assert abs(comp.coeff(H.key()) - omega) < 1e-14
    assert ("y", b) not in X.components
    # H = sigma_j Omega_j z_j zbar_j
    Om = 1.3
    j = 3
    H2 = mono({"al": ((j, 1),), "be": ((j, 1),)}, coeff=sign(j) * Om)
    X2 = hamiltonian_vector_field(H2)
    zc = X2.components[("z", j)]
    assert abs(zc.coeff(H2.key(al=((j, 1),))) - (-1j * Om)) < 1e-14
    zbc = X2.components[("zbar", j)]
    assert abs(zbc.coeff(H2.key(be=((j, 1),))) - (1j * Om)) < 1e-14
    # zero series -> zero field
    X3 = hamiltonian_vector_field(FormalSeries.zero(SITES, BUDGET))
    assert not X3.nonzero().components


# -- lie transform ----------------------------------------------------------

def test_lie_transform_identities():
    rng = np.random.default_rng(1)
    H = rand_series(rng)
    F0 = FormalSeries.zero(SITES, BUDGET)
    assert series_close(lie_transform(H, F0), H) == 0.0
    # commuting flows: both depend only on y
    Hy = mono({"i": (1, 0)}, 2.0) + mono({"i": (0, 1)}, -0.5)
    Fy = mono({"i": (1, 1)}, 0.3)
    assert series_close(lie_transform(Hy, Fy), Hy) < 1e-15


def test_lie_transform_respects_brackets():
    # {u o Phi, v o Phi} = {u, v} o Phi up to budget degree
    rng = np.random.default_rng(5)
    F = rand_series(rng, nterms=4).scale(0.05)
    # keep F at low degree so the Lie series terminates quickly
    F = F.select(lambda k: 3 <= sum(2 * x for x in k[1]) +
                 sum(p for _, p in k[2]) + sum(p for _, p in k[3]))
    u = mono({"al": ((1, 1),)})
    v = mono({"be": ((1, 1),)})
    uv = poisson_bracket(u, v)
    lhs = poisson_bracket(lie_transform(u, F), lie_transform(v, F))
    rhs = lie_transform(uv, F)
    assert series_close(lhs, rhs) < 1e-10


# -- 2-jet ------------------------------------------------------------------

def test_taylor_truncate_shapes():
    P = (mono({"i": (2, 0)}, 1.0)                 # y^2: excluded from R
         + mono({"al": ((3, 1),), "be": ((3, 1),)}, 2.0)   # diag z zbar
         + mono({"k": (1, 0), "al": ((1, 1),), "be": ((3, 1),)}, 3.0)  # off-diag
         + mono({"al": ((1, 1), (3, 1))}, 4.0)    # zz block
         + mono({"i": (1, 0), "al": ((1, 1),), "be": ((1, 1),)}, 5.0))  # deg 4
    R, normal = taylor_truncate_R(P)
    keys = set(R.terms)
    assert mono({"i": (2, 0)}).key(i=(2, 0)) not in keys
    assert P.key(al=((3, 1),), be=((3, 1),)) in keys
    assert P.key(k=(1, 0), al=((1, 1),), be=((3, 1),)) in keys
    assert P.key(al=((1, 1), (3, 1))) in keys
    nkeys = set(normal.terms)
    assert P.key(al=((3, 1),), be=((3, 1),)) in nkeys
    assert P.key(k=(1, 0), al=((1, 1),), be=((3, 1),)) not in nkeys


def test_momentum_conservation_check():
    # e^{i x_1} z_3 zbar_4 with J = {-1, 2}: momentum -1 + 3 - 4 = -2 != 0
    s = mono({"k": (1, 0), "al": ((3, 1),), "be": ((4, 1),)})
    assert not check_momentum_conservation(s)
    assert check_momentum_conservation(FormalSeries.zero(SITES, BUDGET))


# -- norms ------------------------------------------------------------------

def test_weighted_phase_norm_normalization():
    w = NormWeights(s=0.5, r=0.3, p_or_q=2.0, a_exp=0.1)
    assert weighted_phase_norm([], [], {}, {}, w) == 0.0
    assert abs(weighted_phase_norm([0.5], [], {}, {}, w) - 1.0) < 1e-14
    j = 3
    zval = w.r * math.exp(-w.a_exp * j) * j ** -2.0
    assert abs(weighted_phase_norm([], [], {j: zval}, {}, w) - 1.0) < 1e-14


def test_majorant_single_term():
    # single x-component monomial coef e^{ik.x} with zero momentum
    w = NormWeights(s=0.4, r=0.3, p_or_q=1.0, a_exp=0.05, a_mom=0.1, domain_p=2.0)
    from dnlskam.series import VectorField
    coef = 1.7
    k = (2, 1)  # momentum -2 + 2 = 0 with J = {-1, 2}
    ser = mono({"k": k}, coef)
    X = VectorField(SITES, BUDGET, {("x", 0): ser})
    val = majorant_norm(X, w)
    assert abs(val - coef * math.exp(3 * w.s) / w.s) < 1e-12
    empty = VectorField(SITES, BUDGET, {})
    assert majorant_norm(empty, w) == 0.0


def test_majorant_dominates_sampled_sup():
    rng = np.random.default_rng(11)
    w = NormWeights(s=0.4, r=0.3, p_or_q=1.0, a_exp=0.05, a_mom=0.02, domain_p=2.0)
    for _ in range(5):
        H = rand_series(rng, nterms=6)
        X = hamiltonian_vector_field(H)
        maj = majorant_norm(X, w)
        sup = sup_norm_sampled(X, w, rng, samples=24)
        assert sup <= maj * (1 + 1e-9)


def test_majorant_subadditive_homogeneous():
    rng = np.random.default_rng(13)
    w = NormWeights(s=0.4, r=0.3, p_or_q=1.0, a_exp=0.0, a_mom=0.01, domain_p=2.0)
    A = hamiltonian_vector_field(rand_series(rng))
    B = hamiltonian_vector_field(rand_series(rng))
    from dnlskam.series import VectorField
    comp = dict(A.components)
    for v, s in B.components.items():
        comp[v] = comp[v] + s if v in comp else s
    AB = VectorField(SITES, BUDGET, comp)
    assert majorant_norm(AB, w) <= majorant_norm(A, w) + majorant_norm(B, w) + 1e-12
    c = -2.5 + 1.0j
    assert abs(majorant_norm(A.scale(c), w) - abs(c) * majorant_norm(A, w)) < 1e-9


def test_lipschitz_seminorm_affine():
    # field linear in xi: quotient equals the slope field norm on an axis pair
    grid = ParameterGrid(np.array([[0.0, 0.0], [0.2, 0.0]]), ((0, 1),))
    w = NormWeights(s=0.4, r=0.3, p_or_q=1.0, a_exp=0.0, a_mom=0.0, domain_p=2.0)
    slope = 3.0
    vals = np.array([0.0, slope * 0.2], dtype=complex)
    ser = FormalSeries(SITES, BUDGET, {mono({"al": ((1, 1),)}).key(al=((1, 1),)): vals},
                       width=2)
    X = hamiltonian_vector_field(ser)
    lip = lipschitz_seminorm(X, grid, w)
    sser = mono({"al": ((1, 1),)}, slope)
    expected = majorant_norm(hamiltonian_vector_field(sser), w)
    assert abs(lip - expected) < 1e-12
    const = FormalSeries(SITES, BUDGET,
                         {mono({"al": ((1, 1),)}).key(al=((1, 1),)): np.array([1.0 + 0j, 1.0 + 0j])},
                         width=2)
    assert lipschitz_seminorm(hamiltonian_vector_field(const), grid, w) == 0.0


# -- serialization ----------------------------------------------------------

def test_text_roundtrip_bit_exact():
    rng = np.random.default_rng(17)
    H = rand_series(rng)
    txt = series_to_text(H)
    H2 = series_from_text(txt)
    assert set(H.terms) == set(H2.terms)
    for k, c in H.terms.items():
        assert H2.terms[k] == c
    assert series_to_text(H2) == txt


def test_binary_roundtrip_bit_exact():
    rng = np.random.default_rng(19)
    H = rand_series(rng)
    blob = series_to_binary(H)
    H2 = series_from_binary(blob)
    assert set(H.terms) == set(H2.terms)
    for k, c in H.terms.items():
        assert H2.terms[k] == c
    assert series_to_binary(H2) == blob
