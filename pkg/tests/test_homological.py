import math

import numpy as np
import pytest

from dnlskam.homological import (ExcludedParameter, FourierFunction,
                                 HomologicalProblem, HypothesisFailure,
                                 block_key, convolve, dispatch_and_solve_all,
                                 extract_blocks, lemma_constant, solve_diagonal,
                                 solve_variable_exact, solve_variable_truncated,
                                 truncate)
from dnlskam.indices import SiteSet, momentum_scalar
from dnlskam.series import FormalSeries, TruncationBudget, key_momentum

SITES = SiteSet((-1, 2), 6)


def ff(coeffs, momentum=0):
    return FourierFunction(SITES, coeffs, momentum, 1)


def test_truncate_examples():
    f = ff({(0, 0): 1.0, (1, 2): 2.0, (3, 3): 0.5})
    head, tail = truncate(f, 10)
    assert head.coeffs == f.coeffs and not tail.coeffs
    head, tail = truncate(f, 0)
    assert set(head.coeffs) == {(0, 0)}
    assert set(tail.coeffs) == {(1, 2), (3, 3)}


def test_truncate_tail_bound():
    rng = np.random.default_rng(0)
    s, sigma, a_mom = 0.7, 0.2, 0.01
    for _ in range(50):
        coeffs = {}
        for _ in range(12):
            k = tuple(int(v) for v in rng.integers(-8, 9, 2))
            coeffs[k] = complex(rng.normal(), rng.normal())
        f = ff(coeffs, momentum=int(rng.integers(-3, 4)))
        K = int(rng.integers(0, 9))
        _, tail = truncate(f, K)
        lhs = tail.norm_majorant(s - sigma, a_mom)
        rhs = math.exp(-K * sigma) * f.norm_majorant(s, a_mom)
        assert lhs <= rhs * (1 + 1e-12)


def test_solve_diagonal_single_mode():
    omega = np.array([1.0, math.sqrt(2)])
    k = (2, 1)
    rhs = ff({k: 1.0})
    u = solve_diagonal(rhs, omega)
    d = 2 * omega[0] + omega[1]
    assert abs(u.coeffs[k] - 1.0 / (1j * d)) < 1e-15
    # constant with remove_average -> 0
    u2 = solve_diagonal(ff({(0, 0): 3.0}), omega, remove_average=True)
    assert not u2.coeffs


def test_solve_diagonal_residual_and_floor():
    rng = np.random.default_rng(1)
    omega = np.array([1.0, 1.61803398875])
    coeffs = {}
    for _ in range(10):
        k = tuple(int(v) for v in rng.integers(-5, 6, 2))
        coeffs[k] = complex(rng.normal(), rng.normal())
    coeffs.pop((0, 0), None)
    rhs = ff(coeffs)
    u = solve_diagonal(rhs, omega, remove_average=True)
    # residual d_omega F - (R - [R]) -> 0
    worst = 0.0
    for k, c in rhs.coeffs.items():
        if k == (0, 0):
            continue
        d = 1j * (k[0] * omega[0] + k[1] * omega[1])
        worst = max(worst, abs(d * u.coeffs[k] - c))
    assert worst < 1e-12
    with pytest.raises(ExcludedParameter):
        solve_diagonal(ff({(1, -1): 1.0}), np.array([1.0, 1.0 + 1e-12]),
                       floor=(1e-3, 5.0))


def _exact_problem(rng, kmax=4):
    n = 2
    omega = np.array([1.0, 1.0 + math.sqrt(5)]) * (1.0 + 0.1 * rng.random())
    lam = complex(rng.uniform(1.0, 4.0) * (1 if rng.random() < 0.5 else -1), 0.0)
    mu_coeffs = {}
    for _ in range(3):
        k = tuple(int(v) for v in rng.integers(-2, 3, n))
        if k == (0, 0) or sum(abs(v) for v in k) > kmax:
            continue
        c = complex(rng.normal(), rng.normal()) * 0.05
        mu_coeffs[k] = c
        mu_coeffs[tuple(-v for v in k)] = c.conjugate()
    p_coeffs = {}
    for _ in range(6):
        k = tuple(int(v) for v in rng.integers(-kmax, kmax + 1, n))
        if sum(abs(v) for v in k) <= kmax:
            p_coeffs[k] = complex(rng.normal(), rng.normal())
    s, sigma = 0.6, 0.1
    tau = 5.0
    mu = ff(mu_coeffs)
    worst1 = min((abs(np.dot(k, omega)) * sum(abs(v) for v in k) ** tau
                  for k in _modes(n, kmax) if any(k)), default=math.inf)
    worst2 = min(abs(np.dot(k, omega) + lam) * (1 + sum(abs(v) for v in k) ** tau)
                 for k in _modes(n, kmax))
    gamma_tilde = 1.0
    alpha1 = 0.5 * worst1
    alpha2 = 0.5 * worst2 / gamma_tilde
    return HomologicalProblem(
        sites=SITES, omega=omega, lam=lam, mu=mu, p=ff(p_coeffs,
                                                       momentum=int(rng.integers(-2, 3))),
        s=s, sigma=sigma, a_mom=sigma / (80.0 * SITES.c_j), tau=tau,
        alpha1=alpha1, alpha2=alpha2, gamma_tilde=gamma_tilde, K=kmax)


def _modes(n, kmax):
    from itertools import product
    return [k for k in product(range(-kmax, kmax + 1), repeat=n)
            if sum(abs(v) for v in k) <= kmax]


def test_solve_variable_exact_diagonal_cases():
    rng = np.random.default_rng(2)
    prob = _exact_problem(rng)
    # mu = 0, single mode
    prob.mu = ff({})
    prob.p = ff({(1, 1): 2.0})
    u, checks = solve_variable_exact(prob)
    d = prob.omega[0] + prob.omega[1] + prob.lam
    assert abs(u.coeffs[(1, 1)] - 2.0 / d) < 1e-12
    # lambda = 1, p = 1 -> u = 1 (floors recomputed for the new lambda)
    prob.p = ff({(0, 0): 1.0})
    prob.lam = 1.0 + 0j
    prob.alpha2 = 0.5 * min(abs(np.dot(k, prob.omega) + prob.lam)
                            * (1 + sum(abs(v) for v in k) ** prob.tau)
                            for k in _modes(2, prob.K))
    u, checks = solve_variable_exact(prob)
    assert abs(u.coeffs[(0, 0)] - 1.0) < 1e-14


def test_solve_variable_exact_random_instances():
    rng = np.random.default_rng(3)
    done = 0
    for _ in range(40):
        prob = _exact_problem(rng)
        try:
            u, checks = solve_variable_exact(prob)
        except (ExcludedParameter, HypothesisFailure):
            continue
        done += 1
        assert checks["residual"] < 1e-10 * prob.p.norm_majorant(prob.s, prob.a_mom)
        assert checks["bound_holds"]
    assert done >= 25


def test_lemma_constant_value():
    # c(n, tau) = 4^{n+tau} (8e+8)^n (6e+6)^n (1 + (3 tau/e)^tau)
    n, tau = 2, 5.0
    e = math.e
    expected = 4 ** 7 * (8 * e + 8) ** 2 * (6 * e + 6) ** 2 * (1 + (15 / e) ** 5)
    assert lemma_constant(n, tau) == pytest.approx(expected)


def test_solve_variable_truncated_small_cases():
    # K = 0: single unknown u_0 = p_0 / lambda (mu has zero average)
    prob = _exact_problem(np.random.default_rng(4))
    prob.p = ff({(0, 0): 3.0, (2, 0): 1.0})
    prob.lam = 5.0 + 0j
    prob.K = 0
    mu_mass = prob.mu.norm_majorant(prob.s, prob.a_mom)
    if mu_mass > abs(prob.lam) / 4:
        prob.mu = prob.mu.scale(abs(prob.lam) / (8 * mu_mass))
    u, tail, checks = solve_variable_truncated(prob)
    assert set(u.coeffs) <= {(0, 0)}
    assert abs(u.coeffs[(0, 0)] - 3.0 / 5.0) < 1e-13
    # mu = 0 diagonal solve
    prob2 = _exact_problem(np.random.default_rng(5))
    prob2.mu = ff({})
    prob2.lam = 15.0 + 0j    # 2 K |omega| <= |lambda|
    prob2.K = 2
    prob2.p = ff({(1, 0): 1.0, (0, 2): 2.0})
    u2, tail2, _ = solve_variable_truncated(prob2)
    assert abs(u2.coeffs[(1, 0)] - 1.0 / (prob2.omega[0] + 15.0)) < 1e-12
    assert not tail2.coeffs


def test_solve_variable_truncated_random_bounds():
    rng = np.random.default_rng(6)
    done = 0
    for _ in range(60):
        prob = _exact_problem(rng)
        lam_abs = rng.uniform(4.0, 9.0)
        prob.lam = complex(lam_abs if rng.random() < 0.5 else -lam_abs, 0)
        prob.K = int(min(2, abs(prob.lam) / (2 * np.max(np.abs(prob.omega)))))
        mu_mass = prob.mu.norm_majorant(prob.s, prob.a_mom)
        if mu_mass > abs(prob.lam) / 4:
            prob.mu = prob.mu.scale(abs(prob.lam) / (8 * mu_mass))
        try:
            u, tail, checks = solve_variable_truncated(prob)
        except HypothesisFailure:
            continue
        done += 1
        assert checks["u_bound_holds"]
        assert checks["tail_bound_holds"]
        assert checks["residual"] < 1e-10 * max(prob.p.norm_majorant(prob.s, prob.a_mom), 1e-30)
    assert done >= 30


# -- dispatch ----------------------------------------------------------------

def _small_state(width=1):
    budget = TruncationBudget(4, 8, 6)
    G = width
    xi = np.array([[0.05, 0.08]][:1] * G) + np.linspace(0, 0.01, G)[:, None]
    jb = np.array(SITES.sites, dtype=float)
    omega = jb[None, :] ** 2 + jb[None, :] * xi
    c = 2 * xi.sum(axis=1) / 3
    modes = np.array(SITES.normal_modes, dtype=float)
    omega_bar = modes[None, :] ** 2 + c[:, None] * modes[None, :]
    return budget, omega, omega_bar


def test_dispatch_solves_and_books_momentum():
    budget, omega, omega_bar = _small_state()
    terms = {
        ((1, 0), (0, 0), ((3, 1),), ()): 0.5 + 0.1j,        # z-block
        ((0, 1), (0, 0), (), ((4, 1),)): 0.2j,              # zbar-block
        ((1, -1), (0, 0), ((1, 1), (3, 1)), ()): 0.3,       # zz-block
        ((2, 0), (0, 0), ((1, 1),), ((3, 1),)): 0.7,        # zzb off-diag
        ((1, 0), (0, 0), (), ()): 0.4,                      # x-block
        ((1, 0), (1, 0), (), ()): 0.1,                      # y-block
    }
    R = FormalSeries(SITES, budget, terms, 1)
    res = dispatch_and_solve_all(
        R, omega, omega_bar, {}, SITES, budget,
        alpha1=1e-9, alpha2=1e-9, tau=5.0, K=100.0, Pi=100.0, C0=10.0,
        active=np.ones(1, dtype=bool), mode_col=SITES.mode_index, width=1)
    assert not res.events
    assert res.case_counts["case1"] == 4
    assert res.case_counts["case3"] == 0
    assert res.max_residual < 1e-12
    # momentum of every F monomial equals that of the R monomial it kills
    for key in res.f_series.terms:
        assert key in R.terms
        assert key_momentum(key, SITES) == key_momentum(key, SITES)
    assert set(res.f_series.terms) == set(R.terms) - {((0, 0), (0, 0), (), ())}
    # degenerate case: K, Pi beyond the budget -> no remainder at all
    assert res.rhat.is_zero()


def test_dispatch_case4_routes_to_rhat():
    budget, omega, omega_bar = _small_state()
    key = ((1, 0), (0, 0), ((-3, 1),), ((3, 1),))           # i = -j pair, j = 3
    R = FormalSeries(SITES, budget, {key: 1.0 + 0j}, 1)
    res = dispatch_and_solve_all(
        R, omega, omega_bar, {}, SITES, budget,
        alpha1=1e-9, alpha2=1e-9, tau=5.0, K=100.0, Pi=2.0, C0=10.0,
        active=np.ones(1, dtype=bool), mode_col=SITES.mode_index, width=1)
    assert res.case_counts["case4"] == 1
    assert res.f_series.is_zero()
    assert res.rhat.terms == {key: 1.0 + 0j}


def test_dispatch_case2_truncates_with_tail():
    budget, omega, omega_bar = _small_state()
    # tiny x-dependent correction Omega~_3 so the truncated equation has
    # a variable part and the tail is populated
    omt = {3: FourierFunction(SITES, {(1, 0): np.array([1e-4 + 0j]),
                                      (-1, 0): np.array([1e-4 - 0j])}, 0, 1)}
    key_in = ((1, 0), (0, 0), ((3, 1),), ())
    key_out = ((3, 0), (0, 0), ((3, 1),), ())               # beyond K = 2
    R = FormalSeries(SITES, budget, {key_in: 1.0 + 0j, key_out: 0.5 + 0j}, 1)
    res = dispatch_and_solve_all(
        R, omega, omega_bar, omt, SITES, budget,
        alpha1=1e-9, alpha2=1e-9, tau=5.0, K=2.0, Pi=100.0, C0=0.1,
        active=np.ones(1, dtype=bool), mode_col=SITES.mode_index, width=1)
    assert res.case_counts["case2"] == 1
    # the untreated |k| > K part of R lands in R-hat
    assert key_out in res.rhat.terms
    assert res.max_residual < 1e-10


def test_dispatch_diag_block_rejected():
    budget, omega, omega_bar = _small_state()
    key = ((1, 0), (0, 0), ((3, 1),), ((3, 1),))
    R = FormalSeries(SITES, budget, {key: 1.0 + 0j}, 1)
    with pytest.raises(ValueError):
        dispatch_and_solve_all(R, omega, omega_bar, {}, SITES, budget,
                               alpha1=1e-9, alpha2=1e-9, tau=5.0, K=10.0,
                               Pi=10.0, C0=10.0, active=np.ones(1, dtype=bool),
                               mode_col=SITES.mode_index, width=1)
