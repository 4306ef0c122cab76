"""Wiring from a validated config to the objects the commands share:
lattice Hamiltonian -> quartic normal form -> action-angle reduction ->
initial iteration state and schedule constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import RunConfig
from .engine import (EngineOptions, KamState, ScheduleGlobals, measured_epsilon)
from .model import (HamiltonianSplit, ReducedHamiltonian, action_angle_reduce,
                    build_dnls_hamiltonian, partial_birkhoff)
from .series import NormWeights, ParameterGrid, TruncationBudget


@dataclass
class PreparedRun:
    cfg: RunConfig
    grid: ParameterGrid
    split: HamiltonianSplit
    f4_terms: int
    birkhoff_report: object
    reduced: ReducedHamiltonian
    state: KamState
    globals: ScheduleGlobals
    options: EngineOptions
    eps0_measured: float


def reference_constants(cfg: RunConfig) -> dict:
    """The verification-paragraph constants for the affine maps."""
    n = cfg.sites.n
    sumj = sum(abs(j) for j in cfg.sites.sites)
    return {
        "m": 0.5,
        "m1": float(cfg.sites.c_j),
        "m2": n / (n - 0.5),
        "m3": 1.0 / (100.0 * n * sumj),
    }


def default_gamma0(cfg: RunConfig, e0: float) -> float:
    """beta' / (800 max{C_00, C_J}) with C_00 = 2 E_0 / m_0."""
    bprime = float(ScheduleGlobals(
        n=cfg.sites.n, c_j=cfg.sites.c_j, tau=cfg.tau, beta=cfg.beta,
        s0=cfg.s0, r0=cfg.r0, alpha0=cfg.alpha0, eps0=0.5, gamma0=1.0).beta_prime)
    c00 = 2.0 * e0 / 0.5
    return bprime / (800.0 * max(c00, float(cfg.sites.c_j)))


def prepare_run(cfg: RunConfig) -> PreparedRun:
    grid = cfg.grid()
    split = build_dnls_hamiltonian(cfg.dnls)
    f4, h_nf, birkhoff_report = partial_birkhoff(split)
    reduced = action_angle_reduce(h_nf, cfg.sites, grid, cfg.budget,
                                  y_order=cfg.dnls.y_expansion_order,
                                  r_radius=cfg.r0,
                                  bypass_admissibility=cfg.bypass_admissibility)
    state = KamState.from_reduced(reduced)
    ref = reference_constants(cfg)
    e0 = float(np.max(np.abs(reduced.freq.omega)))
    gamma0 = cfg.gamma0 if cfg.gamma0 is not None else default_gamma0(cfg, e0)

    opts = EngineOptions(max_steps=cfg.max_steps, eps_floor=cfg.eps_floor,
                         stop_at_horizon=cfg.stop_at_horizon,
                         excl_k_max=cfg.excl_k_max, audit_k_max=cfg.audit_k_max,
                         p_exponent=cfg.p, q_exponent=cfg.q, a_exp=cfg.a_exp)
    sigma0 = cfg.s0 / 20.0
    w0 = NormWeights(s=cfg.s0, r=cfg.r0, p_or_q=cfg.q, a_exp=cfg.a_exp,
                     a_mom=sigma0 / cfg.sites.c_j, domain_p=cfg.p)
    lam0 = cfg.alpha0 / (ref["m1"] + ref["m2"])
    eps0_measured, _, _ = measured_epsilon(reduced.p_series, w0, lam0, grid,
                                           np.ones(grid.count, dtype=bool))
    # the iterative hypothesis is ||X_P_0|| <= eps_0; anchor the schedule
    # with slack so honest measurement noise cannot sit exactly on it
    eps0 = cfg.eps0 if cfg.eps0 is not None else 4.0 * eps0_measured
    g = ScheduleGlobals(n=cfg.sites.n, c_j=cfg.sites.c_j, tau=cfg.tau,
                        beta=cfg.beta, s0=cfg.s0, r0=cfg.r0, alpha0=cfg.alpha0,
                        eps0=eps0, gamma0=gamma0, bsigma_c=cfg.bsigma_c,
                        m0=ref["m"], e0=e0, m1_0=ref["m1"], m2_0=ref["m2"],
                        m3_0=ref["m3"])
    return PreparedRun(cfg, grid, split, len(f4.terms), birkhoff_report, reduced,
                       state, g, opts, eps0_measured)
