"""Run configuration: a strict JSON document with a schema version.

Unknown keys are rejected with a named diagnostic; every invariant
violation carries the offending key.  Construction helpers turn a
validated config into the site set, budget, grid, schedule globals and
engine options.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from .indices import SiteSet
from .series import NormWeights, ParameterGrid, TruncationBudget
from .model import DnlsConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Named configuration diagnostic."""

    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.name = name


_SCHEMA: Dict[str, tuple] = {
    "schema_version": (),
    "sites": (),
    "mode_cutoff": (),
    "seed": (),
    "bypass_admissibility": (),
    "phase": ("s0", "r0", "p", "q", "a_exp"),
    "budget": ("degree_max", "fourier_max"),
    "dnls": ("mu", "quintic", "delta_split_n", "q_degree_max", "y_expansion_order"),
    "schedule": ("alpha0", "beta", "tau", "gamma0", "bsigma_c", "eps0",
                 "max_steps", "eps_floor", "stop_at_horizon", "gamma_theorem"),
    "grid": ("points", "pairs", "auto_count", "scale_lo", "scale_hi"),
    "enum": ("k_max", "mode_max", "excl_k_max", "audit_k_max"),
    "measure": ("box_lo", "box_hi", "resolution", "k_max", "mode_max", "steps",
                "alpha", "nominal_eps0"),
    "bounds": ("samples", "kmax_sums", "kmax_fields"),
}


@dataclass
class RunConfig:
    raw: dict
    sites: SiteSet
    budget: TruncationBudget
    dnls: DnlsConfig
    seed: int
    s0: float
    r0: float
    p: float
    q: float
    a_exp: float
    alpha0: float
    beta: Fraction
    tau: float
    gamma0: Optional[float]
    bsigma_c: float
    eps0: Optional[float]
    max_steps: int
    eps_floor: float
    stop_at_horizon: bool
    gamma_theorem: Optional[float]
    enum_k_max: int
    enum_mode_max: int
    excl_k_max: Optional[int]
    audit_k_max: int
    bypass_admissibility: bool

    def grid(self) -> ParameterGrid:
        return build_grid(self.raw.get("grid", {}), self.sites.n, self.r0, self.seed)

    def measure_domain(self):
        from .nonres import MeasureDomain
        m = self.raw.get("measure", {})
        n = self.sites.n
        rho = self.r0 ** 1.5
        lo = m.get("box_lo") or [0.0] * n
        hi = m.get("box_hi") or [rho / math.sqrt(n)] * n
        res = m.get("resolution", 48)
        return MeasureDomain(tuple(float(v) for v in lo), tuple(float(v) for v in hi),
                             tuple([int(res)] * n if isinstance(res, int) else
                                   [int(v) for v in res]))


def _check_keys(doc: dict):
    for key, val in doc.items():
        if key not in _SCHEMA:
            raise ConfigError("unknown_key", f"unexpected top-level key {key!r}")
        sub = _SCHEMA[key]
        if sub and isinstance(val, dict):
            for k2 in val:
                if k2 not in sub:
                    raise ConfigError("unknown_key", f"unexpected key {key}.{k2}")
        elif sub and not isinstance(val, dict):
            raise ConfigError("bad_section", f"{key} must be an object")


def _parse_beta(v) -> Fraction:
    if isinstance(v, str):
        num, den = v.split("/")
        return Fraction(int(num), int(den))
    return Fraction(v).limit_denominator(10 ** 12)


def load_config(path: str, seed_override: Optional[int] = None) -> RunConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return parse_config(doc, seed_override)


def parse_config(doc: dict, seed_override: Optional[int] = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("bad_document", "config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version",
                          f"expected schema_version {SCHEMA_VERSION}")
    _check_keys(doc)
    if "sites" not in doc or "mode_cutoff" not in doc:
        raise ConfigError("missing_key", "sites and mode_cutoff are required")
    try:
        sites = SiteSet(tuple(int(j) for j in doc["sites"]), int(doc["mode_cutoff"]))
    except ValueError as exc:
        raise ConfigError("bad_sites", str(exc)) from None
    n = sites.n
    if n < 2:
        raise ConfigError("n_too_small", "need at least two tangential sites")

    phase = doc.get("phase", {})
    s0 = float(phase.get("s0", 0.4))
    r0 = float(phase.get("r0", 1e-6))
    p = float(phase.get("p", 2.0))
    q = float(phase.get("q", 1.0))
    a_exp = float(phase.get("a_exp", 0.05))
    if not (0 < s0 < 1):
        raise ConfigError("s0_range", "require 0 < s0 < 1")
    if not (0 < r0 < 1):
        raise ConfigError("r0_range", "require 0 < r0 < 1")
    if abs((p - q) - 1.0) > 1e-12:
        raise ConfigError("pq_gap", "require p - q = 1")
    if a_exp < 0:
        raise ConfigError("a_exp_range", "require a_exp >= 0")

    bud = doc.get("budget", {})
    budget = TruncationBudget(int(bud.get("degree_max", 4)),
                              int(bud.get("fourier_max", 24)),
                              sites.mode_cutoff)

    dn = doc.get("dnls", {})
    quintic = tuple((int(e[0]), int(e[1]), int(e[2]), complex(e[3], e[4] if len(e) > 4 else 0.0))
                    for e in dn.get("quintic", ()))
    q_deg = dn.get("q_degree_max")
    if q_deg is None:
        q_deg = max(4, max((a + b for _, a, b, _ in quintic), default=4))
    try:
        dnls = DnlsConfig(mode_cutoff=sites.mode_cutoff, mu=float(dn.get("mu", 1.0)),
                          quintic=quintic, delta_split_n=dn.get("delta_split_n"),
                          degree_max=int(q_deg),
                          y_expansion_order=int(dn.get("y_expansion_order", 3)))
    except ValueError as exc:
        raise ConfigError("bad_dnls", str(exc)) from None

    sch = doc.get("schedule", {})
    alpha0 = float(sch.get("alpha0", r0 ** 1.6))
    beta = _parse_beta(sch.get("beta", "1/13"))
    tau = float(sch.get("tau", n + 3))
    if tau < n + 3:
        raise ConfigError("tau_too_small", f"require tau >= n + 3 = {n + 3}")
    if alpha0 <= 0:
        raise ConfigError("alpha0_range", "alpha0 must be positive")
    if beta <= 0:
        raise ConfigError("beta_range", "beta must be positive")

    enum = doc.get("enum", {})
    cfg = RunConfig(
        raw=doc, sites=sites, budget=budget, dnls=dnls,
        seed=int(seed_override if seed_override is not None else doc.get("seed", 0)),
        s0=s0, r0=r0, p=p, q=q, a_exp=a_exp, alpha0=alpha0, beta=beta, tau=tau,
        gamma0=(None if sch.get("gamma0") is None else float(sch["gamma0"])),
        bsigma_c=float(sch.get("bsigma_c", 1.0)),
        eps0=(None if sch.get("eps0") is None else float(sch["eps0"])),
        max_steps=int(sch.get("max_steps", 4)),
        eps_floor=float(sch.get("eps_floor", 1e-30)),
        stop_at_horizon=bool(sch.get("stop_at_horizon", False)),
        gamma_theorem=(None if sch.get("gamma_theorem") is None
                       else float(sch["gamma_theorem"])),
        enum_k_max=int(enum.get("k_max", 20)),
        enum_mode_max=int(enum.get("mode_max", 60)),
        excl_k_max=(None if enum.get("excl_k_max") is None else int(enum["excl_k_max"])),
        audit_k_max=int(enum.get("audit_k_max", 6)),
        bypass_admissibility=bool(doc.get("bypass_admissibility", False)),
    )
    return cfg


def build_grid(gdoc: dict, n: int, r0: float, seed: int) -> ParameterGrid:
    """Explicit points/pairs, or a deterministic auto grid inside Xi_r
    with one point given axis partners and a diagonal partner so the
    affine Lipschitz constants are realized exactly."""
    rho = r0 ** 1.5
    if gdoc.get("points") is not None:
        pts = np.asarray(gdoc["points"], dtype=float)
        pairs = gdoc.get("pairs")
        if pairs is None:
            pairs = [(g, g + 1) for g in range(len(pts) - 1)]
        grid = ParameterGrid(pts, tuple((int(a), int(b)) for a, b in pairs))
    else:
        count = int(gdoc.get("auto_count", 4))
        lo = float(gdoc.get("scale_lo", 0.35))
        hi = float(gdoc.get("scale_hi", 0.95))
        if not (0 < lo < hi <= 1):
            raise ConfigError("grid_scale", "require 0 < scale_lo < scale_hi <= 1")
        rng = np.random.default_rng(seed)
        base = rng.uniform(lo, hi, size=(count, n)) * rho / math.sqrt(n)
        anchor = base[0]
        extra = []
        pairs: List[Tuple[int, int]] = [(g, g + 1) for g in range(count - 1)]
        step = 0.31 * (hi - lo) * rho / math.sqrt(n)
        for b in range(n):
            pt = anchor.copy()
            pt[b] = pt[b] + step if pt[b] + step <= rho / math.sqrt(n) else pt[b] - step
            extra.append(pt)
            pairs.append((0, count + b))
        diag = anchor + step / math.sqrt(n)
        if np.linalg.norm(diag) > rho:
            diag = anchor - step / math.sqrt(n)
        extra.append(diag)
        pairs.append((0, count + n))
        pts = np.vstack([base] + [e[None, :] for e in extra])
        grid = ParameterGrid(pts, tuple(pairs))
    if not grid.in_dnls_domain(r0):
        raise ConfigError("grid_domain", "grid points must lie in Xi_r")
    if grid.dim != n:
        raise ConfigError("grid_dim", "grid dimension must equal n")
    return grid
