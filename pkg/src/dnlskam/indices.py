"""Tangential site sets, signs, multi-indices and momentum bookkeeping.

Everything here is exact integer arithmetic; these values feed divisor
computations that must be free of rounding artifacts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Tuple

Component = Tuple[str, int]  # ('x', b) | ('y', b) | ('z', j) | ('zbar', j)

ADMISSIBLE = "admissible"
VIOLATES_DIVISIBILITY = "violates_divisibility"
VIOLATES_SIGN_CONDITION = "violates_sign_condition"


def sign(j: int) -> int:
    """Sign factor of a nonzero mode index: +1 for j>0, -1 for j<0."""
    if j == 0:
        raise ValueError("mode index 0 is excluded")
    return 1 if j > 0 else -1


@dataclass(frozen=True)
class SiteSet:
    """The tangential index set J plus the retained normal modes.

    ``sites`` is the strictly increasing tuple j_1 < ... < j_n of nonzero
    integers; ``mode_cutoff`` bounds the normal modes kept after
    truncation (normal modes are all j with 0 < |j| <= mode_cutoff not
    in J).  ``sites`` may be empty: that is the internal convention used
    while building the lattice Hamiltonian, where every mode is treated
    as normal.
    """

    sites: Tuple[int, ...]
    mode_cutoff: int
    normal_modes: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        sites = tuple(int(j) for j in self.sites)
        object.__setattr__(self, "sites", sites)
        if any(j == 0 for j in sites):
            raise ValueError("sites must be nonzero")
        if any(a >= b for a, b in zip(sites, sites[1:])):
            raise ValueError("sites must be strictly increasing")
        if self.mode_cutoff < 1:
            raise ValueError("mode_cutoff must be positive")
        if sites and max(abs(j) for j in sites) > self.mode_cutoff:
            raise ValueError("sites must lie within the mode cutoff")
        normal = tuple(
            j
            for j in range(-self.mode_cutoff, self.mode_cutoff + 1)
            if j != 0 and j not in sites
        )
        object.__setattr__(self, "normal_modes", normal)
        object.__setattr__(self, "_mode_pos", {j: i for i, j in enumerate(normal)})

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def c_j(self) -> int:
        """max_b |j_b|; 0 for an empty site set."""
        return max((abs(j) for j in self.sites), default=0)

    def site_signs(self) -> Tuple[int, ...]:
        return tuple(sign(j) for j in self.sites)

    def mode_index(self, j: int) -> int:
        """Position of normal mode j in the normal_modes tuple."""
        try:
            return self._mode_pos[j]
        except KeyError:
            raise KeyError(f"{j} is not a retained normal mode") from None


def admissible(site_set: SiteSet) -> str:
    """Classify a site set against the two index-set restrictions.

    Requires n >= 2.  For n = 2 the sign restriction j_1 j_2 < 0 is
    checked first (a set can violate both; the sign verdict wins), then
    divisibility: 2n-1 must not divide the site sum.
    """
    n = site_set.n
    if n < 2:
        raise ValueError("admissibility is defined for n >= 2")
    sites = site_set.sites
    if n == 2 and sites[0] * sites[1] > 0:
        return VIOLATES_SIGN_CONDITION
    if sum(sites) % (2 * n - 1) == 0:
        return VIOLATES_DIVISIBILITY
    return ADMISSIBLE


def _pairs(mapping) -> Iterable[Tuple[int, int]]:
    if isinstance(mapping, Mapping):
        return mapping.items()
    return mapping  # already an iterable of (mode, power) pairs


def momentum_scalar(k, alpha, beta, site_set: SiteSet) -> int:
    """Momentum of a scalar monomial: sum_b k_b j_b + sum_j (alpha_j - beta_j) j."""
    m = 0
    for kb, jb in zip(k, site_set.sites):
        m += kb * jb
    for j, a in _pairs(alpha):
        m += a * j
    for j, b in _pairs(beta):
        m -= b * j
    return m


def momentum_vf(k, alpha, beta, component: Component, site_set: SiteSet) -> int:
    """Momentum of a vector-field monomial attached to one component.

    x- and y-components carry the scalar momentum; a z_j component
    subtracts j, a zbar_j component adds j.
    """
    m = momentum_scalar(k, alpha, beta, site_set)
    kind, idx = component
    if kind == "z":
        return m - idx
    if kind == "zbar":
        return m + idx
    if kind in ("x", "y"):
        return m
    raise ValueError(f"unknown component kind {kind!r}")


def validate_component(component: Component, site_set: SiteSet) -> None:
    kind, idx = component
    if kind in ("x", "y"):
        if not 0 <= idx < site_set.n:
            raise ValueError(f"component {component} outside site range")
    elif kind in ("z", "zbar"):
        if idx == 0 or abs(idx) > site_set.mode_cutoff or idx in site_set.sites:
            raise ValueError(f"component {component} is not a retained normal mode")
    else:
        raise ValueError(f"unknown component kind {kind!r}")
