import math
from fractions import Fraction

import numpy as np
import pytest

from dnlskam.indices import ADMISSIBLE, SiteSet, admissible
from dnlskam.model import frequency_maps
from dnlskam.nonres import (DivisorSpec, ExclusionLedger, MeasureDomain,
                            audit_assumptions, divisor, gradient,
                            halfspace_box_volume, integer_part, lemma32,
                            lemma32_exhaustive, measure_report, resonance_zone,
                            slab_box_volume)
from dnlskam.series import ParameterGrid


def test_divisor_examples():
    s12 = SiteSet((-1, 2), 8)
    # k = 0, l = 0 -> 0
    spec0 = DivisorSpec((0, 0), ())
    assert divisor(spec0, (0.3, 0.4), s12) == 0.0
    # J = {-1, 2}, k = 0, l = e_5 - e_4 at xi = 0 -> 25 - 16 = 9
    spec = DivisorSpec((0, 0), ((5, 1), (4, -1)))
    assert divisor(spec, (0.0, 0.0), s12, exact=True) == 9


def test_counterexample_divisor_identically_zero():
    # J = {-1, 1}: 4 omega_1 - 4 omega_2 + Omega_3 - Omega_{-3} == 0
    s = SiteSet((-1, 1), 8)
    spec = DivisorSpec((4, -4), ((3, 1), (-3, -1)))
    assert integer_part(spec, s) == 0
    assert all(g == 0 for g in gradient(spec, s))
    rng = np.random.default_rng(0)
    for _ in range(100):
        xi = [Fraction(int(v), 10 ** 6) for v in rng.integers(0, 10 ** 6, 2)]
        assert divisor(spec, xi, s, exact=True) == 0


def test_lemma32_examples():
    s12 = SiteSet((-1, 2), 60)
    # k = 0, l = e_j: the quadratic-form inequality
    assert lemma32((0, 0), ((5, 1),), s12) == "inequality_0"
    # k = (4, -1), l = 0: quadratic form vanishes, first twist inequality holds
    assert lemma32((4, -1), (), s12) == "inequality_1"
    # inadmissible J = {-1, 1}: counterexample fails all n+1 inequalities
    s11 = SiteSet((-1, 1), 60)
    assert lemma32((4, -4), ((3, 1), (-3, -1)), s11) == "none"


def test_lemma32_exhaustive_small_range():
    audit = lemma32_exhaustive(SiteSet((-1, 2), 20), k_max=6, mode_max=20)
    assert audit.all_satisfied
    audit3 = lemma32_exhaustive(SiteSet((-2, 1, 3), 20), k_max=4, mode_max=12)
    assert audit3.all_satisfied
    bad = lemma32_exhaustive(SiteSet((-1, 1), 20), k_max=8, mode_max=10)
    assert not bad.all_satisfied
    assert ((4, -4), ((-3, -1), (3, 1))) in bad.none_witnesses \
        or ((-4, 4), ((-3, 1), (3, -1))) in bad.none_witnesses


def test_admissibility_matches_zero_divisor_existence():
    # cross-module: inadmissible J (n = 2) <-> an identically-zero divisor
    # exists in the enumerated range
    cands = [(-3, 1), (-2, 1), (-1, 2), (-2, 3), (1, 2), (-1, 1), (-2, 2),
             (-3, 3), (-2, 4), (-3, 2)]
    for sites_t in cands:
        s = SiteSet(sites_t, 14)
        audit = audit_assumptions(
            frequency_maps(s, ParameterGrid(np.array([[1e-3, 2e-3]]), ()),
                           bypass_admissibility=True),
            k_max=8, mode_max=12)
        has_zero = bool(audit.witnesses["zero_divisors"])
        if admissible(s) == ADMISSIBLE:
            assert not has_zero, sites_t
        else:
            assert has_zero, sites_t


def _grid(scale=1e-3, count=3, n=2, seed=0):
    rng = np.random.default_rng(seed)
    base = scale * (0.4 + 0.6 * rng.random((count, n)))
    anchor = base[0]
    extra = [anchor + scale * 0.21 * np.eye(n)[b] for b in range(n)]
    extra.append(anchor + scale * 0.17)
    pts = np.vstack([base] + [e[None, :] for e in extra])
    pairs = [(g, g + 1) for g in range(count - 1)]
    pairs += [(0, count + b) for b in range(n + 1)]
    return ParameterGrid(pts, tuple(pairs))


def test_audit_reference_constants():
    sites = SiteSet((-1, 2), 20)
    freq = frequency_maps(sites, _grid())
    audit = audit_assumptions(freq, k_max=8, mode_max=24)
    assert audit.m >= 0.5
    assert abs(audit.m1 - 2.0) < 1e-9           # max |j_b| (j^2-offset cancellation)
    assert abs(audit.m2 - 4.0 / 3.0) < 1e-12    # n / (n - 1/2)
    assert audit.m3_estimate >= 1.0 / (100 * 2 * 3)
    assert not audit.witnesses["zero_divisors"]


def test_audit_inadmissible_zero_divisor_witness():
    sites = SiteSet((-1, 1), 20)
    freq = frequency_maps(sites, _grid(), bypass_admissibility=True)
    audit = audit_assumptions(freq, k_max=8, mode_max=8)
    assert audit.m3_estimate == 0.0
    assert audit.witnesses["zero_divisors"]


# -- measure ----------------------------------------------------------------

def test_halfspace_volume_against_grid_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        lo = rng.uniform(-1, 0, 2)
        hi = lo + rng.uniform(0.5, 2, 2)
        g = rng.normal(size=2)
        u = float(rng.normal())
        vol = halfspace_box_volume(lo, hi, g, u)
        xs = np.linspace(lo[0], hi[0], 301)[:-1] + (hi[0] - lo[0]) / 600
        ys = np.linspace(lo[1], hi[1], 301)[:-1] + (hi[1] - lo[1]) / 600
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        inside = (g[0] * X + g[1] * Y) <= u
        cell = (hi[0] - lo[0]) * (hi[1] - lo[1]) / (300 * 300)
        oracle = inside.sum() * cell
        assert abs(vol - oracle) < 0.02 * max((hi - lo).prod(), 1.0)


def test_slab_volume_interval_formula():
    # 1-D: |c + b xi| < t on [0, rho]: clipped interval of length 2t/|b|
    rho, b, c, t = 1.0, 2.0, -0.6, 0.1
    vol = slab_box_volume([0.0], [rho], [b], c, t)
    lo = max(0.0, (-t - c) / b)
    hi = min(rho, (t - c) / b)
    assert vol == pytest.approx(max(0.0, hi - lo), abs=1e-14)
    # zero gradient: all or nothing
    assert slab_box_volume([0.0], [rho], [0.0], 0.05, 0.1) == rho
    assert slab_box_volume([0.0], [rho], [0.0], 0.5, 0.1) == 0.0


def test_resonance_zone_masks_and_monotonicity():
    sites = SiteSet((-1, 2), 8)
    dom = MeasureDomain((0.0, 0.0), (0.1, 0.1), (24, 24))
    grid = ParameterGrid(dom.centers(), ())
    freq = frequency_maps(sites, grid)
    # omega_1 - Omega_1: integer part 0, gradient (-5/3, -2/3)
    spec = DivisorSpec((1, 0), ((1, -1),))
    z1 = resonance_zone(spec, 2e-2, 5.0, freq, dom)
    z2 = resonance_zone(spec, 4e-2, 5.0, freq, dom)
    assert z1.excluded_mask.sum() > 0
    assert np.all(z2.excluded_mask | ~z1.excluded_mask)  # monotone in alpha
    # grid fraction approximates the analytic slab measure
    frac = z1.excluded_mask.mean() * dom.volume
    assert abs(frac - z1.analytic_measure) < 40 * dom.cell_volume


def test_zone_full_exclusion_for_identically_zero_divisor():
    sites = SiteSet((-1, 1), 8)
    dom = MeasureDomain((0.0, 0.0), (0.1, 0.1), (8, 8))
    grid = ParameterGrid(dom.centers(), ())
    freq = frequency_maps(sites, grid, bypass_admissibility=True)
    spec = DivisorSpec((4, -4), ((3, 1), (-3, -1)))
    z = resonance_zone(spec, 1e-6, 5.0, freq, dom)
    assert z.excluded_mask.all()
    assert z.analytic_measure == pytest.approx(dom.volume)


def test_measure_report_and_partition():
    sites = SiteSet((-1, 2), 8)
    dom = MeasureDomain((0.0, 0.0), (0.1, 0.1), (16, 16))
    grid = ParameterGrid(dom.centers(), ())
    freq = frequency_maps(sites, grid)
    led = ExclusionLedger(grid.count)
    assert measure_report(led, 1e-3, 0.1)["excluded_fraction"] == 0.0
    zg = resonance_zone(DivisorSpec((4, -1), ()), 1e-3, 5.0, freq, dom)
    zp = resonance_zone(DivisorSpec((-4, 1), ((-3, 1), (3, -1))), 1e-3, 5.0, freq, dom)
    led.add_step(0, [zg], [zp])
    rep = measure_report(led, 1e-3, 0.1)
    g, p = led.family_masks()
    assert (g | p).mean() == pytest.approx(rep["excluded_fraction"])
    assert rep["theta1_fraction"] == pytest.approx(g.mean())
    assert rep["theta2_fraction"] == pytest.approx(p.mean())
