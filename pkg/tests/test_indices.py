import pytest

from dnlskam.indices import (ADMISSIBLE, VIOLATES_DIVISIBILITY,
                             VIOLATES_SIGN_CONDITION, SiteSet, admissible,
                             momentum_scalar, momentum_vf, sign)


def test_sign_definition():
    assert sign(3) == 1
    assert sign(-7) == -1
    with pytest.raises(ValueError):
        sign(0)


def test_site_set_invariants():
    s = SiteSet((-1, 2), 8)
    assert s.n == 2
    assert s.c_j == 2
    assert 0 not in s.normal_modes
    assert -1 not in s.normal_modes and 2 not in s.normal_modes
    assert len(s.normal_modes) == 2 * 8 - 2
    with pytest.raises(ValueError):
        SiteSet((0, 2), 8)
    with pytest.raises(ValueError):
        SiteSet((2, -1), 8)
    with pytest.raises(ValueError):
        SiteSet((-1, 9), 8)


def test_momentum_scalar_examples():
    s = SiteSet((-1, 2), 8)
    # alpha - beta cancels
    assert momentum_scalar((0, 0), {5: 1}, {5: 1}, s) == 0
    # (-1 + 2) + (3 - 4) = 0
    assert momentum_scalar((1, 1), {3: 1}, {4: 1}, s) == 0
    # -2 + 3 = 1
    assert momentum_scalar((2, 0), {}, {-3: 1}, s) == 1


def test_momentum_vf_examples():
    s = SiteSet((-1, 2), 8)
    assert momentum_vf((0, 0), {}, {}, ("z", 3), s) == -3
    assert momentum_vf((0, 0), {}, {}, ("zbar", 3), s) == 3
    assert momentum_vf((1, 0), {}, {}, ("y", 0), s) == -1


def test_momentum_vf_consistency_with_scalar():
    s = SiteSet((-1, 2), 6)
    for j in s.normal_modes:
        m = momentum_scalar((2, -1), {3: 1}, {4: 2}, s)
        assert momentum_vf((2, -1), {3: 1}, {4: 2}, ("z", j), s) + j == m


def test_momentum_additivity_random():
    import random
    rnd = random.Random(7)
    s = SiteSet((-2, 1, 3), 10)
    for _ in range(200):
        k1 = tuple(rnd.randint(-3, 3) for _ in range(3))
        k2 = tuple(rnd.randint(-3, 3) for _ in range(3))
        a1 = {rnd.choice(s.normal_modes): rnd.randint(1, 2)}
        a2 = {rnd.choice(s.normal_modes): rnd.randint(1, 2)}
        b1 = {rnd.choice(s.normal_modes): rnd.randint(1, 2)}
        b2 = {rnd.choice(s.normal_modes): rnd.randint(1, 2)}
        m1 = momentum_scalar(k1, a1, b1, s)
        m2 = momentum_scalar(k2, a2, b2, s)
        ksum = tuple(x + y for x, y in zip(k1, k2))
        asum = dict(a1)
        for j, p in a2.items():
            asum[j] = asum.get(j, 0) + p
        bsum = dict(b1)
        for j, p in b2.items():
            bsum[j] = bsum.get(j, 0) + p
        assert momentum_scalar(ksum, asum, bsum, s) == m1 + m2


def test_admissible_verdicts():
    assert admissible(SiteSet((-1, 1), 6)) == VIOLATES_DIVISIBILITY    # 3 | 0
    assert admissible(SiteSet((-1, 2), 6)) == ADMISSIBLE               # 3 does not divide 1
    assert admissible(SiteSet((1, 2), 6)) == VIOLATES_SIGN_CONDITION   # j1 j2 > 0
    assert admissible(SiteSet((-2, 1, 3), 6)) == ADMISSIBLE            # 5 does not divide 2
    with pytest.raises(ValueError):
        admissible(SiteSet((3,), 6))
