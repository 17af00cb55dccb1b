import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from holderlab.scaling import (DomainError, ScalingExponents, log_psi, phi, preset, preset_table, psi, psi_inv,
                               ratio_psi_phi, upsilon, upsilon_gap_bound, upsilon_two_regime)

LOG = math.log
exps_st = st.builds(
    lambda a1, g1, a2, g2: ScalingExponents(a1, a2, a1 + g1, a2 + g2, strict=False),
    st.floats(0.2, 3), st.floats(0.3, 2), st.floats(0.2, 3), st.floats(0.3, 2))


def E(a1=1.0, a2=1.0, b1=2.0, b2=2.0):
    return ScalingExponents(a1, a2, b1, b2, strict=False)


def grid_upsilon(exps, R, t):
    """Brute-force sup over a log grid of s, refined around the maximizer.

    The objective is evaluated as (R/s) (1 - q) with q = t s / (R psi(s)),
    which stays accurate when the supremum underflows the naive difference.
    """
    def obj(ls):
        q = np.log(t) + ls - np.log(R) - log_psi(exps, np.exp(ls))
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.exp(np.log(R) - ls) * -np.expm1(q)
        return np.where(np.isnan(v), -np.inf, v)

    ls = np.linspace(-700, 700, 20_001)
    for _ in range(8):
        k = int(np.argmax(obj(ls)))
        ls = np.linspace(ls[max(k - 2, 0)], ls[min(k + 2, len(ls) - 1)], 2001)
    return max(float(np.max(obj(ls))), 0.0)


class TestExponents:
    def test_presets(self):
        g = preset("gasket")
        assert g.alpha1 == pytest.approx(LOG(3) / LOG(2)) and g.beta2 == pytest.approx(LOG(5) / LOG(2))
        v = preset("vicsek")
        assert v.gamma1 == pytest.approx(1.0)
        c = preset("carpet")
        assert c.alpha1 == pytest.approx(LOG(8) / LOG(3))
        assert c.beta1 == pytest.approx(LOG(8 * 1.25147) / LOG(3))
        assert c.beta1 == pytest.approx(2.09697, abs=1e-5)
        cab = preset("cable(gasket)")
        assert (cab.alpha1, cab.beta1) == (1.0, 2.0) and cab.alpha2 == g.alpha2
        assert preset("interval") == ScalingExponents(1, 1, 2, 2, name="interval")

    def test_strict_mode(self):
        with pytest.raises(DomainError):
            ScalingExponents(1.0, 1.0, 1.5, 1.5)
        e = ScalingExponents(1.0, 1.0, 1.5, 1.5, strict=False)
        assert e.relaxed and e.to_dict()["strict"] is False
        with pytest.raises(DomainError):
            ScalingExponents(2.0, 2.0, 1.5, 1.5, strict=False)
        with pytest.raises(DomainError):
            ScalingExponents(0.0, 1.0, 2.0, 2.0, strict=False)

    def test_roundtrip_dict(self):
        e = preset("carpet", rho=1.3)
        assert ScalingExponents.from_dict(e.to_dict()) == e

    def test_preset_table_covers_cables(self):
        t = preset_table()
        assert {"interval", "gasket", "vicsek", "carpet", "cable(carpet)"} <= set(t)


class TestPowerLaws:
    def test_phi_examples(self):
        assert phi(E(a1=1.7, a2=1.7), 1.0) == 1.0
        assert phi(E(a1=2.0, a2=2.0, b1=3.0, b2=3.0), 0.5) == pytest.approx(0.25)
        assert phi(preset("carpet"), 3.0) == pytest.approx(8.0, rel=1e-14)

    def test_psi_examples(self):
        assert psi(E(), 0.5) == pytest.approx(0.25)
        assert psi_inv(E(), 4.0) == pytest.approx(2.0)

    def test_psi_inverse_roundtrip(self):
        r = np.logspace(-3, 3, 100)
        for name in ("gasket", "cable(carpet)", "vicsek"):
            e = preset(name)
            assert np.max(np.abs(psi_inv(e, psi(e, r)) / r - 1)) < 1e-14

    def test_domain_errors(self):
        e = preset("gasket")
        for f in (phi, psi, psi_inv, ratio_psi_phi):
            with pytest.raises(DomainError):
                f(e, 0.0)
            with pytest.raises(DomainError):
                f(e, -1.0)

    def test_ratio_examples(self, rng):
        g = preset("gasket")
        assert ratio_psi_phi(g, 1.0) == 1.0
        gamma = LOG(5 / 3) / LOG(2)
        assert gamma == pytest.approx(0.73697, abs=1e-5)
        assert ratio_psi_phi(g, 0.5) == pytest.approx(2 ** -gamma, rel=1e-14)
        assert ratio_psi_phi(g, 0.5) == pytest.approx(0.6, abs=0.002)
        r = np.sort(rng.uniform(1e-3, 1e3, size=(1000, 2)), axis=1)
        assert np.all(ratio_psi_phi(g, r[:, 0]) <= ratio_psi_phi(g, r[:, 1]))

    def test_extreme_arguments_stay_finite_in_log_space(self):
        from holderlab.scaling import log_phi
        assert np.isfinite(log_phi(preset("gasket"), 1e-300))
        assert upsilon(preset("gasket"), 1e200, 1e-200) > 0

    @given(exps_st, st.floats(1e-3, 1e3))
    def test_continuity_at_one(self, e, _):
        for f in (phi, psi, ratio_psi_phi):
            assert f(e, 1 - 1e-12) == pytest.approx(f(e, 1.0), rel=1e-9)

    @given(exps_st, st.floats(1e-3, 1e3), st.floats(1.001, 10))
    def test_strictly_increasing(self, e, r, k):
        assert phi(e, r) < phi(e, r * k) and psi(e, r) < psi(e, r * k)


class TestUpsilon:
    def test_gaussian_example(self):
        assert upsilon(E(), 1.0, 1.0) == pytest.approx(0.25, rel=1e-14)
        assert grid_upsilon(E(), 1.0, 1.0) == pytest.approx(0.25, rel=1e-8)

    def test_zero_distance(self):
        for t in (1e-3, 1.0, 1e4):
            assert upsilon(preset("gasket"), 0.0, t) == 0.0

    def test_errors(self):
        with pytest.raises(DomainError):
            upsilon(preset("gasket"), 1.0, 0.0)
        with pytest.raises(DomainError):
            upsilon(preset("gasket"), -1.0, 1.0)
        with pytest.raises(DomainError):
            upsilon(ScalingExponents(0.3, 0.3, 0.9, 0.9, strict=False), 1.0, 1.0)

    def test_matches_grid_sup(self, rng):
        worst = 0.0
        for _ in range(100):
            a1, a2 = rng.uniform(0.5, 2.5, 2)
            e = E(a1, a2, max(a1 + rng.uniform(0.3, 1.5), 1.1), max(a2 + rng.uniform(0.3, 1.5), 1.1))
            R, t = 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-2, 2)
            exact, grid = upsilon(e, R, t), grid_upsilon(e, R, t)
            worst = max(worst, abs(exact - grid) / max(abs(grid), 1e-300))
        assert worst < 1e-8

    def test_lower_bound_from_psi_inverse(self, rng):
        e = preset("carpet")
        R, t = 10 ** rng.uniform(-2, 3, 500), 10 ** rng.uniform(-2, 3, 500)
        u = upsilon(e, R, t)
        assert np.all(u >= R / psi_inv(e, t) - 1 - 1e-12) and np.all(u >= 0)

    @given(exps_st, st.floats(0, 100), st.floats(1e-2, 1e2), st.floats(1, 10))
    def test_monotone(self, e, R, t, k):
        if min(e.beta1, e.beta2) <= 1:
            return
        assert upsilon(e, R * k, t) >= upsilon(e, R, t) - 1e-12
        assert upsilon(e, R, t * k) <= upsilon(e, R, t) + 1e-12

    def test_two_regime_bracket(self):
        for name in ("gasket", "carpet", "cable(vicsek)"):
            e = preset(name)
            R, t = np.meshgrid(np.logspace(-3, 3, 61), np.logspace(-3, 3, 61))
            ratio = upsilon(e, R, t) / upsilon_two_regime(e, R, t)
            big = upsilon_two_regime(e, R, t) > 1  # the comparison is asymptotic in R^beta/t
            assert ratio[big].min() > 0.05 and ratio[big].max() < 20


class TestGapBound:
    def test_gaussian_example(self):
        assert upsilon_gap_bound(E(), 1.0) == pytest.approx(0.25, rel=1e-14)

    def test_errors(self):
        with pytest.raises(DomainError):
            upsilon_gap_bound(E(), 0.0)

    def test_grid_never_exceeds_bound(self, rng):
        for _ in range(20):
            b1, b2 = rng.uniform(1.2, 4, 2)
            e = E(0.5, 0.5, b1, b2)
            A = 10 ** rng.uniform(-1, 1.5)
            t = np.logspace(-6, 6, 200)
            T, S = np.meshgrid(t, t)
            grid = np.max(A * psi_inv(e, T) / psi_inv(e, S) - T / S)
            assert grid <= upsilon_gap_bound(e, A) * (1 + 1e-12) + 1e-12

    def test_monotone_in_A(self, rng):
        e = preset("vicsek")
        A = np.sort(10 ** rng.uniform(-2, 2, (50, 2)), axis=1)
        for a, b in A:
            assert upsilon_gap_bound(e, a) <= upsilon_gap_bound(e, b)
