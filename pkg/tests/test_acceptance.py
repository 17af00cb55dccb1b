"""Acceptance criteria. Each prints one PASS/FAIL line; also runnable as a script.

    python3 tests/test_acceptance.py [N ...]
"""

import math
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from holderlab.dirichlet import EnergyForm, energy, solve_harmonic, trace_form
from holderlab.graphs import build_compact, build_prefractal, graph_from_edges
from holderlab.heat import (dt_heat_kernel, heat_kernel, kernel_matrix, semigroup_apply, spectrum)
from holderlab.resistance import (eff_resistance, family_terminals, level_resistances,
                                  oscillation_check, resistance_matrix)
from holderlab.scaling import (ScalingExponents, log_psi, preset, psi_inv, upsilon,
                               upsilon_gap_bound)
from holderlab.verify import (NOISE_FLOOR, check_functional_inequalities, check_harmonic_regularity,
                              check_heat_kernel_bounds, check_volume, equivalence_matrix)

SLACK = 1e-12


@lru_cache(maxsize=None)
def graph(family, level):
    return build_prefractal(family, level)


@lru_cache(maxsize=None)
def heat_report(family, level, exps=None):
    return check_heat_kernel_bounds(graph(family, level), preset(exps or family))


@lru_cache(maxsize=None)
def harmonic_report(family, level, exps=None):
    return check_harmonic_regularity(graph(family, level), preset(exps or family), trials=200)


def timed(fn):
    def wrapped():
        t0 = time.perf_counter()
        ok, detail = fn()
        return ok, f"{detail} [{time.perf_counter() - t0:.1f}s]"
    wrapped.__doc__ = fn.__doc__
    return wrapped


# ---------------------------------------------------------------------------


@timed
def criterion_1():
    """gasket corner-to-corner resistance ratios -> 5/3"""
    dense = []
    for n in (1, 2):
        g, A, B = family_terminals("gasket", n)
        R = resistance_matrix(EnergyForm(g))
        dense.append(R[A[0], B[0]])
    R = level_resistances("gasket", range(0, 8))
    oracle = abs(R[1] - dense[0]) <= 1e-10 * dense[0] and abs(R[2] - dense[1]) <= 1e-10 * dense[1]
    ratios = R[1:] / R[:-1]
    late = ratios[3:]  # R_{n+1}/R_n for n >= 3
    ok = oracle and np.all(np.abs(late / (5 / 3) - 1) <= 0.01)
    return ok, f"ratios n=3..6 {np.round(late, 6).tolist()}, dense oracle {'ok' if oracle else 'MISMATCH'}"


@timed
def criterion_2():
    """carpet side-to-side resistance ratios in [7/6, 3/2]"""
    R = level_resistances("carpet", range(2, 6))
    ratios = R[1:] / R[:-1]  # R3/R2, R4/R3, R5/R4
    inside = np.all((ratios >= 7 / 6) & (ratios <= 1.5))
    trend = "monotone toward 1.25" if np.all(np.diff(ratios) < 0) and ratios[-1] > 1.25 else "not monotone"
    return bool(inside), f"ratios {np.round(ratios, 4).tolist()} ({trend})"


@timed
def criterion_3():
    """volume exponents"""
    out, ok = [], True
    for fam, lvl in (("interval", 10), ("gasket", 7), ("vicsek", 5), ("carpet", 4)):
        e = preset(fam)
        rep = check_volume(graph(fam, lvl), e)
        s = rep.fits["slope_all"]["slope"]
        good = abs(s - e.alpha1) <= 0.1
        ok &= good
        out.append(f"{fam}{lvl} {s:.3f}/{e.alpha1:.3f}")
    return ok, ", ".join(out)


@timed
def criterion_4():
    """on-diagonal heat decay slope -alpha/beta"""
    out, ok = [], True
    for fam, lvl in (("gasket", 5), ("vicsek", 4)):
        e = preset(fam)
        s = heat_report(fam, lvl).fits["ondiag_all"]["slope"]
        target = -e.alpha1 / e.beta1
        ok &= abs(s - target) <= 0.05
        out.append(f"{fam}{lvl} {s:.3f}/{target:.3f}")
    return ok, ", ".join(out)


@timed
def criterion_5():
    """HR envelope slope = beta - alpha"""
    out, ok = [], True
    for fam, lvl, tol in (("gasket", 8, 0.05), ("vicsek", 5, 0.05), ("carpet", 4, 0.1)):
        e = preset(fam)
        s = harmonic_report(fam, lvl).fits["hr_envelope_all"]["slope"]
        good = abs(s - e.gamma1) <= tol
        ok &= good
        out.append(f"{fam}{lvl} {s:.3f}/{e.gamma1:.3f}{'' if good else ' MISS'}")
    return ok, ", ".join(out)


@timed
def criterion_6():
    """NLE floor stable across two decades of t"""
    out, ok = [], True
    for fam, lvl in (("gasket", 7), ("vicsek", 4), ("interval", 8), ("carpet", 4)):
        rep = heat_report(fam, lvl)
        nle = rep.constants["NLE_eps_0.25"]
        decades = math.log10(rep.window["t"][1] / rep.window["t"][0])
        good = rep.checks["NLE"] == "pass" and nle["min"] > 0 and nle["factor"] < 4 and decades >= 2
        ok &= good
        out.append(f"{fam}{lvl} floor {nle['min']:.3g} x{nle['factor']:.2f} over {decades:.1f} decades")
    return ok, ", ".join(out)


def random_graph(rng, n=None):
    """Connected graph: random tree plus extra edges, random conductances and masses."""
    n = n or int(rng.integers(6, 30))
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    extra = rng.integers(0, n, size=(int(rng.integers(0, 2 * n)), 2))
    edges += [(int(a), int(b)) for a, b in extra if a != b]
    edges = sorted({tuple(sorted(e)) for e in edges})
    return graph_from_edges(n, edges, conductance=10 ** rng.uniform(-1, 1, len(edges)),
                            mass=10 ** rng.uniform(-1, 1, n))


@timed
def criterion_7():
    """zero-violation suites"""
    rng = np.random.default_rng(2024)
    N = 100
    bad = dict.fromkeys(("max_principle", "oscillation", "morrey", "sign", "markov", "triangle",
                         "rayleigh", "trace"), 0)
    trace_err = 0.0
    osc_trials = 0
    for _ in range(N):
        g = random_graph(rng)
        f = EnergyForm(g)
        n = g.n
        perm = rng.permutation(n)
        Y = np.sort(perm[: int(rng.integers(2, n - 1))])
        gY = rng.uniform(-1, 1, len(Y))
        u = solve_harmonic(f, Y, gY).values
        sc = np.abs(gY).max()
        bad["max_principle"] += int(u.max() > gY.max() + SLACK * sc or u.min() < gY.min() - SLACK * sc)

        R = resistance_matrix(f)
        w = rng.normal(size=n)
        Ew = energy(f, w)
        lhs = (w[:, None] - w[None, :]) ** 2
        bad["morrey"] += int(np.any(lhs > R * Ew + SLACK * max(Ew * R.max(), lhs.max())))

        side = rng.random(n) < 0.5
        a = np.where(side, rng.random(n), 0.0)
        b = np.where(~side, rng.random(n), 0.0)
        bad["sign"] += int(energy(f, a, b) > SLACK * math.sqrt(energy(f, a) * energy(f, b)))

        v = rng.normal(scale=2, size=n)
        bad["markov"] += int(energy(f, np.clip(v, 0, 1)) > energy(f, v) * (1 + SLACK))

        x, y, z = rng.choice(n, 3, replace=False)
        bad["triangle"] += int(R[x, z] > (R[x, y] + R[y, z]) * (1 + SLACK))

        A, B = perm[:1], perm[1 : 1 + int(rng.integers(1, n - 1))]
        c2 = g.conductance * (1 + rng.random(len(g.conductance)) * (rng.random(len(g.conductance)) < 0.5))
        r1 = eff_resistance(f, A, B)
        r2 = eff_resistance(EnergyForm(g.with_conductance(c2)), A, B)
        bad["rayleigh"] += int(r2 > r1 * (1 + SLACK))

        keep = np.sort(perm[: max(3, n // 2)])
        tr = trace_form(f, keep)
        i, j = rng.choice(len(keep), 2, replace=False)
        full = eff_resistance(f, [keep[i]], [keep[j]])
        err = abs(eff_resistance(tr, [i], [j]) - full) / full
        trace_err = max(trace_err, err)
        bad["trace"] += int(err > 1e-10)

    for fam, lvl in (("gasket", 3), ("vicsek", 2), ("carpet", 1)):
        g = build_compact(fam, lvl)
        f = EnergyForm(g)
        B = np.sort(rng.choice(g.n, g.n // 3, replace=False))
        rep = oscillation_check(f, B, trials=N, seed=int(rng.integers(1 << 30)), slack=SLACK)
        bad["oscillation"] += rep.constants["violations"]
        osc_trials += N
    ok = not any(bad.values())
    return ok, (f"{N} random graphs, {osc_trials} oscillation trials; violations "
                + " ".join(f"{k}={v}" for k, v in bad.items()) + f"; trace rel err {trace_err:.1e}")


@timed
def criterion_8():
    """exact semigroup identities"""
    g = graph("gasket", 4)
    f = EnergyForm(g)
    sp_ = spectrum(f)
    m = g.mass
    worst = dict.fromkeys(("conservation", "symmetry", "chapman_kolmogorov", "cn_vs_spectral", "dt_fd"), 0.0)
    for t in (0.1, 1.0, 10.0, 100.0):
        P = kernel_matrix(sp_, t)
        worst["conservation"] = max(worst["conservation"], float(np.abs(P @ m - 1).max()))
        worst["symmetry"] = max(worst["symmetry"], float(np.abs(P - P.T).max() / np.abs(P).max()))
        Ph = kernel_matrix(sp_, t / 2)
        ck = (Ph * m) @ Ph
        worst["chapman_kolmogorov"] = max(worst["chapman_kolmogorov"], float(np.abs(ck - P).max() / np.abs(P).max()))
    rng = np.random.default_rng(8)
    for lvl in (3, 4):
        f3 = EnergyForm(graph("gasket", lvl))
        s3 = sp_ if lvl == 4 else spectrum(f3)
        for t in (0.5, 5.0, 50.0):
            u0 = rng.normal(size=f3.n)
            a = semigroup_apply(f3, t, u0, spec=s3).values
            b = semigroup_apply(f3, t, u0, method="crank_nicolson").values
            worst["cn_vs_spectral"] = max(worst["cn_vs_spectral"], float(np.abs(a - b).max() / np.abs(u0).max()))
    h = 1e-5
    below_floor = 0
    for x, y in ((3, 3), (3, 17), (0, 100)):
        for t in (0.5, 5.0, 50.0):
            # entries under the roundoff floor of the spectral sum cannot be differenced at this h
            if heat_kernel(sp_, t, x, y) < NOISE_FLOOR * heat_kernel(sp_, t, x, x):
                below_floor += 1
                continue
            fd = (heat_kernel(sp_, t + h, x, y) - heat_kernel(sp_, t - h, x, y)) / (2 * h)
            d = dt_heat_kernel(sp_, t, x, y)
            worst["dt_fd"] = max(worst["dt_fd"], abs(fd - d) / abs(d))
    limits = {"conservation": 1e-8, "symmetry": 1e-12, "chapman_kolmogorov": 1e-8, "cn_vs_spectral": 1e-6,
              "dt_fd": 1e-6}
    ok = all(worst[k] < limits[k] for k in limits)
    return ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" ({below_floor} entries below noise floor)"


def _grid_upsilon(exps, R, t):
    """Brute-force sup_s (R/s - t/Psi(s)) over a refined log grid."""
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


@timed
def criterion_9():
    """scaling unit suite"""
    rng = np.random.default_rng(9)
    ups = 0.0
    for _ in range(100):
        a1, a2 = rng.uniform(0.5, 2.5, 2)
        e = ScalingExponents(a1, a2, a1 + rng.uniform(0.3, 1.5), a2 + rng.uniform(0.3, 1.5), strict=False)
        if min(e.beta1, e.beta2) <= 1.05:
            e = ScalingExponents(a1, a2, max(e.beta1, 1.1), max(e.beta2, 1.1), strict=False)
        R, t = 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-2, 2)
        exact, grid = upsilon(e, R, t), _grid_upsilon(e, R, t)
        ups = max(ups, abs(exact - grid) / max(grid, 1e-300))
    gap_ok = 0
    ts = np.logspace(-6, 6, 200)
    T, S = np.meshgrid(ts, ts)
    for _ in range(20):
        b1, b2 = rng.uniform(1.2, 4, 2)
        e = ScalingExponents(0.5, 0.5, b1, b2, strict=False)
        A = 10 ** rng.uniform(-1, 1.5)
        grid = np.max(A * psi_inv(e, T) / psi_inv(e, S) - T / S)
        gap_ok += grid <= upsilon_gap_bound(e, A) * (1 + 1e-12) + 1e-12
    two = graph_from_edges(2, [(0, 1)])
    sp2 = spectrum(EnergyForm(two))
    tt = np.logspace(-3, 2, 50)
    p = heat_kernel(sp2, tt, [0, 1], [0])[:, :, 0]
    exact = np.stack([(1 + np.exp(-2 * tt)) / 2, (1 - np.exp(-2 * tt)) / 2], axis=1)
    kerr = float(np.abs(p - exact).max())
    ok = ups < 1e-8 and gap_ok == 20 and kerr < 1e-12
    return ok, f"upsilon rel err {ups:.1e} (100), gap bound held {gap_ok}/20, two-vertex err {kerr:.1e}"


@timed
def criterion_10():
    """equivalence matrix consistency plus negative control"""
    out, ok = [], True
    for fam, lvl in (("gasket", 8), ("vicsek", 5)):
        g, e = graph(fam, lvl), preset(fam)
        reps = (heat_report(fam, lvl), harmonic_report(fam, lvl),
                check_functional_inequalities(g, e))
        m = equivalence_matrix(*reps)
        v = m["verdicts"]
        good = m["consistent"] and all(x == "pass" for x in v.values())
        ok &= good
        out.append(f"{fam}{lvl} " + " ".join(f"{k}={x}" for k, x in v.items()))
    vol = check_volume(graph("carpet", 4), preset("gasket"))
    heat = heat_report("carpet", 4, "gasket")
    harm = harmonic_report("carpet", 4, "gasket")
    neg = vol.verdict == "fail" and "fail" in (heat.verdict, harm.verdict)
    ok &= neg
    out.append(f"control carpet4+gasket: volume={vol.verdict} heat={heat.verdict} harmonic={harm.verdict}")
    return ok, "; ".join(out)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10]


def line(k, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {k}: {CRITERIA[k - 1].__doc__}: {detail}"


@pytest.mark.parametrize("k", range(1, len(CRITERIA) + 1))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    picks = [int(a) for a in sys.argv[1:]] or range(1, len(CRITERIA) + 1)
    failed = 0
    for k in picks:
        ok, detail = CRITERIA[k - 1]()
        failed += not ok
        print(line(k, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
