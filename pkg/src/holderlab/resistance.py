"""Effective resistance and resistance-based estimates."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .dirichlet import EnergyForm, Potential, TraceForm, _complement, _solve_spd, energy, solve_harmonic
from .graphs import ball, build_compact
from .report import (ConditionReport, FitError, bracket, combine, fit_exponent, mesoscopic_window,
                     new_report, rng_for)
from .scaling import ratio_psi_phi


def _set(form, A, what):
    A = np.unique(np.atleast_1d(np.asarray(A, dtype=np.int64)))
    if len(A) == 0:
        raise ValueError(f"{what} must be nonempty")
    if A[0] < 0 or A[-1] >= form.n:
        raise ValueError(f"{what} contains an unknown vertex")
    return A


def resistance_potential(form: EnergyForm, A, B) -> tuple[float, Potential]:
    """R(A, B) and the minimizing potential (0 on A, 1 on B)."""
    A, B = _set(form, A, "A"), _set(form, B, "B")
    if np.intersect1d(A, B).size:
        raise ValueError("A and B overlap")
    Y = np.concatenate([A, B])
    g = np.concatenate([np.zeros(len(A)), np.ones(len(B))])
    if isinstance(form, TraceForm) and form.implicit:
        # R between subsets of Y; extend through the parent form
        v = solve_harmonic(form.parent, form.Y[Y], g)
        e = float(v.values @ (form.parent.K @ v.values))
        v = form.potential(v.values[form.Y])
    else:
        v = solve_harmonic(form, Y, g)
        e = energy(form, v)
    if not e > 0:
        raise ValueError("zero energy between A and B (disconnected?)")
    return 1.0 / e, v


def eff_resistance(form: EnergyForm, A, B) -> float:
    return resistance_potential(form, A, B)[0]


def resistance_matrix(form: EnergyForm, vertices=None) -> np.ndarray:
    """Pairwise R(x, y) via the pseudo-inverse of K (small graphs only)."""
    K = form.K.toarray()
    n = len(K)
    # (K + J/n)^{-1} is a generalized inverse that kills the constant mode
    G = sla.inv(K + np.full((n, n), 1.0 / n))
    idx = np.arange(n) if vertices is None else np.asarray(vertices)
    Gs = G[np.ix_(idx, idx)]
    d = np.diag(Gs)
    R = d[:, None] + d[None, :] - Gs - Gs.T
    np.fill_diagonal(R, 0.0)
    return np.maximum(R, 0.0)


def pair_resistances(form: EnergyForm, x: int, ys) -> np.ndarray:
    """R(x, y) for many y with one factorization: ground x, inject unit current at each y."""
    ys = np.asarray(ys, dtype=np.int64)
    out = np.zeros(len(ys))
    mask = ys != x
    if not mask.any():
        return out
    I = _complement(form.n, np.array([x]))
    K = form.K.tocsr()[I][:, I]
    pos = np.searchsorted(I, ys[mask])
    rhs = np.zeros((len(I), len(pos)))
    rhs[pos, np.arange(len(pos))] = 1.0
    if K.shape[0] >= 500:
        lu = spla.splu(K.tocsc())
        X = lu.solve(rhs)
    else:
        X, _ = _solve_spd(K, rhs)
    out[mask] = X[pos, np.arange(len(pos))]
    return out


def resistance_to_complement(form: EnergyForm, x: int, inside) -> float:
    """R(x, X \\ B) for a vertex set B containing x."""
    inside = np.asarray(inside, dtype=np.int64)
    mask = np.ones(form.n, dtype=bool)
    mask[inside] = False
    out = np.flatnonzero(mask)
    if len(out) == 0:
        raise ValueError("the set exhausts the graph")
    return eff_resistance(form, [x], out)


def family_terminals(family: str, level: int):
    """Compact graph plus the source/target sets used for per-level resistance ratios:
    opposite sides for the carpet, extreme corners otherwise."""
    g = build_compact(family, level)
    if g.meta["family"] == "carpet":
        A = np.flatnonzero(g.coords[:, 0] == 0)
        B = np.flatnonzero(g.coords[:, 0] == g.denom)
    else:
        far = (g.denom, g.denom) if g.meta["family"] == "vicsek" else (g.denom, 0)
        A, B = [g.index_of((0, 0))], [g.index_of(far)]
    return g, A, B


def level_resistances(family: str, levels) -> np.ndarray:
    out = []
    for n in levels:
        g, A, B = family_terminals(family, n)
        out.append(eff_resistance(EnergyForm(g), A, B))
    return np.array(out)


def resistance_scaling_fit(graph, exps, n_centers: int = 12, per_scale: int = 3, seed: int = 0,
                           tol: float = 0.05, bracket_factor: float = 4.0, ratio_levels=None):
    """Fit log R(x, y) against log (Psi/Phi)(d(x, y)) over the mesoscopic window."""
    rng = rng_for(seed, "resistance")
    win = mesoscopic_window(graph)
    rep = new_report("resistance", graph, exps, window=win.to_dict())
    form = EnergyForm(graph)
    xs = rng.choice(win.centers, size=min(n_centers, len(win.centers)), replace=False)
    xs.sort()
    nb = max(2, int(np.ceil(per_scale * max(win.scales, 0)))) + 1
    edges = np.geomspace(win.r_lo, win.r_hi, nb) if win.scales > 0 else np.array([])
    D, R, X = [], [], []
    for x in xs:
        d = graph.distances_from([x], limit=win.r_hi * 1.001)[0]
        ys = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            cand = np.flatnonzero((d >= lo) & (d < hi))
            if len(cand):
                ys.append(int(rng.choice(cand)))
        if not ys:
            rep.skipped += 1
            continue
        ys = np.array(ys)
        R.extend(pair_resistances(form, int(x), ys))
        D.extend(d[ys])
        X.extend([int(x)] * len(ys))
    D, R = np.array(D), np.array(R)
    rep.samples["pairs"] = {"x": np.array(X), "d": D, "R": R,
                            "ratio": R / ratio_psi_phi(exps, D) if len(D) else D}
    verdicts = []
    if win.scales < 3:
        rep.notes.append(f"window spans only {win.scales:.2f} dyadic scales")
        verdicts.append("inconclusive")
    try:
        fit = fit_exponent(ratio_psi_phi(exps, D), R)
        rep.fits["R_vs_psi_over_phi"] = {**fit.to_dict(), "target": 1.0, "tol": tol}
        ok = abs(fit.slope - 1.0) <= tol
        rep.checks["slope"] = "pass" if ok else "fail"
        verdicts.append(rep.checks["slope"])
        br = bracket(R / ratio_psi_phi(exps, D))
        rep.constants["C_R"] = br
    except FitError as e:
        rep.notes.append(f"fit impossible: {e}")
        verdicts.append("inconclusive")
    fam = graph.meta.get("family")
    if fam in ("interval", "gasket", "vicsek", "carpet"):
        levels = ratio_levels if ratio_levels is not None else range(0, int(graph.meta.get("level", 0)) + 1)
        levels = list(levels)
        if len(levels) >= 2:
            Rl = level_resistances(fam, levels)
            rep.samples["levels"] = {"level": np.array(levels), "R": Rl}
            rep.constants["level_ratios"] = (Rl[1:] / Rl[:-1]).tolist()
    rep.verdict = combine(verdicts)
    return rep


def oscillation_check(form: EnergyForm, ball, trials: int = 100, seed: int = 0,
                      slack: float = 1e-12):
    """|u(x)-u(y)| <= R(x,y)/R(x, X\\B) * osc_{X\\B} u for harmonic u in B."""
    B = np.unique(np.asarray(ball, dtype=np.int64))
    if len(B) == 0 or len(B) >= form.n:
        raise ValueError("B must be a nonempty proper vertex set")
    rng = rng_for(seed, "oscillation")
    mask = np.ones(form.n, dtype=bool)
    mask[B] = False
    Y = np.flatnonzero(mask)
    Rxy = resistance_matrix(form, B)
    Rout = np.array([eff_resistance(form, [int(x)], Y) for x in B])
    worst, violations, rows = np.inf, 0, []
    for k in range(trials):
        g = rng.uniform(-1, 1, len(Y)) if k % 2 == 0 else rng.choice([-1.0, 1.0], len(Y))
        if k == 0:
            g = np.full(len(Y), 0.3)  # constant data: both sides vanish
        u = solve_harmonic(form, Y, g).values
        osc = float(g.max() - g.min())
        lhs = np.abs(u[B][:, None] - u[B][None, :])
        rhs = Rxy / Rout[:, None] * osc
        scale = max(float(np.abs(g).max()), 1e-300)  # slack is relative to the data size
        s = (rhs - lhs) / scale
        worst = min(worst, float(s.min()))
        violations += int(np.sum(s < -slack))
        rows.append((k, float(lhs.max()), float(rhs.max()), float(s.min())))
    rep = ConditionReport("oscillation", {"hash": form.label, "n": form.n}, {},
                          verdict="pass" if violations == 0 else "fail")
    rep.constants["worst_slack"] = worst
    rep.constants["violations"] = violations
    rep.samples["trials"] = {"trial": [r[0] for r in rows], "max_lhs": [r[1] for r in rows],
                             "max_rhs": [r[2] for r in rows], "min_slack": [r[3] for r in rows]}
    return rep


def ball_resistance_check(graph, exps, n_centers: int = 10, per_scale: int = 2, seed: int = 0,
                          bracket_factor: float = 4.0, radii=None, centers=None):
    """R(x0, X \\ B(x0, r)) * Phi(r)/Psi(r) across centres and radii."""
    rng = rng_for(seed, "ball_resistance")
    win = mesoscopic_window(graph)
    form = EnergyForm(graph)
    if centers is None:
        centers = rng.choice(win.centers, size=min(n_centers, len(win.centers)), replace=False)
        centers.sort()
    if radii is None:
        nr = max(2, int(np.ceil(per_scale * max(win.scales, 1)))) + 1
        radii = np.geomspace(win.r_lo, win.r_hi, nr)
    rep = new_report("ball_resistance", graph, exps, window={**win.to_dict(), "r": [float(min(radii)), float(max(radii))]})
    X, Rr, Rv = [], [], []
    for x in centers:
        for r in radii:
            inside = ball(graph, int(x), float(r))
            if len(inside) >= graph.n:
                rep.skipped += 1
                continue
            X.append(int(x))
            Rr.append(float(r))
            Rv.append(resistance_to_complement(form, int(x), inside))
    X, Rr, Rv = np.array(X), np.array(Rr), np.array(Rv)
    ratio = Rv / ratio_psi_phi(exps, Rr) if len(Rr) else Rr
    rep.samples["balls"] = {"x": X, "r": Rr, "R": Rv, "ratio": ratio}
    rep.constants["C"] = bracket(ratio)
    per_r = [float(np.min(ratio[Rr == r])) for r in np.unique(Rr)] if len(Rr) else []
    rep.constants["per_radius_min"] = bracket(per_r)
    verdicts = []
    if len(per_r) == 0:
        verdicts.append("inconclusive")
    else:
        stable = rep.constants["per_radius_min"]["factor"] < bracket_factor and min(per_r) > 0
        rep.checks["lower_constant"] = "pass" if stable else "fail"
        verdicts.append(rep.checks["lower_constant"])
    rep.verdict = combine(verdicts)
    return rep
