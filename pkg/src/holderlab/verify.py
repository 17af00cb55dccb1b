"""Empirical estimators for volume growth, heat kernel bounds, harmonic
regularity and functional inequalities on finite graph windows.

Every estimator samples base points in the central half of the window,
computes a normalized ratio whose boundedness is the condition being
tested, and reports the empirical constant bracket, fitted exponents and a
verdict. Exponent checks pass when the fitted slope is within tolerance;
constant checks pass when the per-scale constant varies by less than
``bracket_factor`` across the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .dirichlet import EnergyForm, solve_harmonic, solve_poisson
from .graphs import WeightedGraph, ball, central_vertices, volumes_from_distances
from .heat import (SPECTRUM_CAP, _crank_nicolson_multi, HeatKernelTable, Spectrum, cached_table, dyadic_grid, fiedler_value, log_time_grid,
                   spectrum)
from .report import (ConditionReport, FitError, FitResult, bracket, boundary_vertices, combine,
                     dyadic_span, fit_exponent, mesoscopic_window, new_report, rng_for)
from .scaling import ScalingExponents, phi, psi, psi_inv, ratio_psi_phi, upsilon

__all__ = [
    "DEFAULT_TOLERANCES", "ExperimentPlan", "FitResult", "check_volume", "check_heat_kernel_bounds",
    "check_harmonic_regularity", "check_functional_inequalities", "equivalence_matrix",
    "fit_exponent", "heat_window", "poincare_constant", "dirichlet_eigenvalue",
]

DEFAULT_TOLERANCES = {
    "volume_slope": 0.1,
    "ondiag_slope": 0.05,
    "hr_slope": 0.05,
    "resistance_slope": 0.05,
    "bracket_factor": 4.0,
    "nle_eps": 0.25,
}

# entries below this fraction of the on-diagonal value are dominated by roundoff in
# the spectral sum, so sup-type ratios that multiply them by exp(Upsilon) skip them
NOISE_FLOOR = 1e-10
SWEEP_CN_TOL = 1e-6  # ~3e-6 relative kernel accuracy, far inside the factor-4 brackets


def _tol(tolerances, key):
    t = dict(DEFAULT_TOLERANCES)
    if tolerances:
        t.update(tolerances)
    return t[key]


def _branches(exps: ScalingExponents, x, lo_target, hi_target):
    """Split samples at 1 when the two branches have different exponents."""
    x = np.asarray(x)
    if lo_target == hi_target:
        return [("all", np.ones(len(x), bool), hi_target)]
    return [("small", x < 1.0, lo_target), ("large", x >= 1.0, hi_target)]


def _slope_check(rep, name, x, y, target, tol, mode="ls"):
    try:
        fit = fit_exponent(x, y, mode=mode)
    except FitError as e:
        rep.notes.append(f"{name}: {e}")
        return "inconclusive"
    rep.fits[name] = {**fit.to_dict(), "target": target, "tol": tol}
    if fit.span_scales < 3:
        rep.notes.append(f"{name}: fit spans only {fit.span_scales:.2f} dyadic scales")
        return "inconclusive"
    return "pass" if abs(fit.slope - target) <= tol else "fail"


def _stability(values, factor):
    """pass when a per-scale constant stays positive and within ``factor``."""
    br = bracket(values)
    if br["min"] is None:
        return "inconclusive", br
    ok = br["min"] > 0 and br["factor"] < factor
    return ("pass" if ok else "fail"), br


# ---------------------------------------------------------------------------
# volume


def check_volume(graph: WeightedGraph, exps: ScalingExponents, n_centers: int = 50, seed: int = 0,
                 r_lo=None, r_hi=None, per_scale: int = 4, tolerances=None) -> ConditionReport:
    """log V(x, r) against log r over the window, compared with alpha."""
    tol = _tol(tolerances, "volume_slope")
    factor = _tol(tolerances, "bracket_factor")
    win = mesoscopic_window(graph)
    lo = win.r_lo if r_lo is None else float(r_lo)
    hi = win.r_hi if r_hi is None else float(r_hi)
    rng = rng_for(seed, "volume")
    xs = np.sort(rng.choice(win.centers, size=min(n_centers, len(win.centers)), replace=False))
    nr = max(2, int(math.ceil(per_scale * max(dyadic_span(lo, hi), 0)))) + 1
    radii = np.geomspace(lo, hi, nr)
    rep = new_report("volume", graph, exps, window={**win.to_dict(), "r": [lo, hi],
                                                     "scales": dyadic_span(lo, hi)})
    D = graph.distances_from(xs, limit=hi * 1.0001)
    V = np.stack([volumes_from_distances(graph, D[i], radii) for i in range(len(xs))])
    R = np.broadcast_to(radii, V.shape)
    ratio = V / phi(exps, R)
    rep.samples["volume"] = {"x": np.repeat(xs, len(radii)), "r": R.ravel(), "V": V.ravel(),
                             "ratio": ratio.ravel()}
    verdicts = []
    for name, sel, target in _branches(exps, radii, exps.alpha1, exps.alpha2):
        if sel.sum() == 0:
            continue
        verdicts.append(_slope_check(rep, f"slope_{name}", R[:, sel], V[:, sel], target, tol))
    per_r = np.median(ratio, axis=0)
    v, br = _stability(per_r, factor)
    rep.constants["C_VR"] = bracket(ratio)
    rep.constants["per_radius_median"] = br
    rep.checks["slope"] = combine(verdicts)
    rep.checks["C_VR"] = v
    rep.verdict = combine(rep.checks.values())
    return rep


# ---------------------------------------------------------------------------
# heat kernel


def heat_window(graph: WeightedGraph, exps: ScalingExponents, spec, lo_factor: float = 1.5,
                hi_factor: float = 0.25, relax: float = 0.25, time_unit: float = 1.0):
    """Time window [Psi(lo_factor*h), min(Psi(hi_factor*diam), relax/lambda_1)].

    Below Psi(h) the ball B(x, Psi^-1(t)) is the single vertex x, so the
    window starts a little above it; the relaxation cap keeps the kernel
    away from its equilibrium value 1/m(X).

    ``spec`` is a Spectrum or the value of lambda_1 itself. Times are in the
    graph's own units; ``time_unit`` converts them to the units in which Psi
    is expressed.
    """
    h = graph.min_edge_length
    D = graph.diameter_estimate()
    t_lo = psi(exps, lo_factor * h)
    t_hi = psi(exps, hi_factor * D)
    if isinstance(spec, Spectrum):
        lam1 = spec.values[1] if spec.n > 1 else 0.0
    else:
        lam1 = float(spec)
    lam1 /= time_unit  # graph eigenvalues are rates per graph time unit
    if lam1 > 0:
        t_hi = min(t_hi, relax / lam1)
    return t_lo / time_unit, t_hi / time_unit


def _sample_near(rng, drow, radius):
    cand = np.flatnonzero(drow < radius)
    return int(rng.choice(cand))


def check_heat_kernel_bounds(graph: WeightedGraph, exps: ScalingExponents, spec: Spectrum = None,
                             table: HeatKernelTable = None, n_centers: int = 30, n_quads: int = 10000,
                             c2_grid=None, eps=(0.125, 0.25, 0.5), seed: int = 0, times=None,
                             per_decade: int = 40, time_unit: float = 1.0, cache_dir=None,
                             tolerances=None) -> ConditionReport:
    """On-diagonal decay, UHK, NLE, HHK, HHKexp and the time-derivative bound."""
    tol = _tol(tolerances, "ondiag_slope")
    factor = _tol(tolerances, "bracket_factor")
    nle_eps = _tol(tolerances, "nle_eps")
    form = EnergyForm(graph)
    sparse_route = spec is None and table is None and graph.n > SPECTRUM_CAP
    if spec is None and table is None and not sparse_route:
        spec = spectrum(form)
    rng = rng_for(seed, "heat")
    if table is not None:
        times, rows = table.times, table.rows
        if len(table.cols) != graph.n or np.any(table.cols != np.arange(graph.n)):
            if spec is None:
                raise ValueError("a table without all columns needs the spectrum to be completed")
            table = HeatKernelTable.compute(spec, times, rows, np.arange(graph.n))
    else:
        if times is None:
            lam1 = fiedler_value(form) if sparse_route else spec
            t_lo, t_hi = heat_window(graph, exps, lam1, time_unit=time_unit)
            times = log_time_grid(t_lo, t_hi, per_decade) if t_hi > t_lo else np.array([t_lo])
        times = np.asarray(times, dtype=float)
        cen = central_vertices(graph)
        rows = np.sort(rng.choice(cen, size=min(n_centers, len(cen)), replace=False))
        if sparse_route:
            times = dyadic_grid(times)
            table = HeatKernelTable.compute_cn(form, times, rows, np.arange(graph.n), tol=SWEEP_CN_TOL)
        else:
            table = cached_table(spec, times, rows, np.arange(graph.n), cache_dir)
    T = times * time_unit  # times in Psi units
    P = table.values  # (T, X, n)
    nx = len(rows)
    rep = new_report("heat", graph, exps, window={"t": [float(T[0]), float(T[-1])],
                                                  "t_scales": dyadic_span(T[0], T[-1]),
                                                  "n_times": len(T), "n_centers": nx})
    if c2_grid is None:
        c2_grid = np.geomspace(1.0 / 16.0, 1.0, 8)
    c2_grid = np.asarray(c2_grid, dtype=float)

    drow = graph.distances_from(rows)  # (X, n)
    radius_t = psi_inv(exps, T)
    Vt = np.stack([volumes_from_distances(graph, drow[i], radius_t) for i in range(nx)], axis=1)
    Vt = np.maximum(Vt, graph.mass[rows][None, :])  # the open ball always holds its centre
    ar = np.arange(nx)
    pdiag = P[:, ar, rows]  # (T, X)

    # on-diagonal decay
    gm = np.exp(np.mean(np.log(pdiag), axis=1))
    rep.samples["ondiag"] = {"t": T, "p_geomean": gm}
    verdicts = []
    for name, sel, target in _branches(exps, T, -exps.alpha1 / exps.beta1, -exps.alpha2 / exps.beta2):
        if sel.sum():
            verdicts.append(_slope_check(rep, f"ondiag_{name}", T[sel], gm[sel], target, tol))
    rep.checks["ondiag"] = combine(verdicts)

    # sup/inf ratios, one time slice at a time to bound memory
    K = form.K.tocsr()
    logV = np.log(Vt)
    uhk = np.empty((len(c2_grid), len(T)))
    dav = np.empty((len(c2_grid), len(T)))
    nle = {e: np.empty(len(T)) for e in eps}
    for k in range(len(T)):
        Pk = P[k]
        valid = Pk > NOISE_FLOOR * pdiag[k][:, None]
        logpV = np.where(valid, np.log(np.where(valid, Pk, 1.0)) + logV[k][:, None], -np.inf)
        # by symmetry d/dt p_t(x, .) = -L p_t(x, .)
        dP = -(K @ Pk.T).T / graph.mass[None, :] / time_unit  # d/dT in Psi time units
        logdV = np.where(valid, np.log(np.abs(dP) * T[k] + 1e-300) + logV[k][:, None], -np.inf)
        for c, c2 in enumerate(c2_grid):
            ups = upsilon(exps, c2 * drow, T[k])
            uhk[c, k] = np.exp((logpV + ups).max())
            dav[c, k] = np.exp((logdV + ups).max())
        # NLE: inf of p V over pairs with d < eps Psi^{-1}(t)
        pV = Pk * Vt[k][:, None]
        for e in eps:
            nle[e][k] = pV[drow < e * radius_t[k]].min()

    # UHK: minimal C1 for each C2
    rep.samples["uhk"] = _curve_samples(c2_grid, T, uhk)
    rep.checks["UHK"], rep.constants["UHK"] = _best_c2(c2_grid, uhk, factor)
    for e in eps:
        v, br = _stability(nle[e], factor)
        rep.constants[f"NLE_eps_{e:g}"] = {**br, "verdict": v}
    rep.samples["nle"] = {"t": T, **{f"eps_{e:g}": nle[e] for e in eps}}
    rep.checks["NLE"] = rep.constants[f"NLE_eps_{nle_eps:g}"]["verdict"] if nle_eps in nle else "inconclusive"

    # HHK over random quadruples x1, x2, y1 in the sampled rows and y2 near y1
    rmax = max(float(radius_t[-1]), graph.min_edge_length * 1.5)
    q_rng = rng_for(seed, "heat-quads")
    i1 = q_rng.integers(0, nx, n_quads)
    i2 = np.where(q_rng.random(n_quads) < 0.5, i1, q_rng.integers(0, nx, n_quads))
    j1 = q_rng.integers(0, nx, n_quads)
    rad = np.exp(q_rng.uniform(math.log(graph.min_edge_length * 1.01), math.log(rmax), n_quads))
    y2 = np.array([_sample_near(q_rng, drow[j], r) for j, r in zip(j1, rad)])
    y1 = rows[j1]
    dx = drow[i1, rows[i2]]
    dy = drow[j1, y2]
    den = _ratio0(exps, dx) + _ratio0(exps, dy)
    okq = den > 0
    num = np.abs(P[:, i1, y1] - P[:, i2, y2])[:, okq] * T[:, None]
    hhk = (num / den[okq]).max(axis=1)
    rep.samples["hhk"] = {"t": T, "sup": hhk}
    rep.checks["HHK"], br = _stability(hhk, factor)
    rep.constants["C_HHK"] = br

    # HHKexp with x = rows[i1], y1 = rows[j1], y2 near y1
    p1, p2 = P[:, i1, y1], P[:, i1, y2]
    keep = np.maximum(p1, p2) > NOISE_FLOOR * pdiag[:, i1]
    d1, d2 = drow[i1, y1], drow[i1, y2]
    rd = _ratio0(exps, dy)
    base = np.log(np.abs(p1 - p2) * T[:, None] + 1e-300) - np.log(np.where(rd > 0, rd, 1.0))[None, :]
    base = np.where(keep & (rd > 0)[None, :], base, -np.inf)
    hexp = []
    for c2 in c2_grid:
        u1 = upsilon(exps, c2 * d1[None, :], T[:, None])
        u2 = upsilon(exps, c2 * d2[None, :], T[:, None])
        hexp.append(np.exp((base - np.logaddexp(-u1, -u2)).max(axis=1)))
    hexp = np.array(hexp)
    rep.samples["hhkexp"] = _curve_samples(c2_grid, T, hexp)
    rep.checks["HHKexp"], rep.constants["HHKexp"] = _best_c2(c2_grid, hexp, factor)

    rep.samples["davies"] = _curve_samples(c2_grid, T, dav)
    rep.checks["Davies"], rep.constants["Davies"] = _best_c2(c2_grid, dav, factor)

    if rep.window["t_scales"] < 3:
        rep.notes.append("time window spans fewer than 3 dyadic scales")
        for k in rep.checks:
            if rep.checks[k] == "pass":
                rep.checks[k] = "inconclusive"
    rep.verdict = combine(rep.checks.values())
    return rep


def _ratio0(exps, d):
    d = np.asarray(d, dtype=float)
    out = np.zeros_like(d)
    pos = d > 0
    out[pos] = ratio_psi_phi(exps, d[pos])
    return out


def _curve_samples(c2_grid, T, vals):
    c2 = np.repeat(c2_grid, len(T))
    return {"C2": c2, "t": np.tile(T, len(c2_grid)), "value": vals.ravel()}


def _best_c2(c2_grid, vals, factor):
    """Per C2: sup over t (the C1 curve) and the stability of the per-t sup."""
    curve = []
    best = None
    for c2, row in zip(c2_grid, vals):
        v, br = _stability(row, factor)
        curve.append({"C2": float(c2), "C1": br["max"], "factor": br["factor"], "verdict": v})
        if v == "pass":
            best = float(c2)
    verdict = "pass" if best is not None else combine(c["verdict"] for c in curve)
    return verdict, {"curve": curve, "largest_stable_C2": best}


# ---------------------------------------------------------------------------
# harmonic regularity


def _phi_over_psi(exps, r):
    return 1.0 / ratio_psi_phi(exps, r)


def _pair_distances(graph, verts, limit):
    d = graph.distances_from(verts, limit=limit)
    return d[:, verts]


def _f2(graph, exps, x, r, f_abs_p, p, dist_row):
    """sum over j <= floor(log2 r) of Phi(2^j) (mean over B(x, 2^j) of |f|^p)^(1/p)."""
    total = 0.0
    jmax = int(math.floor(math.log2(r)))
    for j in range(jmax, jmax - 80, -1):
        rad = 2.0 ** j
        inside = dist_row < rad
        if inside.sum() <= 1:
            # the ball is {x} for this and all smaller radii: sum the geometric tail
            tail = sum(phi(exps, 2.0 ** k) for k in range(j, j - 80, -1))
            total += tail * (f_abs_p[x]) ** (1.0 / p)
            break
        m = graph.mass[inside]
        total += phi(exps, rad) * (np.sum(f_abs_p[inside] * m) / m.sum()) ** (1.0 / p)
    return total


def _ball_radii(win, n_max: int = 4):
    lo, hi = win.r_lo, win.diam / 8.0
    if hi <= lo:
        return np.array([lo])
    k = min(n_max, int(math.floor(math.log2(hi / lo))) + 1)
    return lo * 2.0 ** np.arange(k)


def check_harmonic_regularity(graph: WeightedGraph, exps: ScalingExponents, trials: int = 200,
                              seed: int = 0, radii=None, poisson_every: int = 4, inner=(1 / 16, 1 / 2),
                              p: float = 2.0, time_unit: float = 1.0, tolerances=None) -> ConditionReport:
    """HR, mean value (L^1 to L^inf), Poisson-Hoelder and, on cable graphs, GRH.

    ``time_unit`` only matters for Poisson solutions, which are converted to
    the time units of Psi (see heat_window).
    """
    tol = _tol(tolerances, "hr_slope")
    factor = _tol(tolerances, "bracket_factor")
    form = EnergyForm(graph)
    win = mesoscopic_window(graph)
    radii = _ball_radii(win) if radii is None else np.asarray(radii, dtype=float)
    rng = rng_for(seed, "harmonic")
    bnd = np.zeros(graph.n, dtype=bool)
    bnd[boundary_vertices(graph)] = True
    is_cable = graph.meta.get("cable_k", 1) > 1
    rep = new_report("harmonic", graph, exps, window={**win.to_dict(), "ball_radii": radii.tolist()})

    env_rows, hr_rows, mv_rows, pois_rows, grh_rows = [], [], [], [], []
    for k in range(trials):
        r = float(radii[k % len(radii)])
        for _ in range(50):
            x0 = int(rng.choice(win.centers))
            B2 = ball(graph, x0, 2 * r)
            if not bnd[B2].any() and len(B2) < graph.n:
                break
            rep.skipped += 1
        else:
            continue
        B = ball(graph, x0, r)
        mask = np.ones(graph.n, dtype=bool)
        mask[B2] = False
        Y = np.flatnonzero(mask)
        rough = k % 2 == 1
        g = rng.choice([-1.0, 1.0], len(Y)) if rough else rng.uniform(-1.0, 1.0, len(Y))
        u = solve_harmonic(form, Y, g).values
        m2 = graph.mass[B2]
        avg = float(np.sum(np.abs(u[B2]) * m2) / m2.sum())
        if avg <= 0:
            continue
        dB = _pair_distances(graph, B, 2 * r)
        iu = np.triu_indices(len(B), 1)
        d = dB[iu]
        du = np.abs(u[B][iu[0]] - u[B][iu[1]])
        q = _phi_over_psi(exps, d) * du / (_phi_over_psi(exps, r) * avg)
        hr_rows.append((k, x0, r, float(q.max()) if len(q) else 0.0, int(rough)))
        # envelope samples: max normalized difference per quarter-dyadic bin of d/r
        if len(d):
            rel = d / r
            bins = np.floor(4 * np.log2(rel)).astype(int)
            y = du / avg
            for b in np.unique(bins):
                s = bins == b
                j = np.argmax(y[s])
                env_rows.append((k, r, float(rel[s][j]), float(y[s][j])))
        mv_rows.append((k, r, float(np.abs(u[B]).max() / avg)))
        if is_cable:
            e = graph.edges
            inb = np.zeros(graph.n, bool)
            inb[B] = True
            sel = inb[e[:, 0]] & inb[e[:, 1]]
            grad = np.abs(u[e[sel, 0]] - u[e[sel, 1]]) / graph.length[sel]
            if len(grad):
                grh_rows.append((k, r, float(grad.max() / (_phi_over_psi(exps, r) * avg))))
        if poisson_every and k % poisson_every == 0:
            pois_rows.extend(_poisson_trial(graph, form, exps, rng, k, x0, r, B2, inner, p, time_unit))

    hr = np.array(hr_rows, dtype=float).reshape(-1, 5)
    env = np.array(env_rows, dtype=float).reshape(-1, 4)
    mv = np.array(mv_rows, dtype=float).reshape(-1, 3)
    rep.samples["hr"] = {"trial": hr[:, 0], "x0": hr[:, 1], "r": hr[:, 2], "quotient": hr[:, 3],
                         "rough": hr[:, 4]}
    rep.samples["envelope"] = {"trial": env[:, 0], "r": env[:, 1], "d_over_r": env[:, 2],
                               "normalized_difference": env[:, 3]}
    rep.samples["mean_value"] = {"trial": mv[:, 0], "r": mv[:, 1], "ratio": mv[:, 2]}

    # HR: the sup over trials of |u(x) - u(y)| / mean_2B |u| per quarter-dyadic bin of d/r
    # follows C (d/r)^gamma until it saturates at the oscillation bound, so the
    # binned sups get a power law with a plateau
    slope_v = []
    sups = []
    for name, sel, target in _branches(exps, env[:, 2] * env[:, 1], exps.gamma1, exps.gamma2):
        e = env[sel]
        if not len(e):
            continue
        bins = np.floor(4 * np.log2(e[:, 2]) + 1e-9).astype(int)
        pick = np.array([np.flatnonzero(bins == b)[np.argmax(e[bins == b, 3])] for b in np.unique(bins)])
        sups.append((name, e[pick, 2], e[pick, 3]))
        slope_v.append(_slope_check(rep, f"hr_envelope_{name}", e[pick, 2], e[pick, 3], target, tol,
                                    mode="capped"))
    if not slope_v:
        slope_v.append("inconclusive")
    rep.samples["envelope_sup"] = {"branch": [n for n, x, _ in sups for _ in x],
                                   "d_over_r": np.concatenate([x for _, x, _ in sups]) if sups else [],
                                   "sup": np.concatenate([y for _, _, y in sups]) if sups else []}
    per_r = [hr[hr[:, 2] == r, 3].max() for r in np.unique(hr[:, 2])] if len(hr) else []
    v, br = _stability(per_r, factor)
    rep.constants["C_H"] = {**bracket(hr[:, 3]), "per_radius": br}
    rep.checks["HR"] = combine(slope_v + [v])
    per_r = [mv[mv[:, 1] == r, 2].max() for r in np.unique(mv[:, 1])] if len(mv) else []
    rep.checks["MV"], br = _stability(per_r, factor)
    rep.constants["MV"] = {**bracket(mv[:, 2]), "per_radius": br}

    if pois_rows:
        pr = np.array(pois_rows, dtype=float)
        rep.samples["poisson"] = {"trial": pr[:, 0], "r": pr[:, 1], "inner": pr[:, 2], "quotient": pr[:, 3]}
        for fr in inner:
            s = np.isclose(pr[:, 2], fr)
            rep.constants[f"poisson_holder_{fr:g}"] = bracket(pr[s, 3])
        s = np.isclose(pr[:, 2], inner[0])
        per_r = [pr[s & (pr[:, 1] == r), 3].max() for r in np.unique(pr[s, 1])]
        rep.checks["PoissonHolder"], _ = _stability(per_r, factor)
        if not per_r:
            rep.notes.append(f"no pairs inside the {inner[0]:g}-shrunken balls; Poisson-Hoelder not asserted")
            rep.checks["PoissonHolder"] = "inconclusive"
    if is_cable:
        gr = np.array(grh_rows, dtype=float).reshape(-1, 3)
        rep.samples["grh"] = {"trial": gr[:, 0], "r": gr[:, 1], "quotient": gr[:, 2]}
        per_r = [gr[gr[:, 1] == r, 2].max() for r in np.unique(gr[:, 1])]
        rep.checks["GRH"], br = _stability(per_r, factor)
        rep.constants["GRH"] = {**bracket(gr[:, 2]), "per_radius": br}
    rep.window["d_over_r_scales"] = dyadic_span(env[:, 2].min(), env[:, 2].max()) if len(env) else 0.0
    if dyadic_span(float(radii.min()) / 2, 2 * float(radii.max())) < 1 and rep.window["d_over_r_scales"] < 3:
        rep.notes.append("fewer than 3 dyadic scales of pair distances")
    rep.verdict = combine(rep.checks.values())
    return rep


def _poisson_trial(graph, form, exps, rng, k, x0, r, B2, inner, p, time_unit=1.0):
    f = np.zeros(graph.n)
    f[B2] = rng.uniform(-1.0, 1.0, len(B2))
    u = solve_poisson(form, B2, f[B2]).values * time_unit
    m2 = graph.mass[B2]
    avg = float(np.sum(np.abs(u[B2]) * m2) / m2.sum())
    fp = np.abs(f) ** p
    rows = []
    d0 = graph.distances_from([x0], limit=r)[0]
    for fr in inner:
        S = np.flatnonzero(d0 < fr * r)
        if len(S) < 2:
            continue
        dist = graph.distances_from(S, limit=2 * r + r)
        F = np.array([_f2(graph, exps, int(x), r, fp, p, dist[i]) for i, x in enumerate(S)])
        dS = dist[:, S]
        iu = np.triu_indices(len(S), 1)
        d = dS[iu]
        num = _phi_over_psi(exps, d) * np.abs(u[S][iu[0]] - u[S][iu[1]])
        den = _phi_over_psi(exps, r) * avg + F[iu[0]] + F[iu[1]]
        rows.append((k, r, fr, float((num / den).max())))
    return rows


# ---------------------------------------------------------------------------
# functional inequalities


def _energy_on(graph: WeightedGraph, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic form of sum_{x in S} Gamma(u)(x) on S plus its outer neighbours.

    Returns (vertex list, dense matrix); each edge counts once per endpoint
    in S with weight 1/2.
    """
    inS = np.zeros(graph.n, bool)
    inS[S] = True
    e = graph.edges
    sel = inS[e[:, 0]] | inS[e[:, 1]]
    e, c = e[sel], graph.conductance[sel]
    w = 0.5 * (inS[e[:, 0]].astype(float) + inS[e[:, 1]].astype(float)) * c
    verts = np.unique(np.concatenate([S, e.ravel()]))
    idx = {v: i for i, v in enumerate(verts.tolist())}
    a = np.array([idx[v] for v in e[:, 0].tolist()], dtype=int)
    b = np.array([idx[v] for v in e[:, 1].tolist()], dtype=int)
    E = np.zeros((len(verts), len(verts)))
    np.add.at(E, (a, a), w)
    np.add.at(E, (b, b), w)
    np.add.at(E, (a, b), -w)
    np.add.at(E, (b, a), -w)
    return verts, E


def poincare_constant(graph: WeightedGraph, B, B2) -> float:
    """max over u of int_B |u - u_B|^2 dm / int_{2B} dGamma(u, u), as a dense generalized eigenproblem."""
    B = np.unique(np.asarray(B, dtype=np.int64))
    B2 = np.unique(np.asarray(B2, dtype=np.int64))
    verts, E = _energy_on(graph, B2)
    # values outside 2B only enter through half-weighted edges; minimize them out
    pos = np.searchsorted(verts, B2)
    out = np.setdiff1d(np.arange(len(verts)), pos)
    if len(out):
        Eoo = E[np.ix_(out, out)]
        Eio = E[np.ix_(pos, out)]
        E = E[np.ix_(pos, pos)] - Eio @ np.linalg.solve(Eoo, Eio.T)
    else:
        E = E[np.ix_(pos, pos)]
    n = len(B2)
    m = graph.mass[B2]
    inB = np.isin(B2, B)
    mb = np.where(inB, m, 0.0)
    # mean-centred mass form on B: diag(mb) - mb mb^T / m(B)
    A = np.diag(mb) - np.outer(mb, mb) / mb.sum()
    # both forms vanish on constants; restrict to the orthogonal complement
    Q, _ = np.linalg.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]))
    Q = Q[:, 1:]
    Er = Q.T @ E @ Q
    Ar = Q.T @ A @ Q
    mu = sla.eigh(Ar, 0.5 * (Er + Er.T), eigvals_only=True)
    return float(mu[-1])


def dirichlet_eigenvalue(graph: WeightedGraph, D) -> float:
    """Smallest eigenvalue of L with zero boundary values outside D."""
    D = np.unique(np.asarray(D, dtype=np.int64))
    K = graph.stiffness()[D][:, D].toarray()
    m = graph.mass[D]
    s = 1.0 / np.sqrt(m)
    return float(sla.eigh(K * s[:, None] * s[None, :], eigvals_only=True, subset_by_index=[0, 0])[0])


def _random_connected_subset(graph, B, target_mass, rng):
    """Grow a connected subset of B from a random seed, picking frontier vertices at random."""
    inB = np.zeros(graph.n, bool)
    inB[B] = True
    C = graph.conductance_matrix()
    start = int(rng.choice(B))
    chosen = [start]
    taken = {start}
    frontier = set(int(v) for v in C.indices[C.indptr[start]:C.indptr[start + 1]] if inB[v])
    mass = graph.mass[start]
    while mass < target_mass and frontier:
        v = int(rng.choice(sorted(frontier)))
        frontier.discard(v)
        taken.add(v)
        chosen.append(v)
        mass += graph.mass[v]
        for w in C.indices[C.indptr[v]:C.indptr[v + 1]]:
            w = int(w)
            if inB[w] and w not in taken:
                frontier.add(w)
    return np.array(sorted(chosen))


def check_functional_inequalities(graph: WeightedGraph, exps: ScalingExponents, n_balls: int = 8,
                                  seed: int = 0, radii=None, fk_ratios=(1, 2, 4, 8, 16), fk_min_vertices: int = 8,
                                  spec: Spectrum = None, wbe_centers: int = 20, wbe_partners: int = 200,
                                  wbe_per_decade: int = 10, wbe_partners_sparse: int = 30,
                                  eig_cap: int = 3000, time_unit: float = 1.0,
                                  tolerances=None) -> ConditionReport:
    """PI and FK on sampled balls; wBE on the heat semigroup.

    Eigenvalues and times are converted with ``time_unit`` as in heat_window.
    Above the dense spectrum cap (and without ``spec``) the semigroup is
    integrated by Crank-Nicolson on a dyadic time grid, with at most
    ``wbe_partners_sparse`` random partners.
    """
    factor = _tol(tolerances, "bracket_factor")
    win = mesoscopic_window(graph)
    radii = _ball_radii(win) if radii is None else np.asarray(radii, dtype=float)
    rng = rng_for(seed, "functional")
    bnd = np.zeros(graph.n, dtype=bool)
    bnd[boundary_vertices(graph)] = True
    rep = new_report("functional", graph, exps, window={**win.to_dict(), "ball_radii": radii.tolist()})

    pi_rows, fk_rows = [], []
    for k in range(n_balls * len(radii)):
        r = float(radii[k % len(radii)])
        for _ in range(50):
            x0 = int(rng.choice(win.centers))
            B2 = ball(graph, x0, 2 * r)
            if not bnd[B2].any():
                break
            rep.skipped += 1
        else:
            continue
        if len(B2) > eig_cap:
            rep.skipped += 1
            continue
        B = ball(graph, x0, r)
        if len(B) < 2:
            rep.skipped += 1
            continue
        cp = poincare_constant(graph, B, B2) * time_unit / psi(exps, r)
        pi_rows.append((k, x0, r, cp))
        mB = graph.mass[B].sum()
        for ratio in fk_ratios:
            D = B if ratio == 1 else _random_connected_subset(graph, B, mB / ratio, rng)
            if len(D) < fk_min_vertices:  # below lattice resolution
                rep.skipped += 1
                continue
            lam = dirichlet_eigenvalue(graph, D)
            fk_rows.append((k, r, mB / graph.mass[D].sum(), lam / time_unit * psi(exps, r)))

    pi = np.array(pi_rows, dtype=float).reshape(-1, 4)
    rep.samples["pi"] = {"ball": pi[:, 0], "x0": pi[:, 1], "r": pi[:, 2], "C_P": pi[:, 3]}
    per_r = [pi[pi[:, 2] == r, 3].max() for r in np.unique(pi[:, 2])]
    rep.checks["PI"], br = _stability(per_r, factor)
    rep.constants["C_P"] = {**bracket(pi[:, 3]), "per_radius": br}

    fk = np.array(fk_rows, dtype=float).reshape(-1, 4)
    rep.samples["fk"] = {"ball": fk[:, 0], "r": fk[:, 1], "mass_ratio": fk[:, 2], "lambda_psi": fk[:, 3]}
    try:
        fit = fit_exponent(fk[:, 2], fk[:, 3])
        rep.fits["fk_nu"] = fit.to_dict()
        rep.constants["C_F"] = float(fk[:, 3][fk[:, 2] <= 1.0 + 1e-12].min()) if np.any(fk[:, 2] <= 1 + 1e-12) else None
        rep.checks["FK"] = "pass" if fit.slope > 0 and np.all(fk[:, 3] > 0) else "fail"
    except FitError as e:
        rep.notes.append(f"FK fit: {e}")
        rep.checks["FK"] = "inconclusive"

    # wBE on the semigroup
    form = EnergyForm(graph)
    sparse_route = spec is None and graph.n > SPECTRUM_CAP
    if sparse_route:
        lam1 = fiedler_value(form)
        wbe_partners = min(wbe_partners, wbe_partners_sparse)
    else:
        spec = spec if spec is not None else spectrum(form)
        lam1 = spec
    t_lo, t_hi = heat_window(graph, exps, lam1, time_unit=time_unit)
    times = log_time_grid(t_lo, t_hi, wbe_per_decade) if t_hi > t_lo else np.array([t_lo])
    cen = central_vertices(graph)
    w_rng = rng_for(seed, "wbe")
    rows = np.sort(w_rng.choice(cen, size=min(wbe_centers, len(cen)), replace=False))
    fs = [w_rng.choice([-1.0, 1.0], graph.n) for _ in range(4)]
    for z in w_rng.choice(cen, size=min(4, len(cen)), replace=False):
        f = np.zeros(graph.n)
        f[z] = 1.0
        fs.append(f)
    F = np.stack(fs, axis=1)
    drow = graph.distances_from(rows)
    ratio_d = np.where(drow > 0, 1.0 / _ratio0(exps, np.where(drow > 0, drow, 1.0)), 0.0)
    # for a fixed pair the sup over |f| <= 1 is the L^1 distance of the kernel rows,
    # attained by f = sign(p_t(x, .) - p_t(y, .)); evaluated on a partner sample
    partners = np.union1d(rows, w_rng.choice(graph.n, size=min(wbe_partners, graph.n), replace=False))
    pos = np.searchsorted(partners, rows)
    rd_p = ratio_d[:, partners]
    if sparse_route:
        times = dyadic_grid(times)
        G = np.zeros((graph.n, F.shape[1] + len(partners)))
        G[:, :F.shape[1]] = F
        G[partners, F.shape[1] + np.arange(len(partners))] = 1.0 / graph.mass[partners]
        U, _ = _crank_nicolson_multi(form, times, G, SWEEP_CN_TOL)

        def evolve(i, t):
            return U[i][:, :F.shape[1]], U[i][:, F.shape[1]:].T
    else:
        coef = spec.vectors.T @ (graph.mass[:, None] * F)

        def evolve(i, t):
            Pf = spec.vectors @ (np.exp(-t * spec.values)[:, None] * coef)
            return Pf, (spec.vectors[partners] * np.exp(-t * spec.values)) @ spec.vectors.T
    sup = np.empty(len(times))
    sup_fixed = np.empty(len(times))
    for i, t in enumerate(times):
        Pf, Kp = evolve(i, t)  # (n, nf), (P, n)
        diff = np.abs(Pf[rows][:, None, :] - Pf[None, :, :]).max(axis=2)  # (X, n)
        norm = _phi_over_psi(exps, psi_inv(exps, t * time_unit))
        sup_fixed[i] = (ratio_d * diff).max() / norm
        l1 = np.stack([np.abs(Kp - Kp[j]) @ graph.mass for j in pos])  # (X, P)
        sup[i] = max(sup_fixed[i], (rd_p * l1).max() / norm)
    rep.samples["wbe"] = {"t": times * time_unit, "sup": sup, "sup_fixed_f": sup_fixed}
    rep.checks["wBE"], br = _stability(sup, factor)
    rep.constants["C_wBE"] = br
    rep.verdict = combine(rep.checks.values())
    return rep


# ---------------------------------------------------------------------------
# aggregation

EQUIVALENT = ("HR", "wBE", "HHK", "HHKexp", "NLE")


def equivalence_matrix(*reports: ConditionReport) -> dict:
    """Cross-tabulate the verdicts of the equivalent conditions on one graph."""
    if len(reports) == 1 and isinstance(reports[0], (list, tuple)):
        reports = tuple(reports[0])
    if not reports:
        raise ValueError("no reports given")
    hashes = {r.graph_hash for r in reports}
    if len(hashes) != 1:
        raise ValueError(f"reports come from different graphs: {sorted(hashes)}")
    verdicts = {}
    other = {}
    for r in sorted(reports, key=lambda r: r.condition):
        other[r.condition] = r.verdict
        for k, v in r.checks.items():
            if k in EQUIVALENT:
                verdicts[k] = v
    present = [verdicts[k] for k in EQUIVALENT if k in verdicts]
    consistent = len(set(present)) <= 1
    flag = None
    if not consistent:
        flag = ("equivalent conditions disagree: "
                + ", ".join(f"{k}={verdicts[k]}" for k in EQUIVALENT if k in verdicts)
                + " (tolerance or window problem, not a counterexample)")
    return {"graph": reports[0].graph, "exponents": reports[0].exponents.get("name"),
            "verdicts": {k: verdicts.get(k) for k in EQUIVALENT}, "reports": other,
            "consistent": consistent, "flag": flag}


@dataclass
class ExperimentPlan:
    graph: dict
    exponents: object  # preset name or explicit dict
    conditions: list
    seed: int
    samples: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def build_graph(self) -> WeightedGraph:
        from .graphs import BlowupSpec, build_blowup, build_cable, build_compact, build_prefractal

        g = self.graph
        if "blowup" in g:
            b = g["blowup"]
            G = build_blowup(BlowupSpec(b["cell"], b["model"], int(b.get("cell_level", 0)), int(g["level"])))
        elif g.get("prefractal", True):
            G = build_prefractal(g["family"], int(g["level"]))
        else:
            G = build_compact(g["family"], int(g["level"]))
        if int(g.get("cable_k", 1)) > 1:
            G = build_cable(G, int(g["cable_k"]))
        if g.get("metric"):
            G = G.with_metric(g["metric"])
        return G

    def build_exponents(self) -> ScalingExponents:
        from .scaling import preset

        e = self.exponents
        if isinstance(e, str):
            return preset(e, strict=False) if e.startswith("cable(") else preset(e)
        if "preset" in e:
            return preset(e["preset"], rho=e.get("rho", 1.25147), strict=e.get("strict", True))
        return ScalingExponents(e["alpha1"], e["alpha2"], e["beta1"], e["beta2"],
                                strict=e.get("strict", True), name=e.get("name", "explicit"))
