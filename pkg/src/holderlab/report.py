"""Condition reports, exponent fitting and sampling windows shared by the checks."""

from __future__ import annotations

import csv
import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .graphs import WeightedGraph, central_vertices
from .scaling import ScalingExponents

SCHEMA = 1
VERDICTS = ("pass", "fail", "inconclusive")


class FitError(ValueError):
    pass


class ReportError(ValueError):
    pass


@dataclass
class FitResult:
    slope: float
    intercept: float
    residual: float
    n: int
    span_scales: float  # dyadic scales covered by x
    mode: str = "ls"

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "residual": self.residual,
                "n": self.n, "span_scales": self.span_scales, "mode": self.mode}


def _upper_hull(X, Y):
    """Indices of the upper concave hull of points sorted by X (monotone chain)."""
    hull = []
    for i in range(len(X)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (X[b] - X[a]) * (Y[i] - Y[a]) - (Y[b] - Y[a]) * (X[i] - X[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def fit_exponent(x, y, mode: str = "ls", min_samples: int = 8) -> FitResult:
    """Fit log y = slope * log x + intercept.

    ``ls`` is ordinary least squares. ``envelope`` fits the upper hull of the
    log-log cloud: the slope is the median hull-edge slope weighted by edge
    width and the intercept is raised until the line majorizes every sample. ``capped``
    fits log y = min(intercept + slope log x, c), a power law that saturates
    at a plateau for large x; the breakpoint minimizes the squared error and
    ``n`` counts the samples on the power-law part.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise FitError("x and y differ in length")
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if len(x) < min_samples:
        raise FitError(f"need at least {min_samples} positive samples, got {len(x)}")
    X, Y = np.log(x), np.log(y)
    span = (X.max() - X.min()) / math.log(2.0)
    if not span > 1e-12:
        raise FitError("degenerate x-range")
    if mode == "ls":
        A = np.stack([X, np.ones_like(X)], axis=1)
        coef = np.linalg.lstsq(A, Y, rcond=None)[0]
        res = Y - A @ coef
        return FitResult(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res ** 2))),
                         len(X), float(span), "ls")
    if mode == "envelope":
        order = np.lexsort((-Y, X))
        Xs, Ys = X[order], Y[order]
        first = np.concatenate([[True], np.diff(Xs) > 0])  # keep the max y per x
        Xs, Ys = Xs[first], Ys[first]
        hull = np.array(_upper_hull(Xs, Ys))
        if len(hull) < 2:
            raise FitError("envelope has fewer than two vertices")
        # median edge slope weighted by x-extent: long edges bridging the peaks
        # of an oscillating cloud carry the trend, short edges around a peak do not
        dx, dy = np.diff(Xs[hull]), np.diff(Ys[hull])
        sl = dy / dx
        o = np.argsort(sl)
        cw = np.cumsum(dx[o])
        slope = float(sl[o][np.searchsorted(cw, 0.5 * cw[-1])])
        intercept = float(np.max(Y - slope * X))
        hx, hy = Xs[hull], Ys[hull]
        res = (slope * hx + intercept) - hy
        return FitResult(slope, intercept, float(np.sqrt(np.mean(res ** 2))), len(X), float(span),
                         "envelope")
    if mode == "capped":
        o = np.argsort(X, kind="stable")
        X, Y = X[o], Y[o]
        best = None
        for k in range(min(3, len(X)), len(X) + 1):
            if X[k - 1] - X[0] <= 1e-12:
                continue
            coef = np.polyfit(X[:k], Y[:k], 1)
            pred = np.polyval(coef, X)
            if k < len(X):
                pred[k:] = np.minimum(pred[k:], Y[k:].mean())
            sse = float(np.sum((pred - Y) ** 2))
            if best is None or sse <= best[0]:
                best = (sse, coef, k)
        if best is None:
            raise FitError("degenerate x-range")
        sse, coef, k = best
        return FitResult(float(coef[0]), float(coef[1]), math.sqrt(sse / len(X)), k,
                         float((X[k - 1] - X[0]) / math.log(2.0)), "capped")
    raise FitError(f"unknown fit mode {mode!r}")


def dyadic_span(lo: float, hi: float) -> float:
    if not (lo > 0 and hi > lo):
        return 0.0
    return math.log2(hi / lo)


def bracket(values) -> dict:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return {"min": None, "max": None, "factor": None}
    lo, hi = float(v.min()), float(v.max())
    return {"min": lo, "max": hi, "factor": (hi / lo) if lo > 0 else math.inf}


def combine(verdicts) -> str:
    v = list(verdicts)
    if any(x == "fail" for x in v):
        return "fail"
    if not v or any(x == "inconclusive" for x in v):
        return "inconclusive"
    return "pass"


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


@dataclass
class ConditionReport:
    condition: str
    graph: dict
    exponents: dict
    verdict: str = "inconclusive"
    checks: dict = field(default_factory=dict)  # sub-condition -> verdict
    fits: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    samples: dict = field(default_factory=dict)  # name -> {column: values}
    skipped: int = 0

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ReportError(f"bad verdict {self.verdict!r}")

    @property
    def graph_hash(self) -> str:
        return self.graph.get("hash", "")

    def to_dict(self) -> dict:
        return _clean({
            "schema": SCHEMA, "condition": self.condition, "graph": self.graph,
            "exponents": self.exponents, "relaxed": not self.exponents.get("strict", True),
            "verdict": self.verdict, "checks": self.checks, "fits": self.fits,
            "constants": self.constants, "window": self.window, "notes": self.notes,
            "skipped": self.skipped, "samples": self.samples,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionReport":
        if d.get("schema") != SCHEMA:
            raise ReportError(f"unsupported report schema {d.get('schema')!r}")
        keys = ("condition", "graph", "exponents", "verdict", "checks", "fits", "constants",
                "window", "notes", "samples", "skipped")
        return cls(**{k: d[k] for k in keys if k in d})

    @classmethod
    def load(cls, path) -> "ConditionReport":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ReportError(f"{path}: not valid JSON ({e})") from None
        try:
            return cls.from_dict(doc)
        except (ReportError, TypeError, AttributeError) as e:
            raise ReportError(f"{path}: {e}") from None

    def write(self, out_dir, stem=None) -> list[str]:
        """Write <stem>.json plus one <stem>.<sample>.csv per raw sample table."""
        os.makedirs(out_dir, exist_ok=True)
        stem = stem or self.condition
        paths = [os.path.join(out_dir, f"{stem}.json")]
        with open(paths[0], "w") as fh:
            fh.write(self.to_json())
        for name in sorted(self.samples):
            cols = self.samples[name]
            keys = list(cols)
            path = os.path.join(out_dir, f"{stem}.{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(keys)
                for row in zip(*(_clean(np.asarray(cols[k])) for k in keys)):
                    w.writerow([repr(v) if isinstance(v, float) else v for v in row])
            paths.append(path)
        return paths


def graph_info(graph: WeightedGraph) -> dict:
    return {"hash": graph.content_hash(), "family": graph.meta.get("family"),
            "level": graph.meta.get("level"), "kind": graph.meta.get("kind"),
            "cable_k": graph.meta.get("cable_k", 1), "n": graph.n, "metric": graph.metric}


def exps_info(exps: ScalingExponents) -> dict:
    return exps.to_dict()


def new_report(condition, graph, exps, **kw) -> ConditionReport:
    return ConditionReport(condition, graph_info(graph), exps_info(exps), **kw)


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, purpose) so adding checks never shifts other samples."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Window:
    h: float
    diam: float
    r_lo: float
    r_hi: float
    centers: np.ndarray

    @property
    def scales(self) -> float:
        return dyadic_span(self.r_lo, self.r_hi)

    def to_dict(self):
        return {"h": self.h, "diam": self.diam, "r": [self.r_lo, self.r_hi], "scales": self.scales,
                "n_centers": int(len(self.centers))}


def mesoscopic_window(graph: WeightedGraph, lo_factor: float = 4.0, hi_factor: float = 0.25,
                      center_fraction: float = 0.5) -> Window:
    """Length window [lo_factor*h, hi_factor*diam] and base points in the central box."""
    h = graph.min_edge_length
    D = graph.diameter_estimate()
    return Window(h, D, lo_factor * h, hi_factor * D, central_vertices(graph, center_fraction))


def boundary_vertices(graph: WeightedGraph) -> np.ndarray:
    """Vertices on the bounding box of the window, where the finite graph is cut off."""
    c = graph.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    on = np.zeros(len(c), dtype=bool)
    for k in range(c.shape[1]):
        if hi[k] > lo[k]:  # a flat axis (the interval) has no boundary in that direction
            on |= (c[:, k] == lo[k]) | (c[:, k] == hi[k])
    return np.flatnonzero(on)
