"""Finite weighted graphs approximating self-similar fractals.

Vertices carry exact integer coordinates (``coords / denom`` is the point
in the plane), so gluing of cells is done by exact integer equality and
rebuilding a graph always gives identical arrays.

Conventions
-----------
* Each family has a level-0 template: vertex points in units of 1/2 and
  template edges. A level-n graph is the union of the template's images
  under all n-fold compositions of the contractions.
* Compact graphs live in the unit square (cells of side ``L**-n``, total
  measure 1). Pre-fractal graphs are the same graph blown up by ``L**n``
  so that the smallest cell has unit side and unit measure.
* Cell measure is split equally among the template vertices of the cell.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

DEFAULT_VERTEX_BUDGET = 2_000_000


class GraphError(ValueError):
    pass


class BudgetExceeded(GraphError):
    pass


@dataclass(frozen=True)
class FractalFamily:
    name: str
    scale: int  # L
    points: tuple  # fixed points p_i, integer pairs in units of 1/2
    template_vertices: tuple  # level-0 vertices, units of 1/2
    template_edges: tuple  # index pairs into template_vertices
    edge_length: float  # intrinsic length of a template edge in a unit cell
    y_scale: float = 1.0  # euclidean embedding correction (gasket is drawn equilateral)

    @property
    def n_maps(self) -> int:
        return len(self.points)

    def fixed_points(self) -> list[tuple[Fraction, Fraction]]:
        return [(Fraction(x, 2), Fraction(y, 2)) for x, y in self.points]


_CARPET_PTS = ((0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1))

FAMILIES = {
    "interval": FractalFamily(
        "interval", 2, ((0, 0), (2, 0)), ((0, 0), (2, 0)), ((0, 1),), 1.0
    ),
    # rational stand-in (1/2, 1) for the apex; lengths are those of the equilateral gasket
    "gasket": FractalFamily(
        "gasket", 2, ((0, 0), (2, 0), (1, 2)), ((0, 0), (2, 0), (1, 2)),
        ((0, 1), (1, 2), (0, 2)), 1.0, math.sqrt(3.0) / 2.0,
    ),
    "vicsek": FractalFamily(
        "vicsek", 3, ((0, 0), (2, 0), (2, 2), (0, 2), (1, 1)),
        ((0, 0), (2, 0), (2, 2), (0, 2), (1, 1)),
        ((4, 0), (4, 1), (4, 2), (4, 3)), math.sqrt(2.0) / 2.0,
    ),
    "carpet": FractalFamily(
        "carpet", 3, _CARPET_PTS, _CARPET_PTS,
        tuple((i, (i + 1) % 8) for i in range(8)), 0.5,
    ),
}


def get_family(name) -> FractalFamily:
    if isinstance(name, FractalFamily):
        return name
    try:
        return FAMILIES[name.lower()]
    except KeyError:
        raise GraphError(f"unknown fractal family {name!r}; choose from {sorted(FAMILIES)}") from None


@dataclass(eq=False)
class WeightedGraph:
    """Immutable weighted graph with exact planar coordinates.

    ``edges`` holds index pairs with ``u < v``; ``conductance`` and
    ``length`` are per edge; ``mass`` is the vertex measure.
    """

    coords: np.ndarray
    denom: int
    mass: np.ndarray
    edges: np.ndarray
    conductance: np.ndarray
    length: np.ndarray
    metric: str = "geodesic"
    y_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.mass = np.ascontiguousarray(self.mass, dtype=float)
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.conductance = np.ascontiguousarray(self.conductance, dtype=float)
        self.length = np.ascontiguousarray(self.length, dtype=float)
        n = len(self.coords)
        if self.metric not in ("geodesic", "euclidean"):
            raise GraphError(f"unknown metric mode {self.metric!r}")
        if len(self.mass) != n:
            raise GraphError("mass vector length does not match vertex count")
        if np.any(~(self.mass > 0)):
            raise GraphError("every vertex needs a positive measure weight")
        if len(self.conductance) != len(self.edges) or len(self.length) != len(self.edges):
            raise GraphError("edge attribute arrays have inconsistent lengths")
        if len(self.edges):
            u, v = self.edges[:, 0], self.edges[:, 1]
            if np.any(u == v):
                raise GraphError("self-loops are not allowed")
            if np.any(u > v):
                raise GraphError("edges must be stored with u < v")
            if u.min() < 0 or v.max() >= n:
                raise GraphError("edge endpoint out of range")
            key = u * n + v
            if len(np.unique(key)) != len(key):
                raise GraphError("duplicate edges")
        if np.any(~(self.conductance > 0)) or np.any(~(self.length > 0)):
            raise GraphError("conductances and lengths must be positive")
        for arr in (self.coords, self.mass, self.edges, self.conductance, self.length):
            arr.setflags(write=False)
        self._cache = {}

    # -- basic structure -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def min_edge_length(self) -> float:
        return float(self.length.min()) if len(self.length) else 0.0

    def points(self) -> np.ndarray:
        """Float coordinates in the euclidean embedding."""
        pts = self.coords.astype(float) / self.denom
        pts[:, 1] *= self.y_scale
        return pts

    def _sym(self, weights) -> sp.csr_matrix:
        u, v = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix(
            (np.concatenate([weights, weights]), (np.concatenate([u, v]), np.concatenate([v, u]))),
            shape=(self.n, self.n),
        )
        return a.tocsr()

    def conductance_matrix(self) -> sp.csr_matrix:
        if "C" not in self._cache:
            self._cache["C"] = self._sym(self.conductance)
        return self._cache["C"]

    def length_matrix(self) -> sp.csr_matrix:
        if "W" not in self._cache:
            self._cache["W"] = self._sym(self.length)
        return self._cache["W"]

    def stiffness(self) -> sp.csr_matrix:
        """Conductance Laplacian K = D - C (no measure weighting)."""
        if "K" not in self._cache:
            c = self.conductance_matrix()
            deg = np.asarray(c.sum(axis=1)).ravel()
            self._cache["K"] = (sp.diags(deg) - c).tocsr()
        return self._cache["K"]

    def degree(self) -> np.ndarray:
        return np.diff(self.conductance_matrix().indptr)

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        k, _ = connected_components(self.conductance_matrix(), directed=False)
        return k == 1

    def index_of(self, xy) -> int:
        """Vertex index for an exact integer coordinate pair (units of 1/denom)."""
        if "index" not in self._cache:
            self._cache["index"] = {tuple(c): i for i, c in enumerate(self.coords.tolist())}
        try:
            return self._cache["index"][tuple(int(c) for c in xy)]
        except KeyError:
            raise GraphError(f"no vertex at {tuple(xy)}/{self.denom}") from None

    def content_hash(self) -> str:
        if "hash" not in self._cache:
            h = hashlib.sha256()
            for arr in (self.coords, self.mass, self.edges, self.conductance, self.length):
                h.update(np.ascontiguousarray(arr).tobytes())
            h.update(f"{self.denom}|{self.metric}|{self.y_scale!r}".encode())
            self._cache["hash"] = h.hexdigest()[:16]
        return self._cache["hash"]

    def with_metric(self, metric: str) -> "WeightedGraph":
        return WeightedGraph(self.coords, self.denom, self.mass, self.edges, self.conductance,
                             self.length, metric, self.y_scale, dict(self.meta))

    def with_conductance(self, conductance) -> "WeightedGraph":
        return WeightedGraph(self.coords, self.denom, self.mass, self.edges, conductance,
                             self.length, self.metric, self.y_scale, dict(self.meta))

    # -- metric ---------------------------------------------------------

    def distances_from(self, sources, limit: float = np.inf) -> np.ndarray:
        """Distance rows (len(sources), n) in the graph's metric mode."""
        src = np.atleast_1d(np.asarray(sources, dtype=np.int64))
        if np.any(src < 0) or np.any(src >= self.n):
            raise GraphError("unknown vertex")
        if self.metric == "geodesic":
            return np.atleast_2d(dijkstra(self.length_matrix(), directed=False, indices=src, limit=limit))
        pts = self.points()
        d = np.linalg.norm(pts[None, :, :] - pts[src][:, None, :], axis=-1)
        if np.isfinite(limit):
            d[d > limit] = np.inf
        return d

    def distance(self, x: int, y: int) -> float:
        return float(self.distances_from([x])[0, y])

    def diameter_estimate(self) -> float:
        """Double-sweep lower bound for the diameter (exact on trees)."""
        if "diam" not in self._cache:
            d0 = self.distances_from([0])[0]
            a = int(np.argmax(d0))
            da = self.distances_from([a])[0]
            self._cache["diam"] = float(da.max())
        return self._cache["diam"]

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "vertices": [
                {"id": i, "x": int(x), "y": int(y), "m": float(m)}
                for i, ((x, y), m) in enumerate(zip(self.coords.tolist(), self.mass.tolist()))
            ],
            "edges": [
                {"u": int(u), "v": int(v), "c": float(c), "len": float(ln)}
                for (u, v), c, ln in zip(self.edges.tolist(), self.conductance.tolist(), self.length.tolist())
            ],
            "meta": {**self.meta, "denominator": self.denom, "metric": self.metric,
                     "y_scale": self.y_scale, "hash": self.content_hash()},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "WeightedGraph":
        verts = sorted(doc["vertices"], key=lambda v: v["id"])
        meta = dict(doc.get("meta", {}))
        denom = int(meta.pop("denominator"))
        metric = meta.pop("metric", "geodesic")
        y_scale = float(meta.pop("y_scale", 1.0))
        meta.pop("hash", None)
        e = doc["edges"]
        return cls(
            coords=np.array([[v["x"], v["y"]] for v in verts], dtype=np.int64),
            denom=denom,
            mass=np.array([v["m"] for v in verts], dtype=float),
            edges=np.array([[d["u"], d["v"]] for d in e], dtype=np.int64).reshape(-1, 2),
            conductance=np.array([d["c"] for d in e], dtype=float),
            length=np.array([d["len"] for d in e], dtype=float),
            metric=metric, y_scale=y_scale, meta=meta,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "WeightedGraph":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


# ---------------------------------------------------------------------------
# construction helpers


def _cell_offsets(family: FractalFamily, n: int) -> np.ndarray:
    """Lower-left offsets of all level-n cells, in units of 1/(2 L**n)."""
    pts = np.array(family.points, dtype=np.int64)
    L = family.scale
    offs = np.zeros((1, 2), dtype=np.int64)
    for k in range(1, n + 1):
        offs = ((L - 1) * L ** (k - 1) * pts)[:, None, :] + offs[None, :, :]
        offs = offs.reshape(-1, 2)
    return offs


def _estimate_vertices(family: FractalFamily, n: int) -> int:
    return len(family.template_vertices) * family.n_maps ** n


def _check_budget(count: int, budget: int, what: str):
    if count > budget:
        raise BudgetExceeded(
            f"{what} would need about {count:,} vertex slots, above the vertex budget of {budget:,}"
        )


def _assemble(cell_vertex_coords, template_edges, cell_mass, n_template):
    """Glue cells given per-cell vertex coordinates (cells, k, 2)."""
    flat = cell_vertex_coords.reshape(-1, 2)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.reshape(cell_vertex_coords.shape[:2])
    mass = np.zeros(len(uniq))
    np.add.at(mass, inv.ravel(), cell_mass / n_template)
    te = np.asarray(template_edges, dtype=np.int64)
    e = np.stack([inv[:, te[:, 0]], inv[:, te[:, 1]]], axis=-1).reshape(-1, 2)
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    return uniq, mass, e


def build_compact(family, level: int, conductance_ratio: float = 1.0,
                  budget: int = DEFAULT_VERTEX_BUDGET) -> WeightedGraph:
    """Level-n approximation of the compact fractal in the unit square.

    Every edge gets conductance ``conductance_ratio**level`` (1 by default);
    each n-cell carries measure ``N**-n`` split equally among its vertices.
    """
    fam = get_family(family)
    if level < 0:
        raise GraphError("level must be >= 0")
    _check_budget(_estimate_vertices(fam, level), budget, f"{fam.name} level {level}")
    L = fam.scale
    tv = np.array(fam.template_vertices, dtype=np.int64)
    cells = _cell_offsets(fam, level)[:, None, :] + tv[None, :, :]
    coords, mass, edges = _assemble(cells, fam.template_edges, fam.n_maps ** (-float(level)), len(tv))
    g = WeightedGraph(
        coords=coords, denom=2 * L ** level, mass=mass, edges=edges,
        conductance=np.full(len(edges), float(conductance_ratio) ** level),
        length=np.full(len(edges), fam.edge_length / L ** level),
        y_scale=fam.y_scale,
        meta={"family": fam.name, "level": level, "scale": 1, "kind": "compact"},
    )
    return g


def build_prefractal(family, level: int, conductance_ratio: float = 1.0,
                     budget: int = DEFAULT_VERTEX_BUDGET) -> WeightedGraph:
    """The compact level-n graph blown up by L**n, anchored at the origin.

    Smallest cells have unit side and unit measure, so total measure is N**n.
    """
    fam = get_family(family)
    g = build_compact(fam, level, conductance_ratio, budget)
    L = fam.scale
    return WeightedGraph(
        coords=g.coords, denom=2, mass=g.mass * fam.n_maps ** level, edges=g.edges,
        conductance=g.conductance, length=g.length * L ** level, y_scale=fam.y_scale,
        meta={"family": fam.name, "level": level, "scale": L ** level, "kind": "prefractal"},
    )


def build_cable(graph: WeightedGraph, k: int) -> WeightedGraph:
    """Subdivide every edge into ``k`` pieces.

    Sub-edges get conductance ``k*c`` and length ``len/k`` so the series
    resistance of each cable equals the original edge resistance. Original
    vertices keep their measure; each new interior vertex receives
    ``m_e / k`` where ``m_e = m(u)/deg(u) + m(v)/deg(v)`` is the edge's
    share of its endpoints' measure.
    """
    if k < 1:
        raise GraphError("subdivision count must be >= 1")
    if k == 1:
        return WeightedGraph(graph.coords, graph.denom, graph.mass, graph.edges, graph.conductance,
                             graph.length, graph.metric, graph.y_scale,
                             {**graph.meta, "cable_k": 1})
    n, E = graph.n, len(graph.edges)
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    deg = graph.degree().astype(float)
    edge_mass = graph.mass[u] / deg[u] + graph.mass[v] / deg[v]

    j = np.arange(1, k)
    cu, cv = graph.coords[u], graph.coords[v]
    inner = cu[:, None, :] * (k - j)[None, :, None] + cv[:, None, :] * j[None, :, None]
    coords = np.concatenate([graph.coords * k, inner.reshape(-1, 2)])
    if len(np.unique(coords, axis=0)) != len(coords):
        raise GraphError("cable subdivision points collide; the embedding has crossing edges")
    inner_ids = n + np.arange(E * (k - 1)).reshape(E, k - 1)
    chain = np.concatenate([u[:, None], inner_ids, v[:, None]], axis=1)
    a, b = chain[:, :-1].ravel(), chain[:, 1:].ravel()
    edges = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    mass = np.concatenate([graph.mass, np.repeat(edge_mass / k, k - 1)])
    return WeightedGraph(
        coords=coords, denom=graph.denom * k, mass=mass, edges=edges,
        conductance=np.repeat(graph.conductance * k, k),
        length=np.repeat(graph.length / k, k),
        metric=graph.metric, y_scale=graph.y_scale, meta={**graph.meta, "cable_k": k},
    )


@dataclass(frozen=True)
class BlowupSpec:
    cell: str  # K, the fractal each cell is a copy of
    model: str  # M, the fractal whose pattern arranges the cells
    cell_level: int  # discretization level of each cell copy
    level: int  # blowup level n


def _touch_table(cell_graph: WeightedGraph) -> dict:
    """For every relative offset (half units) at which two closed unit squares
    touch, whether the translated cell copies share a vertex."""
    half = cell_graph.denom // 2
    pts = set(map(tuple, cell_graph.coords.tolist()))
    out = {}
    for dx in range(-2, 3):
        for dy in range(-2, 3):
            if (dx, dy) == (0, 0):
                continue
            sx, sy = dx * half, dy * half
            out[(dx, dy)] = any((x + sx, y + sy) in pts for x, y in pts)
    return out


def _check_gluing(K: FractalFamily, M: FractalFamily, offs: np.ndarray, table: dict):
    present = sorted(set(map(tuple, offs.tolist())))
    lookup = set(present)
    for o in present:
        for (dx, dy), ok in table.items():
            nb = (o[0] + dx, o[1] + dy)
            if not ok and nb > o and nb in lookup:
                a = (Fraction(o[0], 2), Fraction(o[1], 2))
                b = (Fraction(nb[0], 2), Fraction(nb[1], 2))
                raise GraphError(
                    f"{K.name} cells cannot be glued on the {M.name} pattern: model cells at "
                    f"{_fmt(a)} and {_fmt(b)} touch but their {K.name} copies share no vertex"
                )


def _fmt(p):
    return "(" + ", ".join(str(c) for c in p) + ")"


def build_blowup(spec: BlowupSpec, budget: int = DEFAULT_VERTEX_BUDGET) -> WeightedGraph:
    """Copies of the level-k graph of K placed on the unit cells of M's level-n pre-fractal.

    Whenever two model cells touch (their closed unit squares intersect) the
    two K copies must share a vertex, otherwise construction fails and names
    the offending pair. Each copy carries total measure 1; measure at glued
    vertices adds up.
    """
    K, M = get_family(spec.cell), get_family(spec.model)
    if spec.level < 0 or spec.cell_level < 0:
        raise GraphError("levels must be >= 0")
    _check_budget(_estimate_vertices(K, spec.cell_level) * M.n_maps ** spec.level, budget,
                  f"blowup {K.name}/{M.name}")
    cell = build_compact(K, spec.cell_level)
    table = _touch_table(cell)
    for lev in sorted({1, spec.level}):
        _check_gluing(K, M, _cell_offsets(M, lev), table)

    # model offsets are in half units of a unit cell; the cell graph uses 1/denom units
    offs = _cell_offsets(M, spec.level) * (cell.denom // 2)
    copies = offs[:, None, :] + cell.coords[None, :, :]
    uniq, inv = np.unique(copies.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(copies.shape[:2])
    mass = np.zeros(len(uniq))
    np.add.at(mass, inv.ravel(), np.tile(cell.mass, len(offs)))
    e = np.stack([inv[:, cell.edges[:, 0]], inv[:, cell.edges[:, 1]]], axis=-1).reshape(-1, 2)
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    y_scale = K.y_scale if K.y_scale != 1.0 else M.y_scale
    return WeightedGraph(
        coords=uniq, denom=cell.denom, mass=mass, edges=e,
        conductance=np.ones(len(e)), length=np.full(len(e), cell.length[0]),
        y_scale=y_scale,
        meta={"family": f"blowup({K.name},{M.name})", "cell": K.name, "model": M.name,
              "cell_level": spec.cell_level, "level": spec.level, "scale": 1, "kind": "blowup"},
    )


# ---------------------------------------------------------------------------
# balls and volumes


def ball(graph: WeightedGraph, center: int, r: float) -> np.ndarray:
    """Indices of vertices y with d(center, y) < r (open ball)."""
    if not 0 <= center < graph.n:
        raise GraphError(f"unknown vertex {center}")
    if not r > 0:
        raise GraphError("radius must be > 0")
    d = graph.distances_from([center], limit=r)[0]
    return np.flatnonzero(d < r)


def volume(graph: WeightedGraph, center: int, r: float) -> float:
    return float(graph.mass[ball(graph, center, r)].sum())


def volumes_from_distances(graph: WeightedGraph, dist_row: np.ndarray, radii) -> np.ndarray:
    """V(x, r) for many radii from one precomputed distance row."""
    order = np.argsort(dist_row, kind="stable")
    ds = dist_row[order]
    cm = np.concatenate([[0.0], np.cumsum(graph.mass[order])])
    idx = np.searchsorted(ds, np.asarray(radii, dtype=float), side="left")
    return cm[idx]


def central_vertices(graph: WeightedGraph, fraction: float = 0.5) -> np.ndarray:
    """Vertices in the central box covering ``fraction`` of the bounding box side."""
    pts = graph.coords.astype(float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    mid, half = (lo + hi) / 2, (hi - lo) * fraction / 2
    inside = np.all(np.abs(pts - mid) <= half + 1e-9, axis=1)
    return np.flatnonzero(inside)


def graph_from_edges(n: int, edges, conductance=None, mass=None, coords=None,
                     length=None, metric: str = "geodesic") -> WeightedGraph:
    """Convenience constructor for small hand-made graphs (tests, examples)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e = e[order]
    c = np.ones(len(e)) if conductance is None else np.asarray(conductance, float)[order]
    ln = np.ones(len(e)) if length is None else np.asarray(length, float)[order]
    m = np.ones(n) if mass is None else np.asarray(mass, float)
    xy = np.stack([np.arange(n), np.zeros(n, dtype=np.int64)], axis=1) if coords is None else coords
    return WeightedGraph(coords=xy, denom=1, mass=m, edges=e, conductance=c, length=ln,
                         metric=metric, meta={"family": "custom"})
