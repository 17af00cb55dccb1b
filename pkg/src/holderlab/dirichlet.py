"""Graph Dirichlet form: energy, Laplacian, harmonic extension, Poisson problems.

Sign convention: ``L = M^{-1} K`` is positive semidefinite, with
``E(u, v) = <L u, v>_m``, heat semigroup ``exp(-t L)``, harmonic meaning
``L u = 0`` and the Poisson problem ``L u = f``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .graphs import WeightedGraph

DENSE_LIMIT = 500
TRACE_DENSE_LIMIT = 2000
CG_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear solve failed to reach the residual target."""


class DomainMismatch(ValueError):
    pass


@dataclass
class SolveInfo:
    method: str
    size: int
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True

    def to_dict(self):
        return {"method": self.method, "size": self.size, "iterations": self.iterations,
                "residual": self.residual, "converged": self.converged}


@dataclass(eq=False)
class Potential:
    """Vertex function tied to one graph, with optional solver diagnostics."""

    values: np.ndarray
    graph_hash: str
    info: SolveInfo | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("potential values must be finite")

    def __len__(self):
        return len(self.values)

    def to_json(self) -> str:
        doc = {str(i): float(v) for i, v in enumerate(self.values)}
        return json.dumps({"graph": self.graph_hash, "values": doc,
                           "diagnostics": self.info.to_dict() if self.info else None})

    @classmethod
    def from_json(cls, text: str) -> "Potential":
        doc = json.loads(text)
        vals = doc["values"]
        arr = np.array([vals[str(i)] for i in range(len(vals))])
        return cls(arr, doc["graph"])


def _solve_spd(A: sp.spmatrix, b: np.ndarray, x0=None) -> tuple[np.ndarray, SolveInfo]:
    """Solve an SPD system: dense Cholesky when small, Jacobi-preconditioned CG otherwise."""
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    if n < DENSE_LIMIT:
        x = sla.solve(A.toarray(), b, assume_a="pos")
        res = np.linalg.norm(A @ x - b, axis=0).max() / max(np.linalg.norm(b, axis=0).max(), 1e-300)
        return x, SolveInfo("dense", n, 0, float(res), True)
    if b.ndim == 2:
        cols = [_solve_spd(A, b[:, j]) for j in range(b.shape[1])]
        x = np.stack([c[0] for c in cols], axis=1)
        info = SolveInfo("cg", n, max(c[1].iterations for c in cols), max(c[1].residual for c in cols),
                         all(c[1].converged for c in cols))
        return x, info
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), SolveInfo("cg", n)
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    cap = int(math.ceil(20 * math.sqrt(n)))
    count = [0]

    def cb(_):
        count[0] += 1

    x, flag = spla.cg(A, b, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=cap, M=M, callback=cb)
    res = float(np.linalg.norm(A @ x - b) / bnorm)
    ok = flag == 0 and res <= 10 * CG_RTOL
    return x, SolveInfo("cg", n, count[0], res, ok)


class EnergyForm:
    """E(u, v) = sum over edges c_xy (u(x) - u(y)) (v(x) - v(y)).

    Built either from a graph or from a dense symmetric conductance matrix
    (the latter is what a trace form produces).
    """

    def __init__(self, graph: WeightedGraph | None = None, *, dense=None, mass=None, vertices=None,
                 label=None):
        if graph is not None:
            if not graph.is_connected():
                raise ValueError("energy form needs a connected graph")
            self.graph = graph
            self.K = graph.stiffness()
            self.mass = graph.mass
            self.vertices = np.arange(graph.n)
            self.label = graph.content_hash()
            self._dense = None
        else:
            C = np.array(dense, dtype=float)
            if C.ndim != 2 or C.shape[0] != C.shape[1]:
                raise ValueError("conductance matrix must be square")
            C = 0.5 * (C + C.T)
            np.fill_diagonal(C, 0.0)
            if np.any(C < -1e-12 * max(1.0, np.abs(C).max())):
                raise ValueError("effective conductances must be nonnegative")
            self.graph = None
            self._dense = C
            self.K = sp.csr_matrix(np.diag(C.sum(axis=1)) - C)
            self.mass = np.ones(len(C)) if mass is None else np.asarray(mass, dtype=float)
            self.vertices = np.arange(len(C)) if vertices is None else np.asarray(vertices)
            self.label = label or "trace"
        if np.any(~(self.mass > 0)):
            raise ValueError("zero or negative measure weight")

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def conductances(self) -> np.ndarray:
        """Dense symmetric conductance matrix (zero diagonal)."""
        if self._dense is not None:
            return self._dense
        C = -self.K.toarray()
        np.fill_diagonal(C, 0.0)
        return C

    def _vec(self, u) -> np.ndarray:
        if isinstance(u, Potential):
            if u.graph_hash != self.label:
                raise DomainMismatch("potential belongs to a different graph")
            u = u.values
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.n:
            raise DomainMismatch(f"expected {self.n} values, got {u.shape[0]}")
        return u

    def potential(self, values, info=None) -> Potential:
        return Potential(values, self.label, info)


def energy(form: EnergyForm, u, v=None) -> float:
    a = form._vec(u)
    b = a if v is None else form._vec(v)
    return float(a @ (form.K @ b))


def edge_energy(form: EnergyForm, u) -> np.ndarray:
    """Energy measure of u per vertex: each edge's c (du)^2 split half to each endpoint."""
    g = form.graph
    if g is None:
        raise ValueError("energy measure needs a graph-backed form")
    a = form._vec(u)
    uu, vv = g.edges[:, 0], g.edges[:, 1]
    w = g.conductance * (a[uu] - a[vv]) ** 2
    out = np.zeros(g.n)
    np.add.at(out, uu, 0.5 * w)
    np.add.at(out, vv, 0.5 * w)
    return out


def laplacian_apply(form: EnergyForm, u) -> Potential:
    a = form._vec(u)
    return form.potential((form.K @ a) / form.mass)


def _as_index(form: EnergyForm, Y) -> np.ndarray:
    Y = np.unique(np.asarray(Y, dtype=np.int64).ravel())
    if len(Y) and (Y[0] < 0 or Y[-1] >= form.n):
        raise ValueError("vertex index out of range")
    return Y


def _with_values(form: EnergyForm, Y, vals, what: str):
    """Sort a vertex list together with its values; repeated vertices must agree."""
    Y = np.asarray(Y, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float)
    vals = np.full(Y.shape, float(vals)) if vals.ndim == 0 else vals.ravel()
    if vals.shape != Y.shape:
        raise ValueError(f"{what} values do not match the {what} set")
    if len(Y) and (Y.min() < 0 or Y.max() >= form.n):
        raise ValueError("vertex index out of range")
    order = np.argsort(Y, kind="stable")
    Y, vals = Y[order], vals[order]
    rep = np.flatnonzero(np.diff(Y) == 0)
    if len(rep):
        if np.any(vals[rep] != vals[rep + 1]):
            raise ValueError(f"conflicting values for a repeated {what} vertex")
        keep = np.concatenate([[True], np.diff(Y) != 0])
        Y, vals = Y[keep], vals[keep]
    return Y, vals


def _complement(n: int, Y: np.ndarray) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    mask[Y] = False
    return np.flatnonzero(mask)


def solve_harmonic(form: EnergyForm, Y, g) -> Potential:
    """Harmonic extension h_Y(g): equal to g on Y, L u = 0 off Y."""
    Y, g = _with_values(form, Y, g, "boundary")
    if len(Y) == 0:
        raise ValueError("boundary set must be nonempty")
    u = np.zeros(form.n)
    u[Y] = g
    I = _complement(form.n, Y)
    if len(I) == 0:
        return form.potential(u, SolveInfo("none", 0))
    K = form.K.tocsr()
    KII = K[I][:, I]
    # every component of the interior must see the boundary, else non-unique
    ncomp, lab = connected_components(KII, directed=False)
    if ncomp > 0:
        touches = np.zeros(ncomp, dtype=bool)
        KIY = K[I][:, Y]
        touches[lab[np.flatnonzero(np.asarray(abs(KIY).sum(axis=1)).ravel() > 0)]] = True
        if not touches.all():
            raise ValueError("a component has no boundary vertex; harmonic extension is not unique")
    else:
        KIY = K[I][:, Y]
    x, info = _solve_spd(KII, -(KIY @ g))
    if not info.converged:
        raise SolverError(f"harmonic solve did not converge: {info.to_dict()}")
    u[I] = x
    return form.potential(u, info)


def solve_poisson(form: EnergyForm, D, f) -> Potential:
    """Solution of L u = f on D with u = 0 outside D."""
    D, f = _with_values(form, D, f, "domain")
    if len(D) == 0:
        raise ValueError("domain must be nonempty")
    if len(D) == form.n:
        raise ValueError("domain is the whole vertex set; the Dirichlet problem is singular")
    KDD = form.K.tocsr()[D][:, D]
    x, info = _solve_spd(KDD, form.mass[D] * f)
    if not info.converged:
        raise SolverError(f"Poisson solve did not converge: {info.to_dict()}")
    u = np.zeros(form.n)
    u[D] = x
    return form.potential(u, info)


class TraceForm(EnergyForm):
    """Energy form on Y obtained by eliminating the other vertices.

    Materialized as a dense conductance matrix when |Y| is at most
    TRACE_DENSE_LIMIT; larger traces answer energy queries through
    harmonic extension in the parent form.
    """

    def __init__(self, parent: EnergyForm, Y: np.ndarray):
        self.parent = parent
        self.Y = Y
        self.graph = None
        self.mass = parent.mass[Y]
        self.vertices = parent.vertices[Y]
        self.label = f"{parent.label}|trace{len(Y)}"
        if len(Y) <= TRACE_DENSE_LIMIT:
            K = parent.K.tocsr()
            I = _complement(parent.n, Y)
            KYY = K[Y][:, Y].toarray()
            KIY = K[I][:, Y]
            X, info = _solve_spd(K[I][:, I], KIY.toarray())
            if not info.converged:
                raise SolverError(f"trace elimination did not converge: {info.to_dict()}")
            S = KYY - KIY.T @ X
            S = 0.5 * (S + S.T)
            C = -S
            np.fill_diagonal(C, 0.0)
            C[C < 0] = 0.0  # roundoff; effective conductances are nonnegative
            self._dense = C
            # Keep the Schur complement itself so energies are exact to roundoff
            self.K = sp.csr_matrix(S)
            self.info = info
        else:
            self._dense = None
            self.K = None
            self.info = None

    @property
    def n(self) -> int:
        return len(self.Y)

    @property
    def implicit(self) -> bool:
        return self.K is None

    def conductances(self):
        if self._dense is None:
            raise ValueError("trace form is implicit; dense conductances unavailable")
        return self._dense

    def extend(self, g) -> Potential:
        return solve_harmonic(self.parent, self.Y, g)


def trace_form(form: EnergyForm, Y) -> TraceForm:
    Y = _as_index(form, Y)
    if len(Y) == 0 or len(Y) == form.n:
        raise ValueError("trace set must be a nonempty proper subset")
    return TraceForm(form, Y)


def trace_energy(tr: TraceForm, g, h=None) -> float:
    """Energy in a trace form; works for implicit traces too."""
    if not tr.implicit:
        return energy(tr, g, h)
    ug = tr.extend(g).values
    uh = ug if h is None else tr.extend(h).values
    return float(ug @ (tr.parent.K @ uh))
