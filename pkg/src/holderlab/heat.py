"""Heat kernels and the heat semigroup exp(-t L) on weighted graphs.

The kernel is a density against the vertex measure:
``P_t f(x) = sum_y p_t(x, y) f(y) m(y)``.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dirichlet import EnergyForm, Potential

SPECTRUM_CAP = 6000
CN_TOL = 1e-8


class SizeCapExceeded(ValueError):
    pass


@dataclass
class Spectrum:
    """m-orthonormal eigensystem of L: columns of ``vectors`` are the eigenfunctions."""

    values: np.ndarray
    vectors: np.ndarray
    mass: np.ndarray
    label: str = ""

    @property
    def n(self) -> int:
        return len(self.values)

    def orthonormality_residual(self) -> float:
        G = self.vectors.T @ (self.vectors * self.mass[:, None])
        return float(np.abs(G - np.eye(self.n)).max())

    def reconstruction_residual(self, form: EnergyForm) -> float:
        """Relative max-norm error of K - M Phi diag(lambda) Phi^T M."""
        K = form.K.toarray()
        MPhi = self.vectors * self.mass[:, None]
        rec = (MPhi * self.values) @ MPhi.T
        return float(np.abs(K - rec).max() / max(np.abs(K).max(), 1e-300))


def spectrum(form: EnergyForm, cap: int = SPECTRUM_CAP) -> Spectrum:
    n = form.n
    if n > cap:
        raise SizeCapExceeded(
            f"{n} vertices exceeds the dense spectrum cap of {cap}; use "
            "semigroup_apply(..., method='crank_nicolson') instead"
        )
    s = 1.0 / np.sqrt(form.mass)
    A = form.K.toarray() * s[:, None] * s[None, :]
    lam, psi = sla.eigh(A)
    phi = psi * s[:, None]
    # pin the ground state: constant function, eigenvalue exactly zero
    lam[0] = 0.0
    phi[:, 0] = 1.0 / math.sqrt(form.mass.sum())
    lam = np.maximum(lam, 0.0)
    return Spectrum(lam, phi, np.asarray(form.mass, dtype=float), form.label)


def cached_spectrum(form: EnergyForm, cache_dir=None, cap: int = SPECTRUM_CAP) -> Spectrum:
    """spectrum() with an npz cache keyed by the graph content hash."""
    if cache_dir is None or not form.label:
        return spectrum(form, cap)
    path = os.path.join(cache_dir, f"spectrum-{form.label}.npz")
    if os.path.exists(path):
        with np.load(path) as z:
            return Spectrum(z["values"], z["vectors"], z["mass"], str(z["label"]))
    spec = spectrum(form, cap)
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(path, values=spec.values, vectors=spec.vectors, mass=spec.mass, label=np.array(spec.label))
    return spec


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("t must be > 0")
    return t


def heat_kernel(spec: Spectrum, t, x, y):
    """p_t(x, y). Any of t, x, y may be arrays; result has shape t.shape + x.shape + y.shape."""
    t = _check_t(t)
    X = spec.vectors[np.atleast_1d(x)]
    Y = spec.vectors[np.atleast_1d(y)]
    w = np.exp(-np.multiply.outer(np.atleast_1d(t), spec.values))
    out = np.einsum("tk,xk,yk->txy", w, X, Y, optimize=True)
    return _squeeze(out, t, x, y)


def dt_heat_kernel(spec: Spectrum, t, x, y):
    """Time derivative of p_t(x, y)."""
    t = _check_t(t)
    X = spec.vectors[np.atleast_1d(x)]
    Y = spec.vectors[np.atleast_1d(y)]
    w = -spec.values * np.exp(-np.multiply.outer(np.atleast_1d(t), spec.values))
    out = np.einsum("tk,xk,yk->txy", w, X, Y, optimize=True)
    return _squeeze(out, t, x, y)


def _squeeze(out, t, x, y):
    shape = np.shape(t) + np.shape(x) + np.shape(y)
    out = out.reshape(shape)
    return out.item() if out.ndim == 0 else out


def kernel_matrix(spec: Spectrum, t: float, rows=None, cols=None) -> np.ndarray:
    t = float(_check_t(t))
    A = spec.vectors if rows is None else spec.vectors[rows]
    B = spec.vectors if cols is None else spec.vectors[cols]
    return (A * np.exp(-t * spec.values)) @ B.T


def semigroup_apply(form: EnergyForm, t: float, f, method: str = "spectral",
                    spec: Spectrum | None = None, tol: float = CN_TOL) -> Potential:
    """exp(-t L) f by spectral sum or adaptive Crank-Nicolson."""
    if t < 0:
        raise ValueError("t must be >= 0")
    f = form._vec(f)
    if t == 0:
        return form.potential(f.copy())
    if method == "spectral":
        spec = spec or spectrum(form)
        c = spec.vectors.T @ (form.mass * f)
        return form.potential(spec.vectors @ (np.exp(-t * spec.values) * c))
    if method == "crank_nicolson":
        u, steps = _crank_nicolson(form, t, f, tol)
        return form.potential(u)
    raise ValueError(f"unknown method {method!r}")


class _CNStepper:
    """Crank-Nicolson steps (M + dt/2 K) u' = (M - dt/2 K) u with cached factorizations."""

    def __init__(self, form: EnergyForm):
        self.M = sp.diags(form.mass).tocsc()
        self.K = form.K.tocsc()
        self._lu = {}

    def step(self, u, dt):
        if dt not in self._lu:
            self._lu[dt] = spla.splu((self.M + 0.5 * dt * self.K).tocsc())
        rhs = self.M @ u - 0.5 * dt * (self.K @ u)
        return self._lu[dt].solve(rhs)


def _crank_nicolson(form, t, f, tol):
    U, steps = _crank_nicolson_multi(form, np.array([t]), f, tol)
    return U[0], steps


def _crank_nicolson_multi(form, times, F, tol, stepper=None):
    """Integrate columns of F to each of the increasing ``times``; returns (len(times), *F.shape).

    Step-doubling control; step sizes stay on a power-of-two ladder so
    factorizations are reused. The two half steps are accepted as they are:
    Richardson extrapolation would amplify stiff modes (factor ~1.19 at
    lambda*dt = 40) and pin the step size.
    """
    stepper = stepper or _CNStepper(form)
    floor = 1e-300 + 1e-12 * np.abs(F).max(axis=0)
    # start well below the stiffest time scale
    kmax = float(np.abs(form.K.diagonal() / form.mass).max()) * 2.0
    dt = 2.0 ** math.floor(math.log2(min(times[0], 1e-3 / max(kmax, 1e-300))))
    u, s, steps = F.copy(), 0.0, 0
    out = np.empty((len(times),) + F.shape)
    for i, target in enumerate(times):
        while s < target:
            gap = target - s
            if dt <= gap:
                h = dt
            else:
                # land with power-of-two steps so the cached factorizations are reused;
                # dyadic targets (see dyadic_grid) are hit exactly
                h = 2.0 ** math.floor(math.log2(gap))
                if h < 1e-6 * target:
                    h = gap
            full = stepper.step(u, h)
            half = stepper.step(stepper.step(u, h / 2), h / 2)
            # error relative to each column's current size: kernels decay by orders of magnitude
            err = float(np.max(np.abs(half - full).max(axis=0) / np.maximum(np.abs(half).max(axis=0), floor)))
            if err <= tol or h < 1e-14 * target:
                u = half
                s += h
                steps += 1
                if err < tol / 16 and h == dt:
                    dt *= 2.0
            else:
                dt = h / 2 if h < dt else dt / 2
        s = target  # absorb roundoff in the accumulated time
        out[i] = u
    return out, steps


def fiedler_value(form: EnergyForm) -> float:
    """Smallest nonzero eigenvalue of L by sparse shift-invert (dense below the cap)."""
    if form.n <= SPECTRUM_CAP:
        return float(spectrum(form).values[1])
    M = sp.diags(form.mass).tocsc()
    vals = spla.eigsh(form.K.tocsc(), k=2, M=M, sigma=-1e-6 * float(np.abs(form.K.diagonal() / form.mass).min()),
                      which="LM", return_eigenvectors=False)
    return float(np.sort(vals)[1])


@dataclass
class HeatKernelTable:
    """p_t(x, y) for t in ``times``, x in ``rows``, y in ``cols``; values shape (T, |rows|, |cols|)."""

    times: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    label: str = ""

    @classmethod
    def compute(cls, spec: Spectrum, times, rows, cols=None) -> "HeatKernelTable":
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        rows = np.asarray(rows, dtype=np.int64)
        cols = rows if cols is None else np.asarray(cols, dtype=np.int64)
        A, B = spec.vectors[rows], spec.vectors[cols]
        vals = np.empty((len(times), len(rows), len(cols)))
        for i, t in enumerate(times):
            vals[i] = (A * np.exp(-t * spec.values)) @ B.T
        return cls(times, rows, cols, vals, spec.label)

    @classmethod
    def compute_cn(cls, form: EnergyForm, times, rows, cols=None, tol: float = CN_TOL) -> "HeatKernelTable":
        """Same table by Crank-Nicolson: p_t(., x) = exp(-t L) (1_x / m(x)), all rows at once."""
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0) or times[0] <= 0:
            raise ValueError("time grid must be positive and strictly increasing")
        rows = np.asarray(rows, dtype=np.int64)
        cols = rows if cols is None else np.asarray(cols, dtype=np.int64)
        F = np.zeros((form.n, len(rows)))
        F[rows, np.arange(len(rows))] = 1.0 / form.mass[rows]
        U, _ = _crank_nicolson_multi(form, times, F, tol)
        return cls(times, rows, cols, np.ascontiguousarray(U[:, cols, :].transpose(0, 2, 1)), form.label)

    def cache_key(self) -> str:
        h = hashlib.sha256()
        h.update(self.label.encode())
        for arr in (self.times, self.rows, self.cols):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,x,y,p\n")
            for i, t in enumerate(self.times):
                for a, x in enumerate(self.rows):
                    for b, y in enumerate(self.cols):
                        fh.write(f"{float(t)!r},{x},{y},{float(self.values[i, a, b])!r}\n")

    def save(self, path) -> None:
        np.savez_compressed(path, times=self.times, rows=self.rows, cols=self.cols,
                            values=self.values, label=np.array(self.label))

    @classmethod
    def load(cls, path) -> "HeatKernelTable":
        with np.load(path) as z:
            return cls(z["times"], z["rows"], z["cols"], z["values"], str(z["label"]))


def cached_table(spec: Spectrum, times, rows, cols=None, cache_dir=None) -> HeatKernelTable:
    """Compute a table, reusing an npz file keyed by graph hash and grids when present."""
    probe = HeatKernelTable(np.asarray(times, float), np.asarray(rows, np.int64),
                            np.asarray(rows if cols is None else cols, np.int64), np.empty(0), spec.label)
    if cache_dir is None:
        return HeatKernelTable.compute(spec, times, rows, cols)
    path = os.path.join(cache_dir, f"heat-{probe.cache_key()}.npz")
    if os.path.exists(path):
        return HeatKernelTable.load(path)
    tab = HeatKernelTable.compute(spec, times, rows, cols)
    os.makedirs(cache_dir, exist_ok=True)
    tab.save(path)
    return tab


def dyadic_grid(times, bits: int = 8) -> np.ndarray:
    """Round each time to ``bits`` significant binary digits, dropping duplicates."""
    m, e = np.frexp(np.asarray(times, dtype=float))
    return np.unique(np.ldexp(np.round(np.ldexp(m, bits)), e - bits))


def log_time_grid(t0: float, t1: float, per_decade: int = 40) -> np.ndarray:
    n = max(2, int(math.ceil(per_decade * math.log10(t1 / t0))) + 1)
    return np.logspace(math.log10(t0), math.log10(t1), n)
