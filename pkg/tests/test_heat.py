import numpy as np
import pytest
from hypothesis import given, strategies as st

from holderlab.dirichlet import EnergyForm, laplacian_apply
from holderlab.graphs import build_compact, build_prefractal, graph_from_edges
from holderlab.heat import (HeatKernelTable, SizeCapExceeded, cached_spectrum, cached_table,
                            dt_heat_kernel, dyadic_grid, fiedler_value, heat_kernel, kernel_matrix,
                            log_time_grid, semigroup_apply, spectrum)

TWO = EnergyForm(graph_from_edges(2, [(0, 1)]))


def random_form(rng, n=20):
    edges = {(i, i + 1) for i in range(n - 1)}
    for _ in range(25):
        a, b = sorted(rng.choice(n, 2, replace=False))
        edges.add((int(a), int(b)))
    edges = sorted(edges)
    return EnergyForm(graph_from_edges(n, edges, conductance=rng.uniform(0.3, 3, len(edges)),
                                       mass=rng.uniform(0.5, 2, n)))


class TestSpectrum:
    def test_small_examples(self):
        assert spectrum(TWO).values == pytest.approx([0, 2])
        path = EnergyForm(graph_from_edges(3, [(0, 1), (1, 2)]))
        assert spectrum(path).values == pytest.approx([0, 1, 3])

    def test_residuals(self, rng):
        for f in (random_form(rng), EnergyForm(build_prefractal("gasket", 3))):
            s = spectrum(f)
            assert s.n == f.n
            assert s.orthonormality_residual() < 1e-10
            assert s.reconstruction_residual(f) < 1e-8
            assert s.values[0] == 0 and np.all(s.values >= 0)
            assert np.allclose(s.vectors[:, 0], 1 / np.sqrt(f.mass.sum()))

    def test_cap(self):
        with pytest.raises(SizeCapExceeded, match="crank_nicolson"):
            spectrum(EnergyForm(build_prefractal("gasket", 3)), cap=10)

    def test_cache(self, tmp_path):
        f = EnergyForm(build_prefractal("vicsek", 2))
        a = cached_spectrum(f, tmp_path)
        assert (tmp_path / f"spectrum-{f.label}.npz").exists()
        b = cached_spectrum(f, tmp_path)
        assert np.array_equal(a.vectors, b.vectors)

    def test_fiedler(self):
        f = EnergyForm(build_prefractal("gasket", 3))
        assert fiedler_value(f) == pytest.approx(spectrum(f).values[1])


class TestKernel:
    def test_two_vertex_closed_form(self):
        s = spectrum(TWO)
        t = np.logspace(-3, 1, 50)
        e = np.exp(-2 * t)
        assert np.abs(heat_kernel(s, t, 0, 0) - (1 + e) / 2).max() < 1e-12
        assert np.abs(heat_kernel(s, t, 0, 1) - (1 - e) / 2).max() < 1e-12
        assert np.abs(dt_heat_kernel(s, t, 0, 0) + e).max() < 1e-12

    def test_long_time_limit(self, rng):
        f = random_form(rng)
        s = spectrum(f)
        P = kernel_matrix(s, 1e4 / s.values[1])
        assert np.allclose(P, 1 / f.mass.sum(), rtol=1e-10)

    def test_errors(self):
        s = spectrum(TWO)
        with pytest.raises(ValueError):
            heat_kernel(s, 0.0, 0, 1)
        with pytest.raises(ValueError):
            dt_heat_kernel(s, -1.0, 0, 1)

    def test_chapman_kolmogorov(self, rng):
        for _ in range(5):
            f = random_form(rng)
            s = spectrum(f)
            Pt, Ps, Pts = kernel_matrix(s, 0.3), kernel_matrix(s, 0.7), kernel_matrix(s, 1.0)
            assert np.abs((Pt * f.mass) @ Ps - Pts).max() < 1e-10

    def test_axioms(self, rng):
        f = EnergyForm(build_prefractal("vicsek", 3))
        s = spectrum(f)
        for t in np.logspace(-2, 3, 12):
            P = kernel_matrix(s, t)
            assert np.abs(P @ f.mass - 1).max() < 1e-8
            assert np.abs(P - P.T).max() < 1e-12
            # entries far below double roundoff of the spectral sum cannot carry a sign
            assert P.min() > -1e-12 * P.max()
            if t >= 10:  # from here the smallest true entry clears roundoff
                assert P.min() > 0
        diag = heat_kernel(s, np.logspace(-2, 3, 60), 7, 7)
        assert np.all(np.diff(diag) <= 1e-14)

    def test_spectral_gap_envelope(self, rng):
        f = random_form(rng)
        s = spectrum(f)
        C = np.abs(s.vectors[:, 1:]).max() ** 2 * (f.n - 1)
        for t in np.logspace(-1, 2, 20):
            dev = np.abs(kernel_matrix(s, t) - 1 / f.mass.sum()).max()
            assert dev <= C * np.exp(-s.values[1] * t) + 1e-15

    def test_derivative(self, rng):
        f = random_form(rng)
        s = spectrum(f)
        for t in (0.1, 0.5, 2.0):
            D = dt_heat_kernel(s, t, np.arange(f.n), np.arange(f.n))
            h = 1e-5
            fd = (kernel_matrix(s, t + h) - kernel_matrix(s, t - h)) / (2 * h)
            assert np.abs(D - fd).max() <= 1e-6 * np.abs(D).max()
            # dp/dt = -L p in the first argument
            LP = np.stack([laplacian_apply(f, kernel_matrix(s, t)[:, y]).values for y in range(f.n)], axis=1)
            assert np.abs(D + LP).max() < 1e-9
            assert np.abs(D @ f.mass).max() < 1e-10


class TestSemigroup:
    def test_constant(self, rng):
        f = random_form(rng)
        for method in ("spectral", "crank_nicolson"):
            assert np.allclose(semigroup_apply(f, 1.3, np.full(f.n, 2.0), method).values, 2.0)

    def test_zero_time_and_errors(self, rng):
        f = random_form(rng)
        u = rng.normal(size=f.n)
        assert np.array_equal(semigroup_apply(f, 0.0, u).values, u)
        with pytest.raises(ValueError):
            semigroup_apply(f, -1.0, u)
        with pytest.raises(ValueError):
            semigroup_apply(f, 1.0, u, method="euler")

    def test_contraction_and_conservation(self, rng):
        f = random_form(rng)
        s = spectrum(f)
        for _ in range(100):
            u = rng.normal(size=f.n)
            t = 10 ** rng.uniform(-2, 2)
            v = semigroup_apply(f, t, u, spec=s).values
            assert np.abs(v).max() <= np.abs(u).max() * (1 + 1e-12)
            assert np.sum(v * f.mass) == pytest.approx(np.sum(u * f.mass), rel=1e-10, abs=1e-12)

    def test_crank_nicolson_matches_spectral(self, rng):
        f = EnergyForm(build_compact("gasket", 3))
        s = spectrum(f)
        for t in (1e-3, 0.01, 0.1):
            u = rng.normal(size=f.n)
            a = semigroup_apply(f, t, u, spec=s).values
            b = semigroup_apply(f, t, u, method="crank_nicolson").values
            assert np.abs(a - b).max() < 1e-6 * np.abs(u).max()


class TestTable:
    def test_compute_and_cn(self):
        f = EnergyForm(build_prefractal("gasket", 4))
        s = spectrum(f)
        times = dyadic_grid(np.geomspace(0.5, 50, 20))
        rows = [0, 5, 17]
        a = HeatKernelTable.compute(s, times, rows, np.arange(f.n))
        b = HeatKernelTable.compute_cn(f, times, rows, np.arange(f.n))
        assert a.values.shape == (len(times), 3, f.n)
        assert np.abs(a.values - b.values).max() < 1e-6 * a.values.max()

    def test_cn_off_dyadic_times(self):
        f = EnergyForm(build_prefractal("gasket", 3))
        times = np.geomspace(0.3, 7.0, 9)
        a = HeatKernelTable.compute(spectrum(f), times, [1, 4])
        b = HeatKernelTable.compute_cn(f, times, [1, 4])
        assert np.abs(a.values - b.values).max() < 1e-6 * a.values.max()

    def test_bad_grid(self):
        s = spectrum(TWO)
        with pytest.raises(ValueError):
            HeatKernelTable.compute(s, [1.0, 0.5], [0])

    def test_csv_and_cache(self, tmp_path):
        f = EnergyForm(build_prefractal("vicsek", 2))
        s = spectrum(f)
        tab = cached_table(s, [0.5, 1.0], [0, 1], cache_dir=tmp_path)
        again = cached_table(s, [0.5, 1.0], [0, 1], cache_dir=tmp_path)
        assert np.array_equal(tab.values, again.values)
        assert len(list(tmp_path.glob("heat-*.npz"))) == 1
        tab.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,x,y,p" and len(lines) == 1 + 2 * 2 * 2
        t, x, y, p = lines[1].split(",")
        assert float(t) == 0.5 and float(p) == tab.values[0, 0, 0]

    def test_grids(self):
        g = log_time_grid(1.0, 100.0, per_decade=40)
        assert len(g) == 81 and g[0] == pytest.approx(1) and g[-1] == pytest.approx(100)
        d = dyadic_grid(g)
        assert np.all(np.abs(d / g - 1) <= 2 ** -8)
        m, _ = np.frexp(d)
        assert np.all(np.ldexp(m, 8) == np.round(np.ldexp(m, 8)))

    @given(st.floats(1e-3, 1e3), st.floats(1.01, 10))
    def test_dyadic_grid_monotone(self, t0, k):
        d = dyadic_grid(np.geomspace(t0, t0 * k, 30))
        assert np.all(np.diff(d) > 0)
