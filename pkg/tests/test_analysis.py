import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drillsim.analysis import (AnalysisError, InfeasibleWindow, StressRecovery, WindowGrid, dominant_peak,
                               efficiency_from_series, mean_velocity, near_frequency, optimize_deterministic,
                               optimize_robust, psd, rate_of_penetration, sample_step, shock_packages,
                               time_mean, von_mises)
from drillsim.fem import build_mesh
from drillsim.params import ParameterError


class TestPsd:
    def test_sinusoid_peak(self):
        dt = 1e-3
        t = np.arange(4096) * dt
        est = psd(np.sin(2 * math.pi * 50.0 * t), t=t)
        assert dominant_peak(est) == pytest.approx(50.0, abs=est.df)

    def test_parseval(self, rng):
        dt = 1e-3
        x = rng.standard_normal(8192)
        est = psd(x, dt=dt)
        assert np.sum(est.density) * est.df == pytest.approx(np.mean(x**2), rel=0.01)

    def test_white_noise_is_flat(self, rng):
        dt = 1e-3
        est = psd(rng.standard_normal(16384), dt=dt, window=101)
        # one-sided density of unit-variance noise; averaging in dB biases by -10 gamma / ln 10
        level = 10 * math.log10(2 * dt) - 10 * np.euler_gamma / math.log(10)
        inner = est.smooth_db[60:-60]
        assert np.all(np.abs(inner - level) < 3.0)

    def test_band_limits(self):
        t = np.arange(2048) * 1e-3
        x = np.sin(2 * math.pi * 5 * t) + 0.1 * np.sin(2 * math.pi * 100 * t)
        est = psd(x, t=t)
        assert dominant_peak(est, f_min=20.0) == pytest.approx(100.0, abs=est.df)
        with pytest.raises(AnalysisError):
            dominant_peak(est, f_min=600.0)

    def test_rejects_bad_input(self):
        t = np.r_[np.arange(100) * 1e-3, 0.2]
        with pytest.raises(AnalysisError):
            psd(np.zeros(101), t=t)
        with pytest.raises(AnalysisError):
            psd(np.zeros(10), dt=1e-3)
        with pytest.raises(AnalysisError):
            psd(np.zeros(100))
        with pytest.raises(AnalysisError):
            sample_step([0.0, 0.1, 0.3])

    def test_near_frequency(self):
        assert near_frequency(29.0, [0.0, 29.11, 58.0])
        assert not near_frequency(40.0, [29.11, 58.0])
        assert not near_frequency(1.0, [])


class TestEfficiencyAndRop:
    t = np.linspace(0.0, 1.0, 101)

    def series(self, **over):
        one = np.ones_like(self.t)
        s = dict(u_bit_dot=0.01 * one, F_br=-1e4 * one, omega_bit=6.0 * one, T_br=-1e3 * one,
                 u0_dot=0.01 * one, lam1=-1e4 * one, om0=6.0 * one, lam4=-6.25e3 * one)
        s.update(over)
        return s

    def test_ratio(self):
        # output 100 + 6000 W, input 100 + 37500 W
        eff = efficiency_from_series(self.t, **self.series())
        assert eff == pytest.approx(6100 / 37600, rel=1e-12)
        assert eff == pytest.approx(0.16, abs=0.01)

    def test_stalled_bit_has_zero_efficiency(self):
        z = np.zeros_like(self.t)
        assert efficiency_from_series(self.t, **self.series(u_bit_dot=z, omega_bit=z)) == 0.0

    def test_undefined_without_input(self):
        z = np.zeros_like(self.t)
        with pytest.raises(AnalysisError):
            efficiency_from_series(self.t, **self.series(u0_dot=z, om0=z))

    def test_rop_of_constant_feed(self):
        v = np.full(self.t.size, 1 / 180)
        assert rate_of_penetration(v, self.t) == pytest.approx(1 / 180, rel=1e-14)

    def test_rop_of_oscillation(self):
        t = np.linspace(0, 20 * math.pi, 200001)
        assert rate_of_penetration(np.sin(t), t) == pytest.approx(1 / math.pi, rel=1e-6)
        assert mean_velocity(np.sin(t), t) == pytest.approx(0.0, abs=1e-9)

    def test_time_mean_plain(self):
        assert time_mean([1.0, 2.0, 6.0]) == 3.0

    @settings(max_examples=100)
    @given(arrays(float, st.integers(2, 50), elements=st.floats(-10, 10)))
    def test_rop_bounds_mean(self, v):
        t = np.arange(v.size, dtype=float)
        assert rate_of_penetration(v, t) >= mean_velocity(v, t) - 1e-12
        assert rate_of_penetration(v, t) >= 0.0

    def test_shock_packages(self):
        pk = shock_packages([0.5, 0.0, 0.05, 0.12, 1.0, 1.01])
        assert pk == [(0.0, 0.12), (0.5, 0.5), (1.0, 1.01)]
        assert shock_packages([]) == []


@pytest.fixture(scope="module")
def rec(model):
    return StressRecovery(build_mesh(2.0, 4), model)


class TestStress:
    def nodal(self, rec, fn):
        mesh = rec.kernel.mesh
        Q = np.zeros((mesh.n_nodes, 6))
        fn(Q, mesh.node_coords)
        return Q.ravel()

    def test_zero_state(self, rec):
        assert rec.max_vm(np.zeros(rec.kernel.mesh.n_dofs)) == 0.0

    def test_uniform_stretch(self, rec, model):
        eps = 1e-4

        def stretch(Q, x):
            Q[:, 0] = eps * x

        vm = rec.field(self.nodal(rec, stretch)).vm
        np.testing.assert_allclose(vm, model.material.E * (eps + 0.5 * eps**2), rtol=1e-12)

    def test_uniform_twist(self, rec, model):
        k = 1e-3

        def twist(Q, x):
            Q[:, 3] = k * x

        R = model.geometry.R_ext
        kG = model.material.kappa_s * model.moduli.G
        expected = math.hypot(model.material.E * 0.5 * (R * k) ** 2, math.sqrt(3) * kG * R * k)
        np.testing.assert_allclose(rec.field(self.nodal(rec, twist)).vm, expected, rtol=1e-10)

    def test_bending_plane_invariance(self, rec):
        c = 1e-3

        def bend_v(Q, x):
            Q[:, 1] = 0.5 * c * x**2
            Q[:, 5] = c * x

        def bend_w(Q, x):
            Q[:, 2] = 0.5 * c * x**2
            Q[:, 4] = -c * x

        a = rec.max_vm(self.nodal(rec, bend_v))
        b = rec.max_vm(self.nodal(rec, bend_w))
        assert a > 0 and a == pytest.approx(b, rel=1e-12)

    def test_batched_states(self, rec, rng):
        Q = 1e-3 * rng.standard_normal((3, rec.kernel.mesh.n_dofs))
        f = rec.field(Q)
        assert f.vm.shape == (3, rec.x.size, 8)
        np.testing.assert_allclose(f.vm[1], rec.field(Q[1]).vm, rtol=1e-14)

    def test_von_mises_formula(self):
        assert von_mises(3.0, 1.0, 1.0) == pytest.approx(math.sqrt(15.0))


@dataclass
class Plane:
    """Synthetic response: ROP and stress both grow with V0 and Omega."""

    def __call__(self, V0, Omega):
        return {"rop": V0 * (1 + 0.1 * Omega), "vm_max": 25e6 * Omega * (1 + 100 * V0)}


@dataclass
class PlaneMc:
    n: int = 4

    def __call__(self, V0, Omega):
        det = Plane()(V0, Omega)
        return {"rop": np.full(self.n, det["rop"]), "vm_max": np.full(self.n, det["vm_max"])}


def failing(V0, Omega):
    if V0 > 0.005:
        raise RuntimeError("diverged")
    return Plane()(V0, Omega)


class TestWindowOptimization:
    def grid(self):
        return WindowGrid.linspace((0.001, 0.01), (1.0, 8.0), 4, 5)

    def test_grid_validation(self):
        with pytest.raises(ParameterError):
            WindowGrid([0.2, 0.1], [1.0])
        with pytest.raises(ParameterError):
            WindowGrid([], [1.0])
        with pytest.raises(ParameterError):
            WindowGrid([-1.0], [1.0])

    def test_single_point(self):
        opt = optimize_deterministic(WindowGrid([0.005], [2.0]), Plane())
        assert (opt.i, opt.j) == (0, 0) and opt.objective == pytest.approx(0.006)

    def test_stress_bound_moves_optimum(self):
        free = optimize_deterministic(self.grid(), Plane(), uts=1e12)
        assert (free.i, free.j) == (3, 4)
        tight = optimize_deterministic(self.grid(), Plane(), uts=300e6)
        assert tight.grid.results["margin"][tight.i, tight.j] >= 0
        assert tight.objective < free.objective
        assert not tight.admissible.all()

    def test_infeasible(self):
        with pytest.raises(InfeasibleWindow):
            optimize_deterministic(self.grid(), Plane(), uts=1.0)

    def test_robust_without_dispersion_equals_deterministic(self):
        det = optimize_deterministic(self.grid(), Plane(), uts=300e6)
        rob = optimize_robust(self.grid(), PlaneMc(), uts=300e6, p_risk=0.1)
        assert (rob.i, rob.j) == (det.i, det.j)
        assert rob.objective == pytest.approx(det.objective)
        np.testing.assert_array_equal(rob.grid.results["prob_safe"] >= 0.9, det.admissible)

    def test_robust_rejects_bad_risk(self):
        with pytest.raises(ParameterError):
            optimize_robust(self.grid(), PlaneMc(), p_risk=1.0)

    def test_failed_points_are_excluded(self):
        opt = optimize_deterministic(self.grid(), failing, uts=1e12)
        assert opt.grid.failed[2:].all() and not opt.grid.failed[:2].any()
        assert opt.i == 1

    def test_parallel_matches_serial(self):
        a = optimize_deterministic(self.grid(), Plane(), uts=300e6)
        b = optimize_deterministic(self.grid(), Plane(), uts=300e6, jobs=2)
        np.testing.assert_array_equal(a.grid.results["rop"], b.grid.results["rop"])
        assert (a.i, a.j) == (b.i, b.j)

    def test_rows(self):
        opt = optimize_deterministic(self.grid(), Plane(), uts=300e6)
        cols, rows = opt.grid.rows()
        assert cols[:3] == ["V0", "Omega", "failed"] and "rop" in cols
        assert len(rows) == 20
