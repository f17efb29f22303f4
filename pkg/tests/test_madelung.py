import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qentangle import analytic as an
from qentangle import madelung as md
from qentangle.core import CovMatrix, GaussianState, PairStats, PhysConsts, pair_covariance
from qentangle.dynamics import SolverConfig, integrate_thermo_moments

from conftest import random_spd, random_sym


def vacuum_state(s0: CovMatrix, t: float, c: PhysConsts) -> GaussianState:
    rate = 2 * t * (c.hbar / (2 * c.mass)) ** 2 * s0.inverse
    return GaussianState(an.vacuum_covariance(s0, t, c), rate, t)


def state(m, sd=None):
    m = np.asarray(m, dtype=float)
    return GaussianState(CovMatrix(m), sd if sd is not None else np.zeros_like(m))


class TestDensity:
    def test_standard_peak(self):
        assert md.density(state([[1.0]]), [0.0]) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
        assert md.density(state([[1.0]]), [0.0]) == pytest.approx(0.3989423, abs=1e-7)

    def test_two_d(self):
        assert md.density(state(np.eye(2)), [1.0, 1.0]) == pytest.approx(math.exp(-1) / (2 * math.pi), rel=1e-15)

    def test_even(self, rng):
        s = GaussianState(random_spd(rng, 3))
        x = rng.normal(size=(20, 3))
        np.testing.assert_allclose(md.density(s, x), md.density(s, -x), rtol=1e-15)

    def test_positive_far_out(self):
        assert md.density(state(np.eye(2)), [30.0, 0.0]) > 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            md.density(state(np.eye(2)), [1.0, 2.0, 3.0])

    def test_gradient_vs_finite_difference(self, rng):
        s = GaussianState(random_spd(rng, 2))
        x = rng.normal(size=2)
        h = 1e-6
        fd = [(md.density(s, x + h * e) - md.density(s, x - h * e)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(md.density_gradient(s, x), fd, rtol=1e-7)

    @pytest.mark.slow
    def test_normalization_monte_carlo(self, rng):
        for m in ([[1.0]], pair_covariance(PairStats(2.0, 0.8)).entries, random_spd(rng, 3).entries):
            s = state(m)
            est = md.mc_normalization(s, n=10**6, seed=11)
            expected = md.gaussian_box_mass(s.dim, 8.0)
            assert est.within(expected), (est.mean, est.stderr)
            assert est.stderr < 0.01


class TestVelocity:
    def test_zero_rate(self, rng):
        s = GaussianState(random_spd(rng, 2))
        np.testing.assert_array_equal(md.velocity(s, rng.normal(size=(5, 2))), 0)

    def test_odd(self, rng):
        s = GaussianState(random_spd(rng, 3), random_sym(rng, 3))
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(md.velocity(s, -x), -md.velocity(s, x), rtol=1e-15)

    def test_one_d(self):
        s = state([[2.0]], np.array([[1.0]]))
        np.testing.assert_allclose(md.velocity(s, [3.0]), [0.75])


class TestQuantumPotential:
    def test_one_d_origin(self, natural):
        assert md.quantum_potential(state([[2.0]]), [0.0], natural) == pytest.approx(1 / 8)

    def test_matches_laplacian_of_root_density(self, rng):
        c = PhysConsts(hbar=1.1, mass=0.8)
        s = GaussianState(random_spd(rng, 2))
        h = 1e-4
        for x in rng.normal(size=(10, 2)):
            root = lambda y: math.sqrt(md.density(s, y))
            lap = sum((root(x + h * e) - 2 * root(x) + root(x - h * e)) / h**2 for e in np.eye(2))
            q_fd = -c.hbar**2 * lap / (2 * c.mass * root(x))
            assert md.quantum_potential(s, x, c) == pytest.approx(q_fd, rel=1e-5, abs=1e-7)

    def test_decreases_quadratically(self, natural):
        s = state(np.eye(2))
        q = [md.quantum_potential(s, [a, 0.0], natural) for a in (0.0, 1.0, 2.0)]
        assert q[0] > q[1] > q[2]
        assert (q[0] - q[2]) == pytest.approx(4 * (q[0] - q[1]))


class TestQuantumForce:
    def test_origin(self, rng, natural):
        assert np.all(md.quantum_force(GaussianState(random_spd(rng, 3)), np.zeros(3), natural) == 0)

    def test_one_d(self, natural):
        np.testing.assert_allclose(md.quantum_force(state([[1.0]]), [2.0], natural), [0.5])

    def test_gradient_consistency(self, rng):
        c = PhysConsts(hbar=0.9, mass=1.3)
        for _ in range(100):
            d = int(rng.integers(1, 4))
            s = GaussianState(random_spd(rng, d))
            x = rng.normal(size=d) * 2
            h = 1e-5 * math.sqrt(float(np.max(s.sigma.eigenvalues)))
            grad = np.array([(md.quantum_potential(s, x + h * e, c) - md.quantum_potential(s, x - h * e, c)) / (2 * h)
                             for e in np.eye(d)])
            f = md.quantum_force(s, x, c)
            assert np.linalg.norm(f + grad) <= 1e-6 * max(np.linalg.norm(f), 1e-12)

    def test_nonseparable(self, natural):
        s = GaussianState(pair_covariance(PairStats(1.0, 0.5)))
        f = md.quantum_force(s, [0.0, 1.0], natural)
        assert abs(f[0]) > 0.1
        sep = md.quantum_force(GaussianState(pair_covariance(PairStats(1.0, 0.0))), [0.0, 1.0], natural)
        assert sep[0] == 0

    def test_field_point(self, natural):
        s = state(np.eye(2), np.eye(2))
        fp = md.field_point(s, [1.0, 0.0], natural)
        assert fp.rho > 0
        np.testing.assert_allclose(fp.v, [0.5, 0.0])
        np.testing.assert_allclose(fp.force, [0.25, 0.0])
        assert fp.q == pytest.approx(0.5 - 1 / 8)


class TestFick:
    def test_random_states(self, rng):
        for _ in range(20):
            d = int(rng.integers(1, 5))
            s = GaussianState(random_spd(rng, d), random_sym(rng, d))
            x = rng.normal(size=(100, d))
            assert np.max(md.fick_relative_residual(s, x)) <= 1e-12

    def test_zero_rate(self, natural):
        s = state(np.eye(2))
        np.testing.assert_array_equal(md.fick_residual(s, [[1.0, 2.0]]), 0)

    @given(st.floats(0.1, 5), st.floats(-0.9, 0.9), st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
    def test_property(self, s2, r, x1, x2, rate):
        s = GaussianState(pair_covariance(PairStats(s2, r)), np.array([[rate, 0.3], [0.3, -rate]]))
        assert md.fick_relative_residual(s, [x1, x2]) <= 1e-12


class TestHydroResiduals:
    c = PhysConsts(hbar=1.0, mass=1.0)
    s0 = pair_covariance(PairStats(1.0, 0.5))
    x = np.array([0.7, -0.4])

    def residuals(self, dt, t=1.0):
        st_ = [vacuum_state(self.s0, t + k * dt, self.c) for k in (-1, 0, 1)]
        return md.hydro_residuals(*st_, self.x, self.c)

    def test_second_order_convergence(self):
        dts = [0.1, 0.05, 0.025]
        res = [self.residuals(dt) for dt in dts]
        cont = [abs(r[0]) for r in res]
        mom = [np.linalg.norm(r[1]) for r in res]
        for series in (cont, mom):
            orders = [math.log2(a / b) for a, b in zip(series, series[1:])]
            assert min(orders) >= 1.9, orders

    def test_origin(self):
        st_ = [vacuum_state(self.s0, 1.0 + k * 0.01, self.c) for k in (-1, 0, 1)]
        _, mom = md.hydro_residuals(*st_, np.zeros(2), self.c)
        np.testing.assert_allclose(mom, 0, atol=1e-15)

    def test_overdamped_inertia_is_visible(self):
        c = PhysConsts(gamma=1.0)
        dt = 1e-3
        traj = integrate_thermo_moments(self.s0, c, [0.0, 1 - dt, 1.0, 1 + dt],
                                        SolverConfig(rel_tol=1e-12, abs_tol=1e-14))
        before, at, after = traj.states[1:]
        cont, mom = md.hydro_residuals(before, at, after, self.x, c)
        assert abs(cont) <= 1e-6
        # friction cancels the quantum force, so what is left is the dropped inertia
        v = md.velocity(at, self.x)
        a = at.sigma_dot @ at.sigma.inverse / 2
        inertia = (md.velocity(after, self.x) - md.velocity(before, self.x)) / (2 * dt) + v @ a.T
        assert np.linalg.norm(mom) > 1e-3
        np.testing.assert_allclose(mom, inertia, rtol=1e-9)

    def test_overdamped_friction_balances_force(self):
        c = PhysConsts(gamma=2.0)
        sigma = an.overdamped_covariance(self.s0, 1.0, c)
        rate = (c.hbar / c.mass) ** 2 / (2 * c.gamma) * sigma.inverse
        s = GaussianState(sigma, rate, 1.0)
        np.testing.assert_allclose(c.gamma * md.velocity(s, self.x), md.quantum_force(s, self.x, c) / c.mass,
                                   rtol=1e-12)

    def test_stencil_errors(self):
        st_ = [vacuum_state(self.s0, t, self.c) for t in (0.9, 1.0, 1.2)]
        with pytest.raises(md.StencilError):
            md.hydro_residuals(*st_, self.x, self.c)
        st_ = [vacuum_state(self.s0, t, self.c) for t in (0.9, 1.0, 1.1)]
        with pytest.raises(md.StencilError):
            md.hydro_residuals(*st_, self.x, self.c, max_width=0.1)
        with pytest.raises(md.StencilError):
            md.hydro_residuals(st_[2], st_[1], st_[0], self.x, self.c)


class TestUniversalIntegral:
    def test_closed_form(self, rng):
        c = PhysConsts(hbar=1.3, mass=0.7)
        for _ in range(100):
            d = int(rng.integers(1, 5))
            s = GaussianState(random_spd(rng, d))
            np.testing.assert_allclose(md.universal_integral(s, c), (c.hbar / (2 * c.mass)) ** 2 * np.eye(d),
                                       rtol=1e-10, atol=1e-12)

    def test_scaling(self, rng, natural):
        s0 = random_spd(rng, 2)
        a = md.universal_integral(GaussianState(s0), natural)
        b = md.universal_integral(GaussianState(CovMatrix(7.0 * s0.entries)), natural)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    @pytest.mark.slow
    def test_monte_carlo(self, natural):
        s = GaussianState(pair_covariance(PairStats(1.5, 0.6)))
        est = md.mc_universal_integral(s, natural, n=10**6, seed=5)
        assert est.within(0.25 * np.eye(2)), (est.mean, est.stderr)

    def test_mc_stream_merge_is_deterministic(self, natural):
        s = GaussianState(pair_covariance(PairStats(1.0, 0.3)))
        a = md.mc_universal_integral(s, natural, n=10**4, seed=2)
        b = md.mc_universal_integral(s, natural, n=10**4, seed=2)
        np.testing.assert_array_equal(a.mean, b.mean)
        assert a.n == 10**4


class TestFourthMoment:
    def test_examples(self):
        assert md.fourth_moment_check(GaussianState(pair_covariance(PairStats(1.0, 0.5)))) == pytest.approx(1.5)
        assert md.fourth_moment_check(GaussianState(pair_covariance(PairStats(2.0, 0.0)))) == 0

    def test_rejects_non_pair(self):
        with pytest.raises(ValueError):
            md.fourth_moment_check(state(np.eye(3)))

    def test_constant_on_overdamped_trajectory(self):
        c = PhysConsts(gamma=1.0)
        p0 = PairStats(1.0, 0.5)
        vals = [md.fourth_moment_check(GaussianState(an.overdamped_covariance(pair_covariance(p0), t, c)))
                for t in np.linspace(0, 50, 26)]
        np.testing.assert_allclose(vals, 1.5, rtol=1e-10)

    @pytest.mark.slow
    def test_monte_carlo(self):
        s = GaussianState(pair_covariance(PairStats(1.0, 0.5)))
        est = md.mc_fourth_moment(s, n=10**6, seed=9)
        assert est.within(1.5), (est.mean, est.stderr)
