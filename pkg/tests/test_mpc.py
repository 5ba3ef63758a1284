import numpy as np
import pytest

from proxlab.dynamics import (
    ControlInput,
    IDENTITY_QUAT,
    OrbitConfig,
    RelativeState,
    SpacecraftParams,
    quat_from_axis_angle,
    rk4_step,
    sample_initial_state,
)
from proxlab.mpc import (
    MpcConfig,
    MpcController,
    NoiseConfig,
    TargetState,
    error_vector,
    inject_noise,
    solve_receding_horizon,
    trajectory_cost,
)

CFG = OrbitConfig()
PARAMS = SpacecraftParams()
TARGET = TargetState()


class TestErrorVector:
    def test_at_target(self):
        e = error_vector(TARGET.as_state().as_vector(), TARGET)
        np.testing.assert_allclose(e, np.zeros(13), atol=1e-15)

    def test_double_cover(self):
        s = RelativeState(TARGET.r_hat, np.zeros(3), -TARGET.q_hat, np.zeros(3))
        e = error_vector(s.as_vector(), TARGET)
        np.testing.assert_allclose(e, np.zeros(13), atol=1e-15)

    def test_position_block(self):
        s = RelativeState(TARGET.r_hat + [1, 0, 0], np.zeros(3), TARGET.q_hat, np.zeros(3))
        e = error_vector(s.as_vector(), TARGET)
        np.testing.assert_allclose(e[0:3], [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(e[3:], np.zeros(10), atol=1e-15)


class TestTrajectoryCost:
    def test_zero_at_target(self):
        u = np.zeros((10, 6))
        J = trajectory_cost(TARGET.as_state().as_vector(), u, CFG, PARAMS, MpcConfig(), TARGET)
        assert J == pytest.approx(0.0, abs=1e-18)

    def test_single_stage_formula(self):
        mpc = MpcConfig(Np=1, Nc=1, Q=np.ones(13), R=np.ones(6), P=3.0 * np.ones(13))
        rng = np.random.default_rng(0)
        s0 = RelativeState(TARGET.r_hat + rng.normal(size=3), rng.normal(size=3) * 0.1,
                           TARGET.q_hat, rng.normal(size=3) * 0.1)
        u = rng.normal(size=(1, 6)) * 0.05
        s1 = rk4_step(s0, ControlInput.from_vector(u[0]), CFG, PARAMS)
        e0 = error_vector(s0.as_vector(), TARGET)
        e1 = error_vector(s1.as_vector(), TARGET)
        expected = e0 @ e0 + u[0] @ u[0] + 3.0 * (e1 @ e1)
        J = trajectory_cost(s0.as_vector(), u, CFG, PARAMS, mpc, TARGET)
        assert J == pytest.approx(expected, rel=1e-12)

    def test_q_scaling(self):
        rng = np.random.default_rng(1)
        s0 = sample_initial_state(rng).as_vector()
        u = rng.normal(size=(10, 6)) * 0.05
        base = MpcConfig(R=np.full(6, 1e-30), P=np.zeros(13))
        J1 = trajectory_cost(s0, u, CFG, PARAMS, base, TARGET)
        scaled = MpcConfig(Q=7.0 * base.Q, R=np.full(6, 1e-30), P=np.zeros(13))
        J7 = trajectory_cost(s0, u, CFG, PARAMS, scaled, TARGET)
        assert J7 == pytest.approx(7.0 * J1, rel=1e-12)


class TestSolver:
    def test_zero_control_at_target(self):
        sol = solve_receding_horizon(
            TARGET.as_state().as_vector(), TARGET, CFG, PARAMS, MpcConfig()
        )
        assert np.max(np.abs(sol.u_seq)) <= 1e-6

    def test_cost_monotone_over_iterations(self):
        rng = np.random.default_rng(2)
        s0 = sample_initial_state(rng).as_vector()
        mpc = MpcConfig(sqp_iters=6)
        sol = solve_receding_horizon(s0, TARGET, CFG, PARAMS, mpc)
        hist = np.array(sol.cost_history)
        assert np.all(np.diff(hist) <= 0)

    def test_matches_dense_qp_oracle(self):
        # n0 ~ 0, rotation frozen at the target: translational double
        # integrator with quadratic cost. Independent equality-free QP.
        orbit = OrbitConfig(mu=1.0, r_orbit=1e12)  # n0 ~ 1e-18
        dt = orbit.dt
        mpc = MpcConfig(sqp_iters=12, step_tol=1e-14)
        s0 = RelativeState(TARGET.r_hat + [0.5, -0.3, 0.2], [0.01, -0.02, 0.0],
                           TARGET.q_hat, np.zeros(3))
        sol = solve_receding_horizon(s0.as_vector(), TARGET, orbit, PARAMS, mpc)
        assert np.max(np.abs(sol.u_seq[:, 3:6])) <= 1e-6  # no torque needed

        # oracle: exact discrete double integrator, stacked least squares
        Np, Nc = mpc.Np, mpc.Nc
        nv = 3 * Nc
        Qrv = np.concatenate([mpc.Q[0:3], mpc.Q[3:6]])
        Prv = np.concatenate([mpc.P[0:3], mpc.P[3:6]])

        def simulate(f_vars):
            # returns stacked [r_t - r_hat; v_t] for t = 0..Np
            r = s0.r.copy()
            v = s0.v.copy()
            out = [np.concatenate([r - TARGET.r_hat, v])]
            for t in range(Np):
                f = f_vars[3 * min(t, Nc - 1): 3 * min(t, Nc - 1) + 3]
                r = r + v * dt + 0.5 * f * dt * dt
                v = v + f * dt
                out.append(np.concatenate([r - TARGET.r_hat, v]))
            return np.concatenate(out)

        e_free = simulate(np.zeros(nv))
        S = np.empty((6 * (Np + 1), nv))
        for j in range(nv):
            ej = np.zeros(nv)
            ej[j] = 1.0
            S[:, j] = simulate(ej) - e_free
        W = np.concatenate([np.tile(Qrv, Np), Prv])
        # control cost: held controls repeat the last decision block
        rw = np.tile(mpc.R[0:3], Nc)
        rw[-3:] *= Np - Nc + 1
        H = S.T @ (W[:, None] * S) + np.diag(rw)
        g = S.T @ (W * e_free)
        f_opt = np.linalg.solve(H, -g).reshape(Nc, 3)
        assert np.max(np.abs(f_opt)) < 0.19  # bounds inactive
        np.testing.assert_allclose(sol.u_seq[:, 0:3], f_opt, atol=1e-4)


class TestController:
    def test_near_zero_at_target(self):
        ctl = MpcController(TARGET, CFG, PARAMS)
        u = ctl.step(TARGET.as_state())
        assert np.max(np.abs(u.as_vector())) <= 1e-6

    def test_determinism(self):
        rng = np.random.default_rng(3)
        s = sample_initial_state(rng)
        a = MpcController(TARGET, CFG, PARAMS)
        b = MpcController(TARGET, CFG, PARAMS)
        for _ in range(5):
            ua = a.step(s)
            ub = b.step(s)
            np.testing.assert_array_equal(ua.as_vector(), ub.as_vector())

    def test_bounds_respected_closed_loop(self):
        rng = np.random.default_rng(4)
        s = sample_initial_state(rng)
        ctl = MpcController(TARGET, CFG, PARAMS)
        for _ in range(200):
            u = ctl.step(s)
            assert np.all(np.abs(u.f) <= 0.2)
            assert np.all(np.abs(u.tau) <= 8.0)
            s = rk4_step(s, u, CFG, PARAMS)

    def test_error_decreasing_in_convergent_regime(self):
        # seed 3 is one of the standard evaluation seeds
        rng = np.random.default_rng(3)
        s = sample_initial_state(rng)
        ctl = MpcController(TARGET, CFG, PARAMS)
        errs = []
        for _ in range(900):
            u = ctl.step(s)
            s = rk4_step(s, u, CFG, PARAMS)
            errs.append(np.linalg.norm(error_vector(s.as_vector(), TARGET)))
        window = np.array(errs[500:700])
        assert np.all(np.diff(window) <= 1e-9)


class TestConfigValidation:
    def test_nc_gt_np(self):
        with pytest.raises(ValueError):
            MpcConfig(Np=5, Nc=6)

    def test_r_not_pd(self):
        with pytest.raises(ValueError):
            MpcConfig(R=np.zeros(6))

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            MpcConfig(u_min=np.ones(6), u_max=np.ones(6))


class TestNoise:
    def test_zero_std_identity(self):
        nz = NoiseConfig(sigma_r=0, sigma_v=0, sigma_omega=0, sigma_att_deg=0)
        rng = np.random.default_rng(6)
        s = sample_initial_state(rng)
        out = inject_noise(s, nz, rng)
        np.testing.assert_array_equal(out.as_vector(), s.as_vector())

    def test_disabled_identity(self):
        rng = np.random.default_rng(7)
        s = sample_initial_state(rng)
        out = inject_noise(s, NoiseConfig(enabled=False), rng)
        assert out is s

    def test_quaternion_norm_preserved(self):
        rng = np.random.default_rng(8)
        s = sample_initial_state(rng)
        for _ in range(100):
            out = inject_noise(s, NoiseConfig(), rng)
            assert abs(np.linalg.norm(out.q) - 1.0) < 1e-12

    def test_position_noise_unbiased(self):
        rng = np.random.default_rng(9)
        s = RelativeState([10, -5, 3], np.zeros(3), IDENTITY_QUAT, np.zeros(3))
        nz = NoiseConfig()
        n = 100_000
        acc = np.zeros(3)
        for _ in range(n):
            acc += inject_noise(s, nz, rng).r
        mean = acc / n
        np.testing.assert_allclose(mean, s.r, atol=3 * nz.sigma_r / np.sqrt(n) + 1e-4)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            NoiseConfig(sigma_r=-1.0)
