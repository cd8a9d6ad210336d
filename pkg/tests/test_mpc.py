import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inckoop.dataset import Normalizer, make_reference_repo
from inckoop.embedding import init_net, zero_net
from inckoop.errors import BadDims, DimTooLarge, NotPD
from inckoop.koopman import KoopmanModel, batch_predict
from inckoop.mpc import (MpcConfig, MpcController, QpProblem, build_condensed_qp,
                         condensed_matrices, kkt_certificate, mpc_config_for, mpc_step,
                         qp_oracle_active_set, reference_window, solve_box_qp, track_many,
                         track_reference)
from inckoop.plants import pendulum_spec

SPEC = pendulum_spec()


def integrator(a=1.0, b=1.0):
    """Scalar ``x+ = a x + b u`` with no lifting and an identity normalizer."""
    return KoopmanModel(zero_net(1, 1, 2, 1), [[a]], [[b]], Normalizer.identity(1))


def box_qp(P, q, lo, hi):
    P = np.atleast_2d(np.asarray(P, float))
    d = P.shape[0]
    return QpProblem(P, np.asarray(q, float), np.full(d, lo, float), np.full(d, hi, float))


def cfg1(**kw):
    base = dict(H=1, u_min=[-2.0], u_max=[2.0], eps_abs=1e-10, eps_rel=1e-10, max_iters=50_000)
    base.update(kw)
    return MpcConfig(**base)


def random_qp(rng, d):
    M = rng.standard_normal((d, d))
    P = M @ M.T + 0.1 * np.eye(d)
    return box_qp(P, 3 * rng.standard_normal(d), -1.0, 1.0)


class TestBoxQp:
    def test_clipped_scalar(self):
        sol = solve_box_qp(box_qp([2.0], [-4.0], -1, 1), cfg1())
        assert sol.status == "Solved"
        assert sol.u_star[0] == pytest.approx(1.0, abs=1e-8)

    def test_two_dim_mixed_active_set(self):
        sol = solve_box_qp(box_qp(2 * np.eye(2), [-1.0, -6.0], -1, 1), cfg1())
        assert np.allclose(sol.u_star, [0.5, 1.0], atol=1e-8)
        assert sol.objective == pytest.approx(0.25 + 1 - 0.5 - 6.0)

    def test_unconstrained_closed_form(self, rng):
        qp = random_qp(rng, 5)
        qp.lower[:] = -1e6
        qp.upper[:] = 1e6
        sol = solve_box_qp(qp, cfg1(auto_rho=True))
        assert np.allclose(sol.u_star, -np.linalg.solve(qp.P, qp.q), atol=1e-6)

    @settings(max_examples=60)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.booleans())
    def test_matches_active_set_oracle(self, seed, d, auto):
        qp = random_qp(np.random.default_rng(seed), d)
        sol = solve_box_qp(qp, cfg1(auto_rho=auto))
        exact = qp_oracle_active_set(qp)
        assert np.all(sol.u_star >= qp.lower) and np.all(sol.u_star <= qp.upper)
        assert sol.objective - qp.objective(exact) <= 1e-6 * (1 + abs(qp.objective(exact)))
        assert kkt_certificate(qp, sol.u_star, tol=1e-5)

    def test_max_iters_status_stays_feasible(self, rng):
        qp = random_qp(rng, 6)
        sol = solve_box_qp(qp, cfg1(max_iters=2))
        assert sol.status == "MaxIters"
        assert np.all(sol.u_star >= -1) and np.all(sol.u_star <= 1)

    def test_not_pd(self):
        with pytest.raises(NotPD):
            solve_box_qp(box_qp([[1.0, 0], [0, -1.0]], [0.0, 0.0], -1, 1), cfg1())

    def test_oracle_dimension_cap(self):
        with pytest.raises(DimTooLarge):
            qp_oracle_active_set(box_qp(np.eye(9), np.zeros(9), -1, 1))

    def test_kkt_certificate_rejects_suboptimal(self):
        qp = box_qp([2.0], [-4.0], -1, 1)
        assert kkt_certificate(qp, [1.0])
        assert not kkt_certificate(qp, [0.0])
        assert not kkt_certificate(qp, [1.5])


class TestCondensing:
    def test_prediction_maps_match_rollout(self, rng):
        net = init_net(2, 5, 6, 1, seed=0)
        A = 0.9 * np.eye(5) + 0.05 * rng.standard_normal((5, 5))
        B = rng.standard_normal((5, 2))
        model = KoopmanModel(net, A, B, Normalizer.identity(2))
        H = 4
        Phi, Gam = condensed_matrices(A, B, 2, H)
        x0 = rng.standard_normal(2)
        U = rng.standard_normal((H, 2))
        stacked = Phi @ model.lift(x0) + Gam @ U.ravel()
        expect = batch_predict(model, x0[None], U[None])[0, 1:]
        assert np.allclose(stacked.reshape(H, 2), expect, atol=1e-12)

    def test_scalar_qp_example(self):
        # H = 1, x = 0, ref = 1: P = 2 (1 + R), q = 2 (0 - 1)
        qp = build_condensed_qp(integrator(), [0.0], [[0.0], [1.0]], cfg1(R=0.01))
        assert qp.P[0, 0] == pytest.approx(2.02)
        assert qp.q[0] == pytest.approx(-2.0)

    def test_terminal_weight_on_last_stage(self):
        ctl = MpcController(integrator(), cfg1(H=3, u_min=[-1], u_max=[1], Q=2.0, F=5.0))
        assert np.array_equal(ctl.W, [2.0, 2.0, 5.0])

    def test_window_shape_checked(self):
        with pytest.raises(BadDims):
            build_condensed_qp(integrator(), [0.0], [[0.0]], cfg1())


class TestMpcStep:
    def test_reach_reference_in_one_step(self):
        assert mpc_step(integrator(), [0.0], [[0.0], [1.0]], cfg1(R=0.0))[0] == \
            pytest.approx(1.0, abs=1e-7)

    def test_at_reference_does_nothing(self):
        assert mpc_step(integrator(), [1.0], [[1.0], [1.0]], cfg1(R=0.0))[0] == \
            pytest.approx(0.0, abs=1e-7)

    def test_saturates_at_bound(self):
        u = mpc_step(integrator(), [0.0], [[0.0], [1.0]], cfg1(u_min=[-0.1], u_max=[0.1]))
        assert u[0] == pytest.approx(0.1, abs=1e-9)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_control_always_in_box(self, x, r):
        u = mpc_step(integrator(), [x], [[x], [r]], cfg1(R=1e-3, u_min=[-0.5], u_max=[0.5]))
        assert -0.5 <= u[0] <= 0.5

    def test_bounds_validated(self):
        with pytest.raises(BadDims):
            cfg1(u_min=[1.0], u_max=[1.0]).validate()
        with pytest.raises(BadDims):
            cfg1(R=-1.0).validate(1, 1)


def pendulum_hold_model():
    """Unlifted pendulum model that treats torque as a velocity nudge."""
    return KoopmanModel(zero_net(2, 2, 4, 1), np.eye(2), [[0.0], [0.1]], Normalizer.identity(2))


class TestTracking:
    def test_reference_window_repeats_last_row(self):
        ref = np.arange(4.0)[:, None]
        assert np.array_equal(reference_window(ref, 2, 3)[:, 0], [2, 3, 3, 3])

    def test_zero_tolerance_fails_at_first_step(self):
        ref = make_reference_repo(SPEC, 1, 30, 0.05, seed=0).plant_units(0)
        cfg = mpc_config_for(SPEC, H=4, R=1e-3)
        traj, metrics, step = track_reference(SPEC, pendulum_hold_model(), ref, cfg, 0.0, 20)
        assert step == 1 and metrics.T_sur == 1
        assert traj.states.shape == (2, 2)

    def test_horizon_cap(self):
        ref = make_reference_repo(SPEC, 1, 30, 0.05, seed=0).plant_units(0)
        cfg = mpc_config_for(SPEC, H=4, R=1e-3)
        traj, metrics, step = track_reference(SPEC, pendulum_hold_model(), ref, cfg, 1e9, 10)
        assert step is None and metrics.T_sur == 10
        assert traj.states.shape[0] == 11
        assert np.array_equal(traj.states[0], ref[0])

    def test_lockstep_equals_individual(self):
        refs = make_reference_repo(SPEC, 3, 30, 0.05, seed=4).plant_units()
        cfg = mpc_config_for(SPEC, H=4, R=1e-3)
        model = pendulum_hold_model()
        together = track_many(SPEC, model, refs, cfg, 0.5, 15)
        for r, res in zip(refs, together):
            alone = track_many(SPEC, model, [r], cfg, 0.5, 15)[0]
            assert np.allclose(alone.trajectory.states, res.trajectory.states, atol=1e-12)
            assert alone.failure_step == res.failure_step

    def test_controls_respect_plant_limits(self):
        refs = make_reference_repo(SPEC, 2, 30, 0.05, seed=4).plant_units()
        cfg = mpc_config_for(SPEC, H=4, R=0.0, auto_rho=True)
        for res in track_many(SPEC, pendulum_hold_model(), refs, cfg, 1e9, 20):
            U = res.trajectory.controls
            assert np.all(U >= SPEC.u_min - 1e-12) and np.all(U <= SPEC.u_max + 1e-12)
