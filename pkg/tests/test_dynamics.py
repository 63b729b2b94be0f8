import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cord.dynamics import (BlockDiag, CentralizedProblem, Coadjoint, DynParams, IntegrationError,
                           MassMode, build_mass_damping, compute_forces, coriolis,
                           energy_change_bound, energy_monitor, init_state, kinetic_energy,
                           max_stable_dt, overdamped_step, read_trajectory, run, step,
                           write_trajectory)
from cord.graph import GridWorldSpec, NoiseSpec, generate_grid_world, generate_random_graph
from cord.lie import exp_se3
from cord.objective import Metric, RobotView, estimate_lipschitz


def spd(rng, n):
    B = rng.normal(size=(n, n))
    return B @ B.T + n * np.eye(n)


@pytest.fixture(scope="module")
def prob():
    sp = generate_random_graph(n_poses=10, n_loops=5, n_robots=2, seed=4)
    return CentralizedProblem(sp.graph, Metric.CHORDAL)


def test_blockdiag_solve_and_quad(rng):
    A, B = spd(rng, 12), spd(rng, 6)
    M = BlockDiag([np.array([0, 2]), np.array([1])], [A, B], 3)
    dense = M.dense()
    idx = np.r_[0:6, 12:18]
    np.testing.assert_allclose(dense[np.ix_(idx, idx)], A)
    np.testing.assert_allclose(dense[6:12, 6:12], B)
    x = rng.normal(size=18)
    np.testing.assert_allclose(M @ x, dense @ x, atol=1e-12)
    np.testing.assert_allclose(M.solve(dense @ x), x, atol=1e-10)
    assert M.quad(x) == pytest.approx(x @ dense @ x)
    np.testing.assert_allclose(M.scaled(2.0).dense(), 2 * dense)
    np.testing.assert_allclose(M.pose_block(2), A[6:, 6:])


def test_blockdiag_rejects_non_finite():
    A = np.eye(6)
    A[0, 0] = np.nan
    with pytest.raises(IntegrationError):
        BlockDiag([np.array([0])], [A], 1).solve(np.ones(6))


@given(st.integers(0, 2**31 - 1))
def test_coriolis_is_work_free(seed):
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=24)
    M = BlockDiag.from_dense(spd(rng, 24))
    for mode in Coadjoint:
        f = coriolis(xi, M, mode=mode)
        assert abs(xi @ f) <= 1e-10 * max(1.0, M.quad(xi))


def test_force_breakdown(rng):
    H = BlockDiag.from_dense(spd(rng, 12))
    p = DynParams(m=0.5, d=3.0, eps_d=0.1)
    M, D = build_mass_damping(H, p, t=2.0)
    np.testing.assert_allclose(D.dense(), (3.0 / 2.0 + 0.1) * H.dense())
    xi, g = rng.normal(size=12), rng.normal(size=12)
    M_prev = H.scaled(0.4)
    f, Mxi = compute_forces(xi, g, M, D, M_prev, dt=0.5)
    np.testing.assert_allclose(f.f_grad, -g)
    np.testing.assert_allclose(f.f_damp, -D.dense() @ xi, atol=1e-12)
    np.testing.assert_allclose(f.f_varM, -(M.dense() - M_prev.dense()) @ xi / 0.5, atol=1e-12)
    np.testing.assert_allclose(Mxi, M.dense() @ xi, atol=1e-12)
    np.testing.assert_allclose(f.total, f.f_grad + f.f_damp + f.f_cor + f.f_varM)


def test_first_step_from_rest(prob):
    # xi_0 = 0: only the gradient acts, xi_1 = -dt M^-1 g
    p = DynParams(m=0.7, d=2.0, dt=0.3)
    s0 = init_state(prob, p)
    s1, info = step(s0, p, prob)
    M = s0.H.scaled(p.m)
    xi1 = -0.3 * M.solve(prob.gradient(s0.X))
    np.testing.assert_allclose(s1.xi.reshape(-1), xi1, atol=1e-12)
    np.testing.assert_allclose(s1.X.matrix(), (s0.X @ exp_se3(0.3 * xi1.reshape(-1, 6))).matrix(),
                               atol=1e-12)
    assert s1.t == pytest.approx(p.t0 + 0.3) and info.T == 0.0
    # the anchor never moves
    np.testing.assert_array_equal(s1.xi[prob.anchor], 0.0)


def test_overdamped_limits(prob, rng):
    X = prob.graph.poses @ exp_se3(rng.normal(scale=0.1, size=(10, 6)))
    g = prob.gradient(X)
    gd = overdamped_step(X, g, BlockDiag.identity(10), dt=0.01)
    np.testing.assert_allclose(gd.matrix(), (X @ exp_se3(-0.01 * g.reshape(-1, 6))).matrix(), atol=1e-12)
    full = CentralizedProblem(prob.graph, Metric.CHORDAL)
    Hd = RobotView.build(prob.graph, None, anchor=0).hessian(Metric.CHORDAL, X)
    lm = overdamped_step(X, g, BlockDiag.from_dense(Hd))
    ref = X @ exp_se3(-np.linalg.solve(Hd, g).reshape(-1, 6))
    np.testing.assert_allclose(lm.matrix(), ref.matrix(), atol=1e-10)
    assert full.cost(lm) < full.cost(X)


def test_step_bounds_agree(rng):
    M = BlockDiag.from_dense(spd(rng, 12))
    D = M.scaled(1.5)
    xi, g = rng.normal(size=12), rng.normal(size=12)
    a = M.solve(-g - D @ xi)
    L = 3.0
    dt = max_stable_dt(xi, xi + 0.01 * a, a, g, M, D, L)
    assert dt > 0
    # with dt below the closed-form bound the energy-change bound is non-positive
    small = min(dt, 0.01)
    assert energy_change_bound(small, xi, xi + small * a, a, g, M, D, L) <= 0


def test_safeguard_needs_lipschitz(prob):
    p = DynParams(safeguard=True)
    with pytest.raises(ValueError, match="Lipschitz"):
        step(init_state(prob, p), p, prob)


def test_safeguarded_run_dissipates(prob):
    p = DynParams(m=0.7, d=2.0, dt=1.0, safeguard=True)
    M, _ = build_mass_damping(prob.hessian(prob.graph.poses), p, 1.0)
    L = estimate_lipschitz(Metric.CHORDAL, prob.graph, norm_matrix=M.dense())
    res = run(prob, p, 150, L=L, gtol=0)
    rep = energy_monitor(res.rows)
    assert rep.n_violations == 0
    assert res.rows[-1]["C"] < 0.05 * res.rows[0]["C"]


def test_damping_rate_in_continuous_limit(prob):
    errs = []
    for dt in (0.02, 0.01, 0.005, 0.0025):
        K = int(round(0.5 / dt))
        rows = run(prob, DynParams(m=1.0, d=2.0, dt=dt), K, gtol=0).rows
        rate = (rows[K]["E"] - rows[K - 1]["E"]) / dt
        errs.append(abs(rate / -rows[K - 1]["xiDxi"] - 1))
    assert errs[-1] < 0.05
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_noiseless_run_reaches_zero():
    sp = generate_grid_world(GridWorldSpec(robots=1, side=3, noise=NoiseSpec.zero(), seed=1))
    g = sp.graph.with_poses(sp.ground_truth @ exp_se3(
        np.random.default_rng(0).normal(scale=0.05, size=(sp.graph.n_vertices, 6))))
    prob = CentralizedProblem(g, Metric.GEODESIC)
    res = run(prob, DynParams(m=1.0, d=4.0, dt=1.0, mass_mode=MassMode.STATE), 1500)
    assert res.converged
    assert res.rows[-1]["grad_inf"] <= 1e-9
    assert res.rows[-1]["C"] <= 1e-9


def test_state_mass_tracks_hessian(prob):
    p = DynParams(m=0.7, d=2.0, dt=0.3, mass_mode="state")
    s0 = init_state(prob, p)
    s1, _ = step(s0, p, prob)
    np.testing.assert_allclose(s1.H.dense(), prob.hessian(s1.X).dense())
    assert s1.H_prev is s0.H


def test_divergence_surfaces_as_integration_error(prob):
    p = DynParams(m=0.01, d=0.0 + 1e-9, eps_d=1e-9, dt=50.0)
    with pytest.raises(IntegrationError), np.errstate(all="ignore"):
        run(prob, p, 200, gtol=0)


def test_trajectory_roundtrip(tmp_path, prob):
    rows = run(prob, DynParams(m=1.0, d=2.0, dt=0.2), 5).rows
    write_trajectory(rows, tmp_path / "t.csv")
    back = read_trajectory(tmp_path / "t.csv")
    assert len(back) == len(rows)
    for r, b in zip(rows, back):
        assert b["C"] == r["C"] and b["E"] == r["E"]


def test_kinetic_energy(rng):
    M = BlockDiag.from_dense(spd(rng, 6))
    xi = rng.normal(size=6)
    assert kinetic_energy(xi, M) == pytest.approx(0.5 * xi @ M.dense() @ xi)


def test_params_validation():
    with pytest.raises(ValueError):
        DynParams(m=0.0)
    assert DynParams(mass_mode="state").mass_mode is MassMode.STATE
    assert DynParams().damping_coef(2.0) == pytest.approx(1.0 + 0.01)
