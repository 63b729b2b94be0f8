import numpy as np
import pytest
from hypothesis import given, strategies as st

from cord.graph import GridWorldSpec, NoiseSpec, generate_grid_world, generate_random_graph
from cord.lie import Pose, exp_se3
from cord.objective import (Metric, MissingNeighborError, RobotView, edge_cost,
                            estimate_lipschitz, full_gradient, gradient, hessian_block,
                            pullback_cost, residual, total_cost)

METRICS = list(Metric)


def fd_gradient(metric, graph, X, h=1e-6):
    n = 6 * graph.n_vertices
    g = np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        g[i] = (pullback_cost(metric, graph, X, e) - pullback_cost(metric, graph, X, -e)) / (2 * h)
    return g


@pytest.mark.parametrize("metric", METRICS)
@given(seed=st.integers(0, 10_000))
def test_gradient_matches_differences(metric, seed):
    sp = generate_random_graph(n_poses=6, n_loops=3, seed=seed)
    X = sp.graph.poses @ exp_se3(np.random.default_rng(seed).normal(scale=0.2, size=(6, 6)))
    g = full_gradient(metric, sp.graph, X, anchor=None)
    gn = fd_gradient(metric, sp.graph, X)
    assert np.linalg.norm(g - gn) <= 1e-5 * max(1.0, np.linalg.norm(gn))


def test_cost_matches_edge_sum(small_random):
    g = small_random.graph
    for m in METRICS:
        direct = sum(edge_cost(m, e, g.poses[g.eu[k]], g.poses[g.ev[k]])
                     for k, e in enumerate(g.edges))
        assert total_cost(m, g) == pytest.approx(direct, rel=1e-12)


def test_residual_shapes():
    X = exp_se3(np.array([0.1, 0, 0, 1, 0, 0]))
    assert residual(Metric.GEODESIC, X, X, Pose.identity()).shape == (6,)
    r = residual(Metric.CHORDAL, X, X, Pose.identity())
    assert r.shape == (3, 4) and np.allclose(r, 0)


@pytest.mark.parametrize("metric", METRICS)
def test_hessian_is_exact_at_zero_residual(metric):
    # with zero residuals the Gauss-Newton matrix is the true Hessian of the pullback
    sp = generate_grid_world(GridWorldSpec(robots=1, side=2, noise=NoiseSpec.zero(), seed=0))
    g, X = sp.graph, sp.ground_truth
    view = RobotView.build(g, None, anchor=0)
    H = view.hessian(metric, X, lam=0.0)
    n, h = 6 * g.n_vertices, 1e-6
    Hn = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        Hn[:, i] = (full_gradient(metric, g, X @ exp_se3(e.reshape(-1, 6)), anchor=None)
                    - full_gradient(metric, g, X @ exp_se3(-e.reshape(-1, 6)), anchor=None)) / (2 * h)
    free = slice(6, n)
    np.testing.assert_allclose(H[free, free], 0.5 * (Hn + Hn.T)[free, free], atol=1e-5 * np.abs(Hn).max())
    np.testing.assert_array_equal(H[:6, :6], np.eye(6))
    assert np.all(H[:6, 6:] == 0)


def test_hessian_properties(small_random):
    g = small_random.graph
    view = RobotView.build(g, None, anchor=0)
    for m in METRICS:
        H = view.hessian(m, g.poses)
        np.testing.assert_allclose(H, H.T, atol=0)
        assert np.linalg.eigvalsh(H).min() > 0
        Hs = view.hessian(m, g.poses, sparse_out=True).toarray()
        np.testing.assert_allclose(Hs, H, atol=1e-12)


def test_robot_gradients_assemble_to_full(small_random):
    g, P = small_random.graph, small_random.partition
    X = g.poses
    for m in METRICS:
        full = full_gradient(m, g, X, anchor=P.anchor).reshape(-1, 6)
        for r in range(P.n_robots):
            view = RobotView.build(g, P, r)
            nbr = {int(k): X[int(k)] for k in view.nbr}
            gr = gradient(m, g, P, r, X[view.own], nbr).reshape(-1, 6)
            np.testing.assert_allclose(gr, full[view.own], atol=1e-10)
            Hr = hessian_block(m, g, P, r, X[view.own], X[view.nbr])
            assert Hr.shape == (6 * len(view.own),) * 2


def test_missing_neighbor_is_reported(small_random):
    g, P = small_random.graph, small_random.partition
    view = RobotView.build(g, P, 1)
    with pytest.raises(MissingNeighborError, match="neighbor vertex row"):
        view.gradient(Metric.CHORDAL, g.poses[view.own], {})
    with pytest.raises(MissingNeighborError):
        view.gradient(Metric.CHORDAL, g.poses[view.own], None)


def test_lipschitz_bounds_sampled_curvature(small_random):
    g = small_random.graph
    L = estimate_lipschitz(Metric.CHORDAL, g, seed=1)
    rng = np.random.default_rng(2)
    g0 = full_gradient(Metric.CHORDAL, g, anchor=0)
    c0 = total_cost(Metric.CHORDAL, g)
    for _ in range(30):
        eta = rng.normal(size=g0.shape)
        eta[:6] = 0
        eta *= 0.1 / np.linalg.norm(eta)
        assert pullback_cost(Metric.CHORDAL, g, g.poses, eta) <= c0 + g0 @ eta + 0.5 * L * eta @ eta
