import numpy as np
import pytest

from cord.graph import (Edge, GraphError, GridWorldSpec, NoiseSpec, PoseGraph,
                        generate_grid_world, generate_random_graph, load_g2o,
                        partition_contiguous, read_kv_file, write_g2o)
from cord.lie import Pose, exp_se3
from cord.objective import Metric, total_cost

VERTEX = "VERTEX_SE3:QUAT {} 0 0 0 0 0 0 1\n"
INFO_UPPER = "1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 {} 0 0 {} 0 {}"


def _edge_line(u, v, x=1.0, rot_info=(4, 4, 4)):
    return (f"EDGE_SE3:QUAT {u} {v} {x} 0 0 0 0 0 1 "
            + INFO_UPPER.format(*rot_info) + "\n")


def test_g2o_roundtrip(tmp_path, small_random):
    g = small_random.graph
    p = tmp_path / "g.g2o"
    write_g2o(g, p)
    h = load_g2o(p)
    np.testing.assert_array_equal(h.ids, g.ids)
    np.testing.assert_allclose(h.poses.matrix(), g.poses.matrix(), atol=1e-12)
    np.testing.assert_allclose(h.info, g.info, atol=1e-9)
    for m in Metric:
        assert total_cost(m, h) == pytest.approx(total_cost(m, g), rel=1e-10)


def test_g2o_information_order(tmp_path):
    # translation-first file: rotation diagonal is the last three upper entries
    p = tmp_path / "a.g2o"
    p.write_text(VERTEX.format(0) + VERTEX.format(1) + _edge_line(0, 1, rot_info=(7, 8, 9)))
    g = load_g2o(p)
    np.testing.assert_allclose(np.diag(g.info[0]), [7, 8, 9, 1, 1, 1])
    g2 = load_g2o(p, rotation_first=True)
    np.testing.assert_allclose(np.diag(g2.info[0]), [1, 1, 1, 7, 8, 9])
    assert g.w_rot[0] == pytest.approx(8.0) and g.w_trans[0] == pytest.approx(1.0)


def test_g2o_errors(tmp_path):
    p = tmp_path / "bad.g2o"
    p.write_text(VERTEX.format(0) + "EDGE_SE3:QUAT 0 1 1 2 3\n")
    with pytest.raises(GraphError, match="line 2"):
        load_g2o(p)
    p.write_text(VERTEX.format(0) + VERTEX.format(1))
    with pytest.raises(GraphError, match="no edges"):
        load_g2o(p)
    p.write_text(VERTEX.format(0) + VERTEX.format(1) + VERTEX.format(2) + _edge_line(0, 1))
    with pytest.raises(GraphError, match="disconnected"):
        load_g2o(p)
    p.write_text(VERTEX.format(0) + VERTEX.format(1) + _edge_line(0, 1, rot_info=(1, -1, 1)))
    with pytest.raises(GraphError, match="positive-definite"):
        load_g2o(p)
    p.write_text(VERTEX.format(0) + VERTEX.format(0) + _edge_line(0, 1))
    with pytest.raises(GraphError, match="duplicate"):
        load_g2o(p)


def test_g2o_skips_unknown_tags(tmp_path):
    p = tmp_path / "x.g2o"
    p.write_text("FIX 0\n" + VERTEX.format(0) + VERTEX.format(1) + _edge_line(0, 1))
    assert load_g2o(p).n_edges == 1


def test_build_rejects_self_loop():
    I = Pose.identity()
    with pytest.raises(GraphError, match="self-loop"):
        PoseGraph.build({0: I}, [Edge(0, 0, I, np.eye(6), 1.0, 1.0)])


def test_partition_contiguous(small_random):
    g = small_random.graph
    P = partition_contiguous(g, 5)
    sizes = [len(P.owned(r)) for r in range(5)]
    assert sum(sizes) == g.n_vertices and max(sizes) - min(sizes) <= 1
    for i in range(5):
        for j in P.neighbors(i):
            assert i in P.neighbors(j)
            np.testing.assert_array_equal(P.inter[i][j], P.inter[j][i])
    inter = P.inter_edges()
    assert np.all(P.robot_of[g.eu[inter]] != P.robot_of[g.ev[inter]])
    assert P.anchor == 0
    with pytest.raises(GraphError):
        partition_contiguous(g, 0)


def test_grid_world_shape_and_determinism():
    a = generate_grid_world(robots=4, side=5, seed=11)
    b = generate_grid_world(robots=4, side=5, seed=11)
    assert a.graph.n_vertices == 500
    assert [len(a.partition.owned(r)) for r in range(4)] == [125] * 4
    np.testing.assert_array_equal(a.graph.eu, b.graph.eu)
    np.testing.assert_array_equal(a.graph.meas.t, b.graph.meas.t)
    assert a.partition.inter_edges().size > 0
    assert a.graph.is_connected()


def test_noiseless_grid_world_is_exact_at_ground_truth():
    sp = generate_grid_world(GridWorldSpec(robots=2, side=3, noise=NoiseSpec.zero(), seed=2))
    for m in Metric:
        assert total_cost(m, sp.graph, sp.ground_truth) < 1e-20
    # odometry chaining without noise reproduces the truth
    np.testing.assert_allclose(sp.graph.poses.t, sp.ground_truth.t, atol=1e-12)


def test_grid_spec_from_mapping(tmp_path):
    p = tmp_path / "g.cfg"
    p.write_text("robots = 2  # two\nside=3\nintra_trans = 0.1:0.2\n")
    spec = GridWorldSpec.from_mapping(read_kv_file(p))
    assert (spec.robots, spec.side, spec.noise.intra_trans) == (2, 3, (0.1, 0.2))
    with pytest.raises(KeyError):
        GridWorldSpec.from_mapping({"bogus": "1"})


def test_random_graph():
    sp = generate_random_graph(n_poses=15, n_loops=5, n_robots=3, seed=1)
    assert sp.graph.n_vertices == 15 and sp.graph.n_edges == 14 + 5
    assert sp.partition.n_robots == 3
    np.testing.assert_allclose(sp.graph.poses[0].matrix(), sp.ground_truth[0].matrix())
    assert sp.graph.poses.is_valid()


def test_with_poses_keeps_structure(small_random):
    g = small_random.graph
    h = g.with_poses(g.poses @ exp_se3(np.full((g.n_vertices, 6), 0.01)))
    assert h.n_edges == g.n_edges and h.poses is not g.poses
