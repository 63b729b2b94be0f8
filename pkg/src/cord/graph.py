"""Pose-graph data model, g2o I/O, robot partitioning and synthetic scenarios."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from .lie import Pose, exp_so3, orthonormalize

log = logging.getLogger(__name__)

# g2o stores information over (x, y, z, qx, qy, qz); internally we use (omega, v)
_G2O_TO_INTERNAL = np.array([3, 4, 5, 0, 1, 2])


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    measurement: Pose
    info: np.ndarray  # 6x6, (omega, v) ordering
    w_rot: float
    w_trans: float


@dataclass
class PoseGraph:
    """Vertices sorted by id plus directed relative-pose edges.

    ``poses`` holds the current (initial) estimate as a batched :class:`Pose`.
    Edge endpoints are stored both as ids and as row indices into ``poses``.
    """

    ids: np.ndarray
    poses: Pose
    eu: np.ndarray
    ev: np.ndarray
    meas: Pose
    info: np.ndarray
    w_rot: np.ndarray
    w_trans: np.ndarray

    @classmethod
    def build(cls, vertices: dict[int, Pose], edges: list[Edge],
              check_connected: bool = True) -> "PoseGraph":
        if not vertices:
            raise GraphError("graph has no vertices")
        ids = np.array(sorted(vertices), dtype=int)
        index = {int(i): k for k, i in enumerate(ids)}
        R = np.stack([vertices[int(i)].R for i in ids])
        t = np.stack([vertices[int(i)].t for i in ids])
        eu, ev = [], []
        for e in edges:
            if e.u == e.v:
                raise GraphError(f"self-loop on vertex {e.u}")
            if e.u not in index or e.v not in index:
                raise GraphError(f"edge ({e.u}, {e.v}) references a missing vertex")
            info = np.asarray(e.info, dtype=float)
            if np.abs(info - info.T).max() > 1e-9:
                raise GraphError(f"edge ({e.u}, {e.v}) information is not symmetric")
            try:
                np.linalg.cholesky(info)
            except np.linalg.LinAlgError:
                raise GraphError(f"edge ({e.u}, {e.v}) information is not positive-definite") from None
            if not (e.w_rot > 0 and e.w_trans > 0):
                raise GraphError(f"edge ({e.u}, {e.v}) has non-positive chordal weights")
            eu.append(index[e.u])
            ev.append(index[e.v])
        m = len(edges)
        g = cls(
            ids=ids,
            poses=Pose(R, t),
            eu=np.array(eu, dtype=int),
            ev=np.array(ev, dtype=int),
            meas=Pose(np.stack([e.measurement.R for e in edges]) if m else np.zeros((0, 3, 3)),
                      np.stack([e.measurement.t for e in edges]) if m else np.zeros((0, 3))),
            info=np.stack([0.5 * (e.info + e.info.T) for e in edges]) if m else np.zeros((0, 6, 6)),
            w_rot=np.array([e.w_rot for e in edges], dtype=float),
            w_trans=np.array([e.w_trans for e in edges], dtype=float),
        )
        if check_connected and not g.is_connected():
            raise GraphError("pose graph is disconnected")
        return g

    @property
    def n_vertices(self) -> int:
        return len(self.ids)

    @property
    def n_edges(self) -> int:
        return len(self.eu)

    def edge(self, k: int) -> Edge:
        return Edge(int(self.ids[self.eu[k]]), int(self.ids[self.ev[k]]), self.meas[k],
                    self.info[k], float(self.w_rot[k]), float(self.w_trans[k]))

    @property
    def edges(self) -> list[Edge]:
        return [self.edge(k) for k in range(self.n_edges)]

    def is_connected(self) -> bool:
        n = self.n_vertices
        if n <= 1:
            return True
        adj = coo_matrix((np.ones(self.n_edges), (self.eu, self.ev)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1

    @cached_property
    def sqrt_info(self) -> np.ndarray:
        """Per-edge ``S`` with ``S^T S = info``."""
        return np.swapaxes(np.linalg.cholesky(self.info), -1, -2)

    def with_poses(self, poses: Pose) -> "PoseGraph":
        g = PoseGraph(self.ids, poses, self.eu, self.ev, self.meas, self.info,
                      self.w_rot, self.w_trans)
        if "sqrt_info" in self.__dict__:
            g.__dict__["sqrt_info"] = self.__dict__["sqrt_info"]
        return g


def chordal_weights(info: np.ndarray) -> tuple[float, float]:
    """Scalar chordal weights from a 6x6 information matrix in (omega, v) order."""
    d = np.diag(info)
    return float(d[:3].mean()), float(d[3:].mean())


# --------------------------------------------------------------------------- g2o


def _quat_to_R(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("zero quaternion")
    return Rotation.from_quat(q / n).as_matrix()


def _info_from_upper(vals, rotation_first: bool) -> np.ndarray:
    I = np.zeros((6, 6))
    iu = np.triu_indices(6)
    I[iu] = vals
    I = I + np.triu(I, 1).T
    if rotation_first:
        return I
    return I[np.ix_(_G2O_TO_INTERNAL, _G2O_TO_INTERNAL)]


def load_g2o(path, rotation_first: bool = False) -> PoseGraph:
    """Read ``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` records.

    ``rotation_first`` declares that the information blocks are stored
    rotation-first instead of the standard translation-first order.
    """
    vertices: dict[int, Pose] = {}
    edges: list[Edge] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            tag = tok[0]
            try:
                if tag == "VERTEX_SE3:QUAT":
                    if len(tok) != 9:
                        raise ValueError(f"expected 9 fields, got {len(tok)}")
                    vid = int(tok[1])
                    x = [float(s) for s in tok[2:9]]
                    if vid in vertices:
                        raise GraphError(f"line {lineno}: duplicate vertex id {vid}")
                    vertices[vid] = Pose(_quat_to_R(x[3:7]), np.array(x[:3]))
                elif tag == "EDGE_SE3:QUAT":
                    if len(tok) != 31:
                        raise ValueError(f"expected 31 fields, got {len(tok)}")
                    u, v = int(tok[1]), int(tok[2])
                    x = [float(s) for s in tok[3:10]]
                    info = _info_from_upper([float(s) for s in tok[10:31]], rotation_first)
                    wr, wt = chordal_weights(info)
                    edges.append(Edge(u, v, Pose(_quat_to_R(x[3:7]), np.array(x[:3])), info, wr, wt))
                else:
                    log.warning("line %d: skipping unknown tag %s", lineno, tag)
            except GraphError:
                raise
            except ValueError as exc:
                raise GraphError(f"line {lineno}: malformed record: {exc}") from None
    if len(vertices) > 1 and not edges:
        raise GraphError("disconnected/trivial graph: several vertices and no edges")
    return PoseGraph.build(vertices, edges)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_g2o(graph: PoseGraph, path, rotation_first: bool = False) -> None:
    inv = np.argsort(_G2O_TO_INTERNAL)
    with open(path, "w") as fh:
        for k, vid in enumerate(graph.ids):
            q = Rotation.from_matrix(graph.poses.R[k]).as_quat()
            vals = list(graph.poses.t[k]) + list(q)
            fh.write(f"VERTEX_SE3:QUAT {int(vid)} " + " ".join(map(_fmt, vals)) + "\n")
        iu = np.triu_indices(6)
        for k in range(graph.n_edges):
            q = Rotation.from_matrix(graph.meas.R[k]).as_quat()
            info = graph.info[k] if rotation_first else graph.info[k][np.ix_(inv, inv)]
            vals = list(graph.meas.t[k]) + list(q) + list(info[iu])
            fh.write(f"EDGE_SE3:QUAT {int(graph.ids[graph.eu[k]])} {int(graph.ids[graph.ev[k]])} "
                     + " ".join(map(_fmt, vals)) + "\n")


# ---------------------------------------------------------------------- partition


@dataclass
class Partition:
    """Assignment of vertex rows to robots and the induced edge classification."""

    robot_of: np.ndarray
    n_robots: int
    intra: list[np.ndarray] = field(default_factory=list)
    inter: list[dict[int, np.ndarray]] = field(default_factory=list)

    @classmethod
    def from_assignment(cls, graph: PoseGraph, robot_of) -> "Partition":
        robot_of = np.asarray(robot_of, dtype=int)
        if robot_of.shape != (graph.n_vertices,):
            raise GraphError("assignment must cover every vertex exactly once")
        n_robots = int(robot_of.max()) + 1
        ru, rv = robot_of[graph.eu], robot_of[graph.ev]
        intra = [np.flatnonzero((ru == r) & (rv == r)) for r in range(n_robots)]
        inter: list[dict[int, np.ndarray]] = []
        for r in range(n_robots):
            mine = np.flatnonzero((ru != rv) & ((ru == r) | (rv == r)))
            other = np.where(ru[mine] == r, rv[mine], ru[mine])
            inter.append({int(j): mine[other == j] for j in np.unique(other)})
        return cls(robot_of, n_robots, intra, inter)

    def owned(self, r: int) -> np.ndarray:
        return np.flatnonzero(self.robot_of == r)

    def neighbors(self, r: int) -> list[int]:
        return sorted(self.inter[r])

    def inter_edges(self) -> np.ndarray:
        allv = [e for d in self.inter for e in d.values()]
        return np.unique(np.concatenate(allv)) if allv else np.zeros(0, dtype=int)

    @property
    def anchor(self) -> int:
        """Row of the gauge-fixing vertex: the first vertex of robot 0."""
        return int(self.owned(0)[0])

    def neighbor_pairs(self) -> list[tuple[int, int]]:
        return sorted({(min(i, j), max(i, j)) for i in range(self.n_robots) for j in self.inter[i]})


def partition_contiguous(graph: PoseGraph, n_robots: int) -> Partition:
    """Split vertices (sorted by id) into ``n_robots`` near-equal contiguous blocks."""
    n = graph.n_vertices
    if not 1 <= n_robots <= n:
        raise GraphError(f"robot count {n_robots} must lie in [1, {n}]")
    base, extra = divmod(n, n_robots)
    sizes = [base + (1 if r < extra else 0) for r in range(n_robots)]
    robot_of = np.repeat(np.arange(n_robots), sizes)
    return Partition.from_assignment(graph, robot_of)


# ---------------------------------------------------------------------- synthetic


@dataclass
class NoiseSpec:
    """Per-edge standard deviations, sampled uniformly from the given ranges.

    A zero range produces an uncorrupted measurement with unit information in
    that component.
    """

    intra_trans: tuple[float, float] = (0.05, 0.15)
    intra_rot_deg: tuple[float, float] = (1.0, 3.0)
    inter_trans: tuple[float, float] = (0.10, 0.30)
    inter_rot_deg: tuple[float, float] = (3.0, 10.0)

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


@dataclass
class GridWorldSpec:
    robots: int = 4
    side: int = 5
    spacing: float = 1.0
    loop_radius: float = 1.4
    p_intra: float = 0.2
    p_inter: float = 0.3
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "GridWorldSpec":
        spec = cls()
        noise = NoiseSpec()
        for key, raw in kv.items():
            key = key.strip().replace("-", "_")
            if key in {"robots", "side", "seed"}:
                setattr(spec, key, int(raw))
            elif key in {"spacing", "loop_radius", "p_intra", "p_inter"}:
                setattr(spec, key, float(raw))
            elif key in {f.name for f in fields(NoiseSpec)}:
                lo, hi = (float(s) for s in raw.replace(",", ":").split(":"))
                setattr(noise, key, (lo, hi))
            else:
                raise KeyError(f"unknown grid-world key {key!r}")
        spec.noise = noise
        return spec


@dataclass
class SyntheticProblem:
    graph: PoseGraph        # poses hold the initial guess
    partition: Partition
    ground_truth: Pose


def read_kv_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _serpentine(side: int) -> np.ndarray:
    pts, row = [], 0
    for z in range(side):
        ys = range(side) if z % 2 == 0 else reversed(range(side))
        for y in ys:
            xs = range(side) if row % 2 == 0 else reversed(range(side))
            pts.extend((x, y, z) for x in xs)
            row += 1
    return np.array(pts, dtype=float)


def _look_along(d: np.ndarray) -> np.ndarray:
    x = d / np.linalg.norm(d)
    up = np.array([0.0, 0.0, 1.0]) if abs(x[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    y = np.cross(up, x)
    y /= np.linalg.norm(y)
    return np.column_stack([x, y, np.cross(x, y)])


def _sample_noise(rng, trans_rng, rot_rng_deg):
    st = rng.uniform(*trans_rng)
    sr = math.radians(rng.uniform(*rot_rng_deg))
    dR = exp_so3(sr * rng.standard_normal(3)) if sr > 0 else np.eye(3)
    dt = st * rng.standard_normal(3) if st > 0 else np.zeros(3)
    info = np.diag([1 / sr**2 if sr > 0 else 1.0] * 3 + [1 / st**2 if st > 0 else 1.0] * 3)
    return dR, dt, info


def _measure(gt: Pose, u: int, v: int, rng, trans_rng, rot_rng_deg) -> Edge:
    rel = gt[u].inverse() @ gt[v]
    dR, dt, info = _sample_noise(rng, trans_rng, rot_rng_deg)
    meas = Pose(rel.R @ dR, rel.t + dt)
    wr, wt = chordal_weights(info)
    return Edge(u, v, meas, info, wr, wt)


def _odometry_init(gt: Pose, edges: list[Edge], chains: list[np.ndarray]) -> Pose:
    odo = {(e.u, e.v): e.measurement for e in edges}
    R = gt.R.copy()
    t = gt.t.copy()
    for chain in chains:
        cur = gt[int(chain[0])]
        for a, b in zip(chain[:-1], chain[1:]):
            cur = cur @ odo[(int(a), int(b))]
            R[b], t[b] = cur.R, cur.t
    return Pose(R, t)


def generate_grid_world(spec: GridWorldSpec | None = None, **overrides) -> SyntheticProblem:
    """Robots each tracing a serpentine ``side^3`` lattice, placed in a planar grid.

    Odometry links consecutive nodes; loop closures are drawn between node pairs
    within ``loop_radius``. The initial guess chains each robot's odometry from
    its true first pose.
    """
    spec = spec or GridWorldSpec()
    for k, v in overrides.items():
        setattr(spec, k, v)
    rng = np.random.default_rng(spec.seed)
    path = _serpentine(spec.side) * spec.spacing
    n_per = len(path)
    cols = math.ceil(math.sqrt(spec.robots))
    pos, rots, robot_of = [], [], []
    for r in range(spec.robots):
        offset = np.array([r % cols, r // cols, 0.0]) * spec.side * spec.spacing
        for k in range(n_per):
            d = path[k + 1] - path[k] if k + 1 < n_per else path[k] - path[k - 1]
            rots.append(_look_along(d))
            pos.append(path[k] + offset)
            robot_of.append(r)
    gt = Pose(np.array(rots), np.array(pos))
    robot_of = np.array(robot_of)
    noise = spec.noise

    edges: list[Edge] = []
    chains = []
    for r in range(spec.robots):
        ids = np.arange(r * n_per, (r + 1) * n_per)
        chains.append(ids)
        for a, b in zip(ids[:-1], ids[1:]):
            edges.append(_measure(gt, int(a), int(b), rng, noise.intra_trans, noise.intra_rot_deg))
    n = len(gt)
    dist = np.linalg.norm(gt.t[:, None, :] - gt.t[None, :, :], axis=-1)
    for u in range(n):
        for v in range(u + 1, n):
            if dist[u, v] > spec.loop_radius:
                continue
            same = robot_of[u] == robot_of[v]
            if same and v == u + 1:
                continue
            if rng.random() < (spec.p_intra if same else spec.p_inter):
                if same:
                    edges.append(_measure(gt, u, v, rng, noise.intra_trans, noise.intra_rot_deg))
                else:
                    edges.append(_measure(gt, u, v, rng, noise.inter_trans, noise.inter_rot_deg))

    init = _odometry_init(gt, edges, chains)
    vertices = {k: init[k] for k in range(n)}
    graph = PoseGraph.build(vertices, edges, check_connected=spec.robots == 1 or spec.p_inter > 0)
    return SyntheticProblem(graph, Partition.from_assignment(graph, robot_of), gt)


def generate_random_graph(n_poses: int = 20, n_loops: int = 10, n_robots: int = 1,
                          trans_sigma: float = 0.05, rot_sigma_deg: float = 2.0,
                          init_trans: float = 0.2, init_rot_deg: float = 5.0,
                          seed: int = 0) -> SyntheticProblem:
    """Random-walk trajectory with odometry plus random loop closures.

    The initial guess is the ground truth perturbed on the right by a random
    twist of the given magnitudes (the first pose is left exact).
    """
    rng = np.random.default_rng(seed)
    R = [np.eye(3)]
    t = [np.zeros(3)]
    for _ in range(n_poses - 1):
        step = Pose(exp_so3(rng.normal(scale=0.3, size=3)), rng.normal(size=3) + np.array([1.0, 0, 0]))
        cur = Pose(R[-1], t[-1]) @ step
        R.append(cur.R)
        t.append(cur.t)
    gt = Pose(np.array(R), np.array(t))
    trange = (trans_sigma, trans_sigma)
    rrange = (rot_sigma_deg, rot_sigma_deg)
    edges = [_measure(gt, k, k + 1, rng, trange, rrange) for k in range(n_poses - 1)]
    seen = set()
    tries = 0
    while len(seen) < n_loops and tries < 100 * (n_loops + 1):
        tries += 1
        u, v = sorted(int(x) for x in rng.choice(n_poses, size=2, replace=False))
        if v == u + 1 or (u, v) in seen:
            continue
        seen.add((u, v))
        edges.append(_measure(gt, u, v, rng, trange, rrange))
    pert_R = exp_so3(rng.normal(scale=math.radians(init_rot_deg), size=(n_poses, 3)))
    pert_t = rng.normal(scale=init_trans, size=(n_poses, 3))
    pert_R[0] = np.eye(3)
    pert_t[0] = 0.0
    init = gt @ Pose(pert_R, pert_t)
    init = Pose(orthonormalize(init.R), init.t)
    graph = PoseGraph.build({k: init[k] for k in range(n_poses)}, edges)
    return SyntheticProblem(graph, partition_contiguous(graph, n_robots), gt)
