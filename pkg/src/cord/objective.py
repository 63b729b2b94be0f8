"""PGO costs (geodesic and chordal), body-frame gradients and LM Hessian blocks.

Both metrics are handled through whitened residuals ``e`` so that the edge cost
is ``|e|^2``, the gradient contribution is ``2 J^T e`` and the Gauss-Newton
Hessian contribution is ``2 J^T J``. Jacobians are taken with respect to right
(body-frame) perturbations ``X exp(eta^)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from enum import Enum
from typing import Callable, Mapping

import numpy as np
from scipy import sparse

from .graph import Partition, PoseGraph
from .lie import Pose, adjoint, exp_se3, log_se3, right_jacobian_inv, skew

_GEN = skew(np.eye(3))  # so(3) generators, shape (3, 3, 3)
_GEN_CAT = np.concatenate(list(_GEN), axis=1)  # [G_0 G_1 G_2], shape (3, 9)


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched ``A @ x`` for stacks of matrices and vectors."""
    return (A @ x[..., None])[..., 0]


def _mtv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (np.swapaxes(A, -1, -2) @ x[..., None])[..., 0]


class Metric(str, Enum):
    GEODESIC = "geodesic"
    CHORDAL = "chordal"


class MissingNeighborError(KeyError):
    pass


def residual(metric: Metric, Xu: Pose, Xv: Pose, Xuv: Pose) -> np.ndarray:
    """Geodesic: 6-vector ``log(Xuv^-1 Xu^-1 Xv)``. Chordal: 3x4 ``[R|t]`` of ``Xu Xuv - Xv``."""
    metric = Metric(metric)
    if metric is Metric.GEODESIC:
        return log_se3(Xuv.inverse() @ Xu.inverse() @ Xv)
    pred = Xu @ Xuv
    return np.concatenate([pred.R - Xv.R, (pred.t - Xv.t)[..., None]], axis=-1)


def _whitened_residual(metric, Xu, Xv, meas, sqrt_info, w_rot, w_trans):
    if metric is Metric.GEODESIC:
        r = log_se3(meas.inverse() @ Xu.inverse() @ Xv)
        return _mv(sqrt_info, r)
    pred = Xu @ meas
    eR = (pred.R - Xv.R).reshape(-1, 9) * np.sqrt(w_rot)[:, None]
    et = (pred.t - Xv.t) * np.sqrt(w_trans)[:, None]
    return np.concatenate([eR, et], axis=1)


def _linearize(metric, Xu, Xv, meas, sqrt_info, w_rot, w_trans):
    """Whitened residuals and Jacobians w.r.t. body perturbations of both ends."""
    m = len(Xu)
    if metric is Metric.GEODESIC:
        Z = meas.inverse() @ Xu.inverse() @ Xv
        r = log_se3(Z)
        Jri = right_jacobian_inv(r)
        Jv = Jri
        Ju = -Jri @ adjoint(Xv.inverse() @ Xu)
        e = _mv(sqrt_info, r)
        return e, sqrt_info @ Ju, sqrt_info @ Jv
    sr = np.sqrt(w_rot)[:, None, None]
    st = np.sqrt(w_trans)[:, None, None]
    pred = Xu @ meas
    e = np.concatenate([(pred.R - Xv.R).reshape(m, 9) * sr[:, :, 0],
                        (pred.t - Xv.t) * st[:, :, 0]], axis=1)
    Ju = np.zeros((m, 12, 6))
    Jv = np.zeros((m, 12, 6))
    # d(Ru [phi] Ruv) / d phi_k = Ru G_k Ruv
    RG = (Xu.R @ _GEN_CAT).reshape(m, 3, 3, 3)             # [e, a, k, c]
    dRu = (RG @ meas.R[:, None]).transpose(0, 1, 3, 2).reshape(m, 9, 3)
    dRv = -(Xv.R @ _GEN_CAT).reshape(m, 3, 3, 3).transpose(0, 1, 3, 2).reshape(m, 9, 3)
    Ju[:, :9, :3] = dRu * sr
    Jv[:, :9, :3] = dRv * sr
    Ju[:, 9:, :3] = -(Xu.R @ skew(meas.t)) * st
    Ju[:, 9:, 3:] = Xu.R * st
    Jv[:, 9:, 3:] = -Xv.R * st
    return e, Ju, Jv


def edge_cost(metric: Metric, edge, Xu: Pose, Xv: Pose) -> float:
    metric = Metric(metric)
    r = residual(metric, Xu, Xv, edge.measurement)
    if metric is Metric.GEODESIC:
        return float(r @ edge.info @ r)
    Om = np.diag([edge.w_rot] * 3 + [edge.w_trans])
    return float(np.trace(r @ Om @ r.T))


def total_cost(metric: Metric, graph: PoseGraph, X: Pose | None = None) -> float:
    metric = Metric(metric)
    X = graph.poses if X is None else X
    if graph.n_edges == 0:
        return 0.0
    e = _whitened_residual(metric, X[graph.eu], X[graph.ev], graph.meas,
                           graph.sqrt_info, graph.w_rot, graph.w_trans)
    return float(np.sum(e * e))


@dataclass
class RobotView:
    """Everything one robot needs to evaluate its share of the cost.

    Edges touching the robot are indexed into the stacked array
    ``[own poses; neighbor poses]``: rows ``< n_own`` are owned, the rest are
    neighbor poses (global rows listed in ``nbr``) treated as constants.
    """

    robot: int
    own: np.ndarray
    nbr: np.ndarray
    nbr_robot: np.ndarray
    edge_ids: np.ndarray
    a: np.ndarray
    b: np.ndarray
    meas: Pose
    sqrt_info: np.ndarray
    w_rot: np.ndarray
    w_trans: np.ndarray
    anchor: int | None

    @property
    def n_own(self) -> int:
        return len(self.own)

    @classmethod
    def build(cls, graph: PoseGraph, partition: Partition | None, robot: int = 0,
              anchor: int | None = None) -> "RobotView":
        """View of ``robot``; ``partition=None`` means one robot owning everything.

        ``anchor`` is the global row held fixed (defaults to the partition anchor).
        """
        if partition is None:
            robot_of = np.zeros(graph.n_vertices, dtype=int)
            anchor = 0 if anchor is None else anchor
        else:
            robot_of = partition.robot_of
            anchor = partition.anchor if anchor is None else anchor
        own = np.flatnonzero(robot_of == robot)
        ru, rv = robot_of[graph.eu], robot_of[graph.ev]
        edge_ids = np.flatnonzero((ru == robot) | (rv == robot))
        ends = np.concatenate([graph.eu[edge_ids], graph.ev[edge_ids]])
        nbr = np.unique(ends[robot_of[ends] != robot])
        rows = np.concatenate([own, nbr])
        local = {int(g): k for k, g in enumerate(rows)}
        a = np.array([local[int(g)] for g in graph.eu[edge_ids]], dtype=int)
        b = np.array([local[int(g)] for g in graph.ev[edge_ids]], dtype=int)
        anchor_local = local.get(int(anchor)) if robot_of[anchor] == robot else None
        return cls(robot, own, nbr, robot_of[nbr], edge_ids, a, b, graph.meas[edge_ids],
                   graph.sqrt_info[edge_ids], graph.w_rot[edge_ids],
                   graph.w_trans[edge_ids], anchor_local)

    def _stack(self, X_own: Pose, X_nbr) -> Pose:
        if isinstance(X_nbr, Mapping):
            missing = {int(g) for g in self.nbr if int(g) not in X_nbr}
            if missing:
                rows = np.concatenate([self.own, self.nbr])
                k = next(k for k in range(len(self.a))
                         if int(rows[self.a[k]]) in missing or int(rows[self.b[k]]) in missing)
                u, v = int(rows[self.a[k]]), int(rows[self.b[k]])
                raise MissingNeighborError(
                    f"robot {self.robot}: edge #{int(self.edge_ids[k])} ({u} -> {v}) "
                    f"needs a pose for neighbor vertex row {min(missing & {u, v})}")
            X_nbr = Pose(np.array([X_nbr[int(g)].R for g in self.nbr]).reshape(-1, 3, 3),
                         np.array([X_nbr[int(g)].t for g in self.nbr]).reshape(-1, 3))
        if X_nbr is None:
            if len(self.nbr):
                raise MissingNeighborError(f"robot {self.robot}: neighbor poses required")
            return X_own
        if len(X_nbr) != len(self.nbr):
            raise MissingNeighborError(
                f"robot {self.robot}: expected {len(self.nbr)} neighbor poses, got {len(X_nbr)}")
        return Pose(np.concatenate([X_own.R, X_nbr.R]), np.concatenate([X_own.t, X_nbr.t]))

    def local_cost(self, metric: Metric, X_own: Pose, X_nbr=None) -> float:
        X = self._stack(X_own, X_nbr)
        e = _whitened_residual(Metric(metric), X[self.a], X[self.b], self.meas,
                               self.sqrt_info, self.w_rot, self.w_trans)
        return float(np.sum(e * e))

    def linearize(self, metric: Metric, X_own: Pose, X_nbr=None):
        X = self._stack(X_own, X_nbr)
        return _linearize(Metric(metric), X[self.a], X[self.b], self.meas,
                          self.sqrt_info, self.w_rot, self.w_trans)

    @cached_property
    def _scatter_a(self) -> sparse.csr_matrix:
        return self._scatter(self.a)

    @cached_property
    def _scatter_b(self) -> sparse.csr_matrix:
        return self._scatter(self.b)

    def _scatter(self, idx: np.ndarray) -> sparse.csr_matrix:
        # sums per-edge rows into owned pose rows; neighbor rows are dropped
        keep = np.flatnonzero(idx < self.n_own)
        return sparse.csr_matrix((np.ones(len(keep)), (idx[keep], keep)),
                                 shape=(self.n_own, len(idx)))

    def gradient_from(self, e, Ja, Jb) -> np.ndarray:
        g = 2.0 * (self._scatter_a @ _mtv(Ja, e) + self._scatter_b @ _mtv(Jb, e))
        if self.anchor is not None:
            g[self.anchor] = 0.0
        return g.reshape(-1)

    def gradient(self, metric: Metric, X_own: Pose, X_nbr=None) -> np.ndarray:
        return self.gradient_from(*self.linearize(metric, X_own, X_nbr))

    def hessian_from(self, Ja, Jb, lam: float | None = None, lam_rel: float = 1e-6,
                     sparse_out: bool = False):
        """LM block ``2 J^T J + lam I`` over owned poses; the anchor block is the identity.

        ``lam=None`` uses ``lam_rel`` times the mean diagonal.
        """
        n = self.n_own
        oa, ob = self.a < n, self.b < n
        both = oa & ob
        JaT = np.swapaxes(Ja, -1, -2)
        Haa = 2.0 * (JaT @ Ja)
        Hbb = 2.0 * (np.swapaxes(Jb, -1, -2) @ Jb)
        Hab = 2.0 * (JaT @ Jb)
        Haa = 0.5 * (Haa + np.swapaxes(Haa, -1, -2))
        Hbb = 0.5 * (Hbb + np.swapaxes(Hbb, -1, -2))
        blocks = [Haa[oa], Hbb[ob], Hab[both], np.swapaxes(Hab[both], -1, -2)]
        brow = [self.a[oa], self.b[ob], self.a[both], self.b[both]]
        bcol = [self.a[oa], self.b[ob], self.b[both], self.a[both]]
        vals = np.concatenate(blocks)
        br, bc = np.concatenate(brow), np.concatenate(bcol)
        ii = np.arange(6)
        rows = (6 * br[:, None, None] + ii[None, :, None]) + 0 * ii[None, None, :]
        cols = (6 * bc[:, None, None] + ii[None, None, :]) + 0 * ii[None, :, None]
        if self.anchor is not None:
            keep = (br != self.anchor) & (bc != self.anchor)
            vals, rows, cols = vals[keep], rows[keep], cols[keep]
        H = sparse.coo_matrix((vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
                              shape=(6 * n, 6 * n)).tocsr()
        diag = H.diagonal()
        if lam is None:
            lam = lam_rel * float(np.mean(diag)) if n else 0.0
        shift = np.full(6 * n, lam)
        if self.anchor is not None:
            shift[6 * self.anchor: 6 * self.anchor + 6] = 1.0
        H = (H + sparse.diags(shift, format="csr")).tocsr()
        H.sum_duplicates()
        H.sort_indices()
        return H if sparse_out else H.toarray()

    def hessian(self, metric: Metric, X_own: Pose, X_nbr=None, lam: float | None = None,
                sparse_out: bool = False):
        _, Ja, Jb = self.linearize(metric, X_own, X_nbr)
        return self.hessian_from(Ja, Jb, lam, sparse_out=sparse_out)


def full_gradient(metric: Metric, graph: PoseGraph, X: Pose | None = None,
                  anchor: int | None = 0) -> np.ndarray:
    """Stacked body-frame gradient of the total cost; ``anchor=None`` leaves every block free."""
    X = graph.poses if X is None else X
    view = RobotView.build(graph, None, anchor=0 if anchor is None else anchor)
    if anchor is None:
        view.anchor = None
    return view.gradient(metric, X)


def gradient(metric: Metric, graph: PoseGraph, partition: Partition, robot: int,
             X_own: Pose, X_neighbors) -> np.ndarray:
    """Gradient block of ``robot`` with neighbor poses held fixed.

    ``X_neighbors`` maps global vertex rows to poses, or is a batched Pose
    ordered like ``RobotView.build(...).nbr``.
    """
    return RobotView.build(graph, partition, robot).gradient(metric, X_own, X_neighbors)


def hessian_block(metric: Metric, graph: PoseGraph, partition: Partition, robot: int,
                  X_own: Pose, X_neighbors, lam: float | None = None) -> np.ndarray:
    return RobotView.build(graph, partition, robot).hessian(metric, X_own, X_neighbors, lam)


def retract(X: Pose, eta: np.ndarray) -> Pose:
    return X @ exp_se3(np.asarray(eta, dtype=float).reshape(-1, 6))


def pullback_cost(metric: Metric, graph: PoseGraph, X: Pose, eta: np.ndarray) -> float:
    """``C(X exp(eta^))`` with ``eta`` the stacked per-pose twists."""
    return total_cost(metric, graph, retract(X, eta))


def estimate_lipschitz_fn(f: Callable[[np.ndarray], float], grad0: np.ndarray,
                          directions: np.ndarray, radius: float = 0.5,
                          norm_matrix: np.ndarray | None = None, safety: float = 2.0,
                          floor: float = 1e-12, rng=None, scales: int = 4) -> float:
    """Sampled constant for ``f(eta) <= f(0) + <grad0, eta> + L/2 |eta|^2``.

    ``directions`` are rows; each is probed at ``scales`` step lengths up to
    ``radius``. ``norm_matrix`` replaces the Euclidean norm by ``eta^T M eta``.
    """
    rng = np.random.default_rng(rng)
    f0 = f(np.zeros_like(grad0))
    best = 0.0
    for d in directions:
        nd = float(d @ (norm_matrix @ d)) if norm_matrix is not None else float(d @ d)
        if nd <= 0:
            continue
        d = d / np.sqrt(nd)
        for s in radius * rng.uniform(0.05, 1.0, size=scales):
            eta = s * d
            q = s * s  # |eta|^2 in the chosen norm
            best = max(best, 2.0 * (f(eta) - f0 - float(grad0 @ eta)) / q)
    return max(safety * best, floor)


def estimate_lipschitz(metric: Metric, graph: PoseGraph, X: Pose | None = None,
                       trials: int = 64, radius: float = 0.5, norm_matrix: np.ndarray | None = None,
                       anchor: int | None = 0, safety: float = 2.0, n_eig: int = 8,
                       seed: int = 0) -> float:
    """Lipschitz-type constant of the pullback around ``X``.

    Probes ``trials`` random directions plus the ``n_eig`` stiffest generalized
    eigen-directions of the Gauss-Newton Hessian (relative to ``norm_matrix``),
    which random sampling in high dimension would otherwise miss.
    """
    X = graph.poses if X is None else X
    rng = np.random.default_rng(seed)
    dim = 6 * graph.n_vertices
    free = np.ones(dim, dtype=bool)
    if anchor is not None:
        free[6 * anchor: 6 * anchor + 6] = False
    dirs = rng.standard_normal((trials, dim)) * free
    if n_eig > 0 and graph.n_edges:
        view = RobotView.build(graph, None, anchor=0 if anchor is None else anchor)
        if anchor is None:
            view.anchor = None
        H = view.hessian(metric, X)
        B = norm_matrix if norm_matrix is not None else np.eye(dim)
        Hf, Bf = H[np.ix_(free, free)], B[np.ix_(free, free)]
        from scipy.linalg import eigh
        w, V = eigh(Hf, Bf)
        top = np.zeros((min(n_eig, len(w)), dim))
        top[:, free] = V[:, ::-1][:, : len(top)].T
        dirs = np.vstack([dirs, top, -top])
    g0 = full_gradient(metric, graph, X, anchor)
    return estimate_lipschitz_fn(lambda eta: pullback_cost(metric, graph, X, eta), g0, dirs,
                                 radius=radius, norm_matrix=norm_matrix, safety=safety, rng=rng)
