"""Damped Euler-Poincare dynamics on SE(3)^N and its semi-implicit integrator.

The state is ``(X, xi)`` with ``xi`` the stacked body velocities. Mass and
damping are scalar multiples of a block-diagonal LM Hessian ``H``::

    M = m H,    D = (d / t + eps_d) H

One step computes the forces, takes a forward-Euler velocity step and then
retracts the poses with the *new* velocity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .graph import Partition, PoseGraph
from .lie import Pose, coadjoint_apply, exp_se3
from .objective import Metric, RobotView, total_cost


class MassMode(str, Enum):
    CONSTANT = "const"
    STATE = "state"


class Coadjoint(str, Enum):
    """How ``ad*`` meets a coupled mass: on the full momentum or per pose block."""
    FULL = "full"
    POSE = "pose"


class IntegrationError(RuntimeError):
    pass


class BlockDiag:
    """Symmetric block-diagonal operator on stacked 6-vectors.

    ``groups[i]`` lists the pose rows of block ``i`` and ``blocks[i]`` is its
    ``6 n_i x 6 n_i`` matrix, stored sparse. ``scale`` multiplies everything;
    scaled copies share the factorization cache of the base blocks.
    """

    def __init__(self, groups: Sequence[np.ndarray], blocks: Sequence, n_poses: int,
                 scale: float = 1.0, _cache: dict | None = None):
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.blocks = [B if sparse.isspmatrix_csr(B) else sparse.csr_matrix(np.asarray(B, dtype=float))
                       for B in blocks]
        self.n_poses = n_poses
        self.scale = float(scale)
        self._cache = {} if _cache is None else _cache
        self._cols = [(6 * g[:, None] + np.arange(6)).reshape(-1) for g in self.groups]
        # one block over rows 0..n-1 in order: skip the gather/scatter
        self._whole = (len(self.groups) == 1 and len(self.groups[0]) == n_poses
                       and np.array_equal(self.groups[0], np.arange(n_poses)))

    @classmethod
    def identity(cls, n_poses: int) -> "BlockDiag":
        return cls([np.arange(n_poses)], [sparse.identity(6 * n_poses, format="csr")], n_poses)

    @classmethod
    def from_dense(cls, A) -> "BlockDiag":
        n = A.shape[0] // 6
        return cls([np.arange(n)], [A], n)

    def scaled(self, c: float) -> "BlockDiag":
        new = object.__new__(BlockDiag)
        new.__dict__.update(self.__dict__)
        new.scale = self.scale * c
        return new

    def __rmul__(self, c: float) -> "BlockDiag":
        return self.scaled(c)

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self._whole:
            return self.scale * (self.blocks[0] @ x)
        out = np.zeros_like(x)
        for cols, B in zip(self._cols, self.blocks):
            out[cols] = B @ x[cols]
        return self.scale * out

    def _factor(self, i: int):
        f = self._cache.get(i)
        if f is None:
            B = self.blocks[i]
            if not np.all(np.isfinite(B.data)):
                raise IntegrationError(f"non-finite mass block {i}; the dynamics diverged")
            try:
                f = splu(B.tocsc())
            except RuntimeError as exc:
                raise IntegrationError(
                    f"factorization failed on block {i}; increase the LM regularizer") from exc
            self._cache[i] = f
        return f

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float).reshape(-1)
        if self._whole:
            out = self._factor(0).solve(b)
        else:
            out = np.zeros_like(b)
            for i, cols in enumerate(self._cols):
                out[cols] = self._factor(i).solve(b[cols])
        if not np.all(np.isfinite(out)):
            raise IntegrationError("non-finite values in block solve; the dynamics diverged")
        return out / self.scale

    def quad(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(x @ (self @ x))

    def dense(self) -> np.ndarray:
        A = np.zeros((6 * self.n_poses, 6 * self.n_poses))
        for cols, B in zip(self._cols, self.blocks):
            A[np.ix_(cols, cols)] = B.toarray()
        return self.scale * A

    def pose_block(self, p: int) -> np.ndarray:
        for g, B in zip(self.groups, self.blocks):
            hit = np.flatnonzero(g == p)
            if len(hit):
                s = 6 * hit[0]
                return self.scale * B[s:s + 6, s:s + 6].toarray()
        raise IndexError(p)


def as_block(A) -> BlockDiag:
    return A if isinstance(A, BlockDiag) else BlockDiag.from_dense(np.asarray(A, dtype=float))


@dataclass
class DynParams:
    m: float = 0.7
    d: float = 2.0
    eps_d: float = 0.01
    dt: float = 1.0
    t0: float = 1.0
    mass_mode: MassMode = MassMode.CONSTANT
    lam: float | None = None   # absolute LM regularizer; None = 1e-6 x mean diag
    safeguard: bool = False
    max_halvings: int = 30
    lipschitz_growth: float = 1.1   # margin applied when the safeguard raises L
    coadjoint: Coadjoint = Coadjoint.FULL

    def __post_init__(self):
        self.mass_mode = MassMode(self.mass_mode)
        self.coadjoint = Coadjoint(self.coadjoint)
        if not (self.m > 0 and self.eps_d > 0 and self.dt > 0 and self.t0 > 0):
            raise ValueError("m, eps_d, dt and t0 must be positive")

    def damping_coef(self, t: float) -> float:
        return self.d / t + self.eps_d


def build_mass_damping(H, params: DynParams, t: float) -> tuple[BlockDiag, BlockDiag]:
    if t <= 0:
        raise ValueError("model time must be positive")
    H = as_block(H)
    return H.scaled(params.m), H.scaled(params.damping_coef(t))


@dataclass
class ForceBreakdown:
    f_grad: np.ndarray
    f_damp: np.ndarray
    f_cor: np.ndarray
    f_varM: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.f_grad + self.f_damp + self.f_cor + self.f_varM


def coriolis(xi: np.ndarray, M, Mxi: np.ndarray | None = None,
             mode: Coadjoint = Coadjoint.FULL) -> np.ndarray:
    """``ad*_xi (mu)`` on the product group, acting pose by pose.

    ``FULL`` uses the coupled momentum ``mu = M xi``; ``POSE`` keeps only the
    diagonal 6x6 block of ``M`` for each pose.
    """
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    M = as_block(M)
    if Coadjoint(mode) is Coadjoint.POSE:
        mu = np.stack([M.pose_block(p) @ xi[p] for p in range(len(xi))]) if len(xi) else xi
    else:
        mu = M @ xi.reshape(-1) if Mxi is None else Mxi
    return coadjoint_apply(xi, np.reshape(mu, (-1, 6))).reshape(-1)


def compute_forces(xi: np.ndarray, grad: np.ndarray, M, D, M_prev=None,
                   dt: float | None = None,
                   coadjoint: Coadjoint = Coadjoint.FULL) -> tuple[ForceBreakdown, np.ndarray]:
    """Force terms and the momentum ``M xi``."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    M, D = as_block(M), as_block(D)
    Mxi = M @ xi
    # M and D are usually scalar multiples of the same H: reuse the product
    Dxi = Mxi * (D.scale / M.scale) if D._cache is M._cache else D @ xi
    f_varM = np.zeros_like(xi)
    if M_prev is not None and M_prev is not M:
        f_varM = -(Mxi - (as_block(M_prev) @ xi)) / dt
    forces = ForceBreakdown(-np.asarray(grad, dtype=float).reshape(-1), -Dxi,
                            coriolis(xi, M, Mxi, coadjoint), f_varM)
    return forces, Mxi


class CentralizedProblem:
    """Cost, full gradient and block-diagonal LM Hessian of a whole pose graph.

    Blocks follow ``partition`` (one block per robot); ``partition=None`` gives
    a single dense block. The anchored vertex is held fixed.
    """

    def __init__(self, graph: PoseGraph, metric: Metric, partition: Partition | None = None,
                 lam: float | None = None, anchor: int | None = None):
        self.graph = graph
        self.metric = Metric(metric)
        self.partition = partition
        self.lam = lam
        if anchor is None:
            anchor = partition.anchor if partition is not None else 0
        self.anchor = anchor
        self.full = RobotView.build(graph, None, anchor=anchor)
        n_blocks = partition.n_robots if partition is not None else 1
        self.views = [RobotView.build(graph, partition, r, anchor=anchor) for r in range(n_blocks)]

    @property
    def n_poses(self) -> int:
        return self.graph.n_vertices

    def cost(self, X: Pose) -> float:
        return total_cost(self.metric, self.graph, X)

    def gradient(self, X: Pose) -> np.ndarray:
        if len(self.views) == 1:
            return self.full.gradient(self.metric, X)
        # assembled robot by robot, exactly as the distributed solver sees it
        g = np.zeros((self.n_poses, 6))
        for v in self.views:
            g[v.own] = v.gradient(self.metric, X[v.own], X[v.nbr]).reshape(-1, 6)
        return g.reshape(-1)

    def hessian(self, X: Pose) -> BlockDiag:
        blocks = [v.hessian(self.metric, X[v.own], X[v.nbr], self.lam, sparse_out=True)
                  for v in self.views]
        return BlockDiag([v.own for v in self.views], blocks, self.n_poses)


@dataclass
class DynState:
    X: Pose
    xi: np.ndarray          # (n, 6)
    H: BlockDiag
    H_prev: BlockDiag
    k: int = 0
    t: float = 1.0
    dt_prev: float = 1.0

    def mass(self, params: DynParams) -> BlockDiag:
        return self.H.scaled(params.m)


def init_state(problem, params: DynParams, X0: Pose | None = None, H=None) -> DynState:
    X0 = problem.graph.poses if X0 is None else X0
    H = problem.hessian(X0) if H is None else as_block(H)
    return DynState(X0.copy(), np.zeros((len(X0), 6)), H, H, 0, params.t0, params.dt)


def kinetic_energy(xi: np.ndarray, M) -> float:
    return 0.5 * as_block(M).quad(xi)


def total_energy(state: DynState, params: DynParams, metric: Metric, graph: PoseGraph):
    """``(T, C, E)`` with ``T = xi^T M xi / 2``."""
    T = kinetic_energy(state.xi, state.mass(params))
    C = total_cost(metric, graph, state.X)
    return T, C, T + C


def max_stable_dt(xi_k, xi_k1, a_k, grad_k, M, D, L: float) -> float:
    """Largest step for which the energy-dissipation sufficient condition holds."""
    M, D = as_block(M), as_block(D)
    num = D.quad(xi_k)
    g = np.asarray(grad_k, dtype=float).reshape(-1)
    den = 0.5 * float(g @ M.solve(g)) + 0.5 * L * M.quad(xi_k1) + M.quad(a_k)
    if den <= 0:
        return math.inf
    return num / den


def energy_change_bound(dt: float, xi_k, xi_k1, a_k, grad_k, M, D, L: float) -> float:
    """Upper bound on ``E_{k+1} - E_k`` before the Young-inequality relaxation."""
    M, D = as_block(M), as_block(D)
    a = np.asarray(a_k, dtype=float).reshape(-1)
    g = np.asarray(grad_k, dtype=float).reshape(-1)
    return (dt * dt * (float(a @ g) + 0.5 * L * M.quad(xi_k1) + 0.5 * M.quad(a))
            - dt * D.quad(xi_k))


@dataclass
class StepInfo:
    grad: np.ndarray
    forces: ForceBreakdown
    a: np.ndarray
    dt: float
    xiDxi: float
    bound: float
    halvings: int = 0
    T: float = math.nan     # kinetic energy at the start of the step
    L: float | None = None  # Lipschitz estimate after any safeguard refinement


def accelerate(xi: np.ndarray, grad: np.ndarray, H: BlockDiag, H_prev: BlockDiag,
               t: float, dt_prev: float, params: DynParams, anchor: int | None = None):
    """Forces and ``a = M^-1 F`` at one state; returns ``(forces, a, M, D, Mxi)``.

    ``anchor`` is a pose row whose acceleration is forced to zero.
    """
    M, D = build_mass_damping(H, params, t)
    M_prev = H_prev.scaled(params.m) if H_prev is not H else None
    forces, Mxi = compute_forces(xi, grad, M, D, M_prev, dt_prev, params.coadjoint)
    a = M.solve(forces.total)
    if anchor is not None:
        a[6 * anchor: 6 * anchor + 6] = 0.0
    return forces, a, M, D, Mxi


def advance(X: Pose, xi: np.ndarray, a: np.ndarray, dt: float) -> tuple[Pose, np.ndarray]:
    """Velocity update followed by retraction with the new velocity."""
    xi1 = (np.reshape(xi, -1) + a * dt).reshape(-1, 6)
    return X @ exp_se3(xi1 * dt), xi1


def step(state: DynState, params: DynParams, problem, L: float | None = None) -> tuple[DynState, StepInfo]:
    """One semi-implicit step.

    With ``params.safeguard`` the step is retried with halved ``dt`` until it
    satisfies either the closed-form step bound or the (tighter) energy-change
    bound it is derived from; ``L`` must then be given. An accepted trial whose
    own secant curvature exceeds ``L`` raises ``L`` and is checked again.
    """
    if params.safeguard and L is None:
        raise ValueError("the safeguarded step needs a Lipschitz estimate L")
    g = problem.gradient(state.X)
    forces, a, M, D, Mxi = accelerate(state.xi, g, state.H, state.H_prev, state.t,
                                      state.dt_prev, params, problem.anchor)
    xi_k = state.xi.reshape(-1)
    dt = params.dt
    halvings = 0
    bound = math.nan
    C0 = problem.cost(state.X) if params.safeguard else math.nan
    while True:
        xi1 = xi_k + a * dt
        if L is not None:
            bound = max_stable_dt(xi_k, xi1, a, g, M, D, L)
        if not params.safeguard:
            break
        if dt <= bound or energy_change_bound(dt, xi_k, xi1, a, g, M, D, L) <= 0.0:
            # the estimate only holds near where it was sampled: check the
            # secant curvature of the actual step and tighten L if it is exceeded
            eta = dt * xi1
            q = M.quad(eta)
            C1 = problem.cost(state.X @ exp_se3(eta.reshape(-1, 6)))
            L_step = 2.0 * (C1 - C0 - float(g @ eta)) / q if q > 0 else 0.0
            if L_step <= L:
                break
            if math.isfinite(L_step):
                L = params.lipschitz_growth * L_step
                continue
        if halvings >= params.max_halvings:
            raise IntegrationError(f"step {state.k}: no admissible dt after {halvings} halvings")
        dt *= 0.5
        halvings += 1
    X1, xi1 = advance(state.X, xi_k, a, dt)
    if params.mass_mode is MassMode.STATE:
        H1, H_prev = problem.hessian(X1), state.H
    else:
        H1, H_prev = state.H, state.H
    new = DynState(X1, xi1, H1, H_prev, state.k + 1, state.t + dt, dt)
    xiDxi = float(xi_k @ (-forces.f_damp))
    return new, StepInfo(g, forces, a, dt, xiDxi, bound, halvings, 0.5 * float(xi_k @ Mxi), L)


def overdamped_step(X: Pose, grad: np.ndarray, D, dt: float = 1.0) -> Pose:
    """First-order limit: velocity ``-D^-1 grad`` applied for ``dt``.

    ``D = I`` is Riemannian gradient descent; ``D = H`` is a Gauss-Newton/LM step.
    """
    xi = -as_block(D).solve(grad)
    return X @ exp_se3(xi.reshape(-1, 6) * dt)


TRAJ_FIELDS = ["k", "t", "C", "T", "E", "grad_inf", "xiDxi", "dt_bound", "dt_used"]


@dataclass
class RunResult:
    state: DynState
    rows: list[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def costs(self) -> np.ndarray:
        return np.array([r["C"] for r in self.rows])


def run(problem, params: DynParams, max_iter: int, X0: Pose | None = None,
        L: float | None = None, gtol: float = 1e-9, xtol: float = 1e-9,
        callback: Callable[[DynState, StepInfo], None] | None = None) -> RunResult:
    """Integrate for up to ``max_iter`` steps, logging one row per iterate."""
    state = init_state(problem, params, X0)
    res = RunResult(state)
    for _ in range(max_iter + 1):
        C = problem.cost(state.X)
        row = {"k": state.k, "t": state.t, "C": C}
        if state.k == max_iter:
            T = kinetic_energy(state.xi, state.mass(params))
            row.update(T=T, E=T + C)
            g = problem.gradient(state.X)
            _, D = build_mass_damping(state.H, params, state.t)
            row.update(grad_inf=float(np.abs(g).max(initial=0.0)), xiDxi=D.quad(state.xi),
                       dt_bound=math.nan, dt_used=math.nan)
            res.rows.append(row)
            res.converged = row["grad_inf"] <= gtol and float(np.abs(state.xi).max(initial=0.0)) <= xtol
            break
        new, info = step(state, params, problem, L)
        L = info.L
        row.update(T=info.T, E=info.T + C, grad_inf=float(np.abs(info.grad).max(initial=0.0)), xiDxi=info.xiDxi,
                   dt_bound=info.bound, dt_used=info.dt)
        res.rows.append(row)
        if callback is not None:
            callback(state, info)
        if row["grad_inf"] <= gtol and float(np.abs(state.xi).max(initial=0.0)) <= xtol:
            res.converged = True
            break
        state = new
    res.state = state
    return res


def write_trajectory(rows: list[dict], path, fields: Sequence[str] = TRAJ_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in fields})


def read_trajectory(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


@dataclass
class EnergyReport:
    max_increase: float
    violation_fraction: float
    n_violations: int
    min_margin: float          # min over steps of (bound - dt); negative means dt exceeded the bound
    mean_rate_ratio: float     # mean of (dE/dt) / (-xi^T D xi) over steps with motion


def energy_monitor(rows: Sequence[dict], tol: float = 1e-12) -> EnergyReport:
    """Summarize energy behaviour; an increase counts if above ``tol * max(1, |E|)``."""
    E = np.array([r["E"] for r in rows])
    dE = np.diff(E)
    thresh = tol * np.maximum(1.0, np.abs(E[:-1]))
    viol = dE > thresh
    steps = rows[:-1]
    margins = [r["dt_bound"] - r["dt_used"] for r in steps
               if not math.isnan(r["dt_bound"])]
    ratios = [dE[i] / r["dt_used"] / -r["xiDxi"] for i, r in enumerate(steps) if r["xiDxi"] > 0]
    return EnergyReport(
        max_increase=float(dE.max(initial=-math.inf)) if len(dE) else 0.0,
        violation_fraction=float(viol.mean()) if len(dE) else 0.0,
        n_violations=int(viol.sum()),
        min_margin=float(min(margins)) if margins else math.nan,
        mean_rate_ratio=float(np.mean(ratios)) if ratios else math.nan,
    )
