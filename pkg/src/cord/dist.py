"""Distributed solver: per-robot dynamics, neighbor prediction and a packet network.

Execution is lock-step: in round ``k`` every robot reads its inbox, predicts
its neighbors to its own clock ``t_k``, steps once and posts a packet carrying
its boundary poses and twists at ``tau = t_{k+1}``. Delays are counted in
rounds; a packet posted in round ``k`` with delay ``D`` is read in round
``k + D``, so ``D = 1`` is the synchronous case.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .dynamics import (BlockDiag, DynParams, IntegrationError, MassMode, accelerate,
                       advance)
from .graph import Partition, PoseGraph
from .lie import Pose, exp_se3
from .objective import Metric, MissingNeighborError, RobotView, total_cost

PREDICT_CAP = 50  # prediction horizon cap, in multiples of dt
FLOAT_BYTES = 4   # packet sizes are reported for 32-bit floats


class Regime(str, Enum):
    SYNC = "sync"
    DELAY = "delay"
    RANDOM = "randdelay"
    EDGE = "edge"


@dataclass(frozen=True)
class NetConfig:
    """Communication model. ``delay`` is used by ``DELAY``, ``lo``/``hi`` by ``RANDOM``."""

    regime: Regime = Regime.SYNC
    delay: int = 1
    lo: int = 1
    hi: int = 1
    loss_prob: float = 0.0
    seed: int = 0
    edge_schedule: str = "roundrobin"   # or "random"

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must lie in [0, 1)")
        if self.regime is Regime.DELAY and self.delay < 1:
            raise ValueError("constant delay must be at least one round")
        if self.regime is Regime.RANDOM and not 1 <= self.lo <= self.hi:
            raise ValueError("random delay needs 1 <= lo <= hi")
        if self.edge_schedule not in ("roundrobin", "random"):
            raise ValueError(f"unknown edge schedule {self.edge_schedule!r}")

    @classmethod
    def parse(cls, text: str, loss_prob: float = 0.0, seed: int = 0, **kw) -> "NetConfig":
        """``sync``, ``delay:D``, ``randdelay:LO:HI`` or ``edge``."""
        parts = text.strip().lower().split(":")
        try:
            if parts[0] == "sync" and len(parts) == 1:
                return cls(Regime.SYNC, loss_prob=loss_prob, seed=seed, **kw)
            if parts[0] == "delay" and len(parts) == 2:
                return cls(Regime.DELAY, delay=int(parts[1]), loss_prob=loss_prob, seed=seed, **kw)
            if parts[0] == "randdelay" and len(parts) == 3:
                return cls(Regime.RANDOM, lo=int(parts[1]), hi=int(parts[2]),
                           loss_prob=loss_prob, seed=seed, **kw)
            if parts[0] == "edge" and len(parts) == 1:
                return cls(Regime.EDGE, loss_prob=loss_prob, seed=seed, **kw)
        except ValueError as exc:
            raise ValueError(f"bad regime {text!r}: {exc}") from None
        raise ValueError(f"bad regime {text!r}; expected sync, delay:D, randdelay:LO:HI or edge")

    def label(self) -> str:
        if self.regime is Regime.DELAY:
            return f"delay:{self.delay}"
        if self.regime is Regime.RANDOM:
            return f"randdelay:{self.lo}:{self.hi}"
        return self.regime.value


@dataclass(frozen=True)
class Packet:
    """Boundary poses (and twists, for CORD) of one robot at model time ``tau``."""

    sender: int
    tau: float
    k_sent: int
    rows: np.ndarray
    poses: Pose
    twists: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        # header (sender, tau) + per pose: id, quaternion + translation, optional twist
        per = 1 + 7 + (6 if self.twists is not None else 0)
        return FLOAT_BYTES * (2 + per * len(self.rows))


def predict_neighbor(p: Packet, t_now: float, cap: float = math.inf) -> Pose:
    """Extrapolate every pose in ``p`` along its own twist for ``min(t_now - tau, cap)``."""
    dt = t_now - p.tau
    if dt < -1e-12:
        raise ValueError(f"packet from robot {p.sender} is from the future ({p.tau} > {t_now})")
    dt = min(max(dt, 0.0), cap)
    if dt == 0.0 or p.twists is None:
        return p.poses
    return p.poses @ exp_se3(p.twists * dt)


class Network:
    """Seeded packet router for one regime; the only link between robots."""

    def __init__(self, cfg: NetConfig, partition: Partition):
        self.cfg = cfg
        self.neighbors = [partition.neighbors(r) for r in range(partition.n_robots)]
        self.pairs = partition.neighbor_pairs()
        self.rng = np.random.default_rng(cfg.seed)
        self.queue: dict[int, list[tuple[int, Packet]]] = {}
        self.latest: dict[int, Packet] = {}
        self.delivered = 0
        self.dropped = 0

    def _lost(self) -> bool:
        return self.cfg.loss_prob > 0 and self.rng.random() < self.cfg.loss_prob

    def _delay(self) -> int:
        if self.cfg.regime is Regime.DELAY:
            return self.cfg.delay
        if self.cfg.regime is Regime.RANDOM:
            return int(self.rng.integers(self.cfg.lo, self.cfg.hi + 1))
        return 1

    def post(self, p: Packet, k: int) -> None:
        """Hand over a packet sent in round ``k``."""
        if self.cfg.regime is Regime.EDGE:
            self.latest[p.sender] = p
            return
        for j in self.neighbors[p.sender]:
            if self._lost():
                self.dropped += 1
                continue
            self.queue.setdefault(k + self._delay(), []).append((j, p))

    def scheduled_pair(self, k: int) -> tuple[int, int] | None:
        if not self.pairs:
            return None
        if self.cfg.edge_schedule == "random":
            return self.pairs[int(self.rng.integers(len(self.pairs)))]
        return self.pairs[k % len(self.pairs)]

    def collect(self, k: int) -> dict[int, list[Packet]]:
        """Packets readable in round ``k``, by recipient."""
        inbox: dict[int, list[Packet]] = {}
        if self.cfg.regime is Regime.EDGE:
            pair = self.scheduled_pair(k)
            if pair is not None:
                for dst, src in (pair, pair[::-1]):
                    p = self.latest.get(src)
                    if p is None:
                        continue
                    if self._lost():
                        self.dropped += 1
                        continue
                    inbox.setdefault(dst, []).append(p)
                    self.delivered += 1
            return inbox
        for j, p in self.queue.pop(k, []):
            inbox.setdefault(j, []).append(p)
            self.delivered += 1
        return inbox


def bootstrap(robots: Sequence["Robot"]) -> None:
    """Zero-delay, loss-free exchange of the initial boundary states."""
    packets = [r.emit(k_sent=-1) for r in robots]
    for r in robots:
        r.receive([packets[j] for j in r.neighbor_ids])


class Robot:
    """One robot of the team. It only ever sees its own state and its inbox."""

    def __init__(self, view: RobotView, partition: Partition, X0: Pose, metric: Metric,
                 params: DynParams, predict: bool = True, send_twists: bool = True):
        self.id = view.robot
        self.view = view
        self.metric = Metric(metric)
        self.params = params
        self.predict = predict
        self.send_twists = send_twists
        self.X = X0.copy()
        self.xi = np.zeros((len(X0), 6))
        self.k = 0
        self.t = params.t0
        self.dt_prev = params.dt
        self.H: BlockDiag | None = None
        self.H_prev: BlockDiag | None = None
        self._stale_H = True
        self.cache: dict[int, Packet] = {}
        self.neighbor_ids = partition.neighbors(self.id)
        # own poses touched by inter-robot edges: the only ones neighbors need
        n_own = view.n_own
        cross = (view.a >= n_own) | (view.b >= n_own)
        ends = np.concatenate([view.a[cross], view.b[cross]])
        self._boundary_local = np.unique(ends[ends < n_own])
        self.boundary = view.own[self._boundary_local]
        self._nbr_slots: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.last_grad = np.zeros(6 * len(X0))
        self.kinetic = 0.0   # kinetic energy at the start of the last step

    # --- communication -------------------------------------------------

    def emit(self, k_sent: int | None = None) -> Packet:
        k_sent = self.k - 1 if k_sent is None else k_sent
        idx = self._boundary_local
        tw = self.xi[idx].copy() if self.send_twists else None
        return Packet(self.id, self.t, k_sent, self.boundary, self.X[idx], tw)

    def receive(self, packets: Sequence[Packet]) -> None:
        for p in packets:
            old = self.cache.get(p.sender)
            if old is None or p.tau > old.tau:
                self.cache[p.sender] = p

    def _slots(self, j: int, p: Packet) -> tuple[np.ndarray, np.ndarray]:
        s = self._nbr_slots.get(j)
        if s is None:
            mine = np.flatnonzero(self.view.nbr_robot == j)
            pos = np.searchsorted(p.rows, self.view.nbr[mine])
            if np.any(pos >= len(p.rows)) or np.any(p.rows[np.minimum(pos, len(p.rows) - 1)]
                                                    != self.view.nbr[mine]):
                raise MissingNeighborError(f"robot {self.id}: packet from {j} lacks boundary poses")
            s = self._nbr_slots[j] = (mine, pos)
        return s

    def neighbor_poses(self) -> Pose:
        """Neighbor poses at the local clock, predicted or raw, ordered like ``view.nbr``."""
        n = len(self.view.nbr)
        R = np.empty((n, 3, 3))
        t = np.empty((n, 3))
        cap = PREDICT_CAP * self.params.dt
        for j in self.neighbor_ids:
            p = self.cache.get(j)
            if p is None:
                raise MissingNeighborError(
                    f"robot {self.id}: no packet from neighbor robot {j}; bootstrap first")
            if p.tau > self.t + 1e-12:
                raise ValueError(f"robot {self.id}: packet from {j} stamped after the local clock")
            mine, pos = self._slots(j, p)
            Xj = predict_neighbor(p, self.t, cap) if self.predict else p.poses
            R[mine] = Xj.R[pos]
            t[mine] = Xj.t[pos]
        return Pose(R, t)

    def staleness(self) -> float:
        ages = [self.k - self.cache[j].k_sent for j in self.neighbor_ids if j in self.cache]
        return float(np.mean(ages)) if ages else 0.0

    # --- local computation ----------------------------------------------

    def _hessian(self, X_nbr: Pose) -> BlockDiag:
        Hi = self.view.hessian(self.metric, self.X, X_nbr, self.params.lam, sparse_out=True)
        return BlockDiag([np.arange(len(self.X))], [Hi], len(self.X))

    def _refresh(self, X_nbr: Pose, state_dependent: bool) -> None:
        if self.H is None:
            self.H = self.H_prev = self._hessian(X_nbr)
        elif self._stale_H and state_dependent:
            self.H_prev, self.H = self.H, self._hessian(X_nbr)
        elif self._stale_H:
            self.H_prev = self.H
        self._stale_H = False

    def step(self) -> None:
        """One CORD round: predict neighbors, integrate, advance the clock."""
        X_nbr = self.neighbor_poses()
        self._refresh(X_nbr, self.params.mass_mode is MassMode.STATE)
        g = self.view.gradient(self.metric, self.X, X_nbr)
        self.last_grad = g
        _, a, _, _, Mxi = accelerate(self.xi, g, self.H, self.H_prev, self.t, self.dt_prev,
                                     self.params, self.view.anchor)
        self.kinetic = 0.5 * float(self.xi.reshape(-1) @ Mxi)
        self.X, self.xi = advance(self.X, self.xi, a, self.params.dt)
        self.t += self.params.dt
        self.dt_prev = self.params.dt
        self.k += 1
        self._stale_H = True

    def jacobi_step(self, alpha: float) -> None:
        """Block-preconditioned gradient step against raw cached neighbor poses."""
        X_nbr = self.neighbor_poses()
        self._refresh(X_nbr, self.params.mass_mode is MassMode.STATE)
        g = self.view.gradient(self.metric, self.X, X_nbr)
        self.last_grad = g
        if alpha != 0.0:
            eta = -alpha * self.H.solve(g)
            self.X = self.X @ exp_se3(eta.reshape(-1, 6))
        self.t += self.params.dt
        self.k += 1
        self._stale_H = True


class Solver(str, Enum):
    CORD = "cord"
    DJ = "dj"


def traj_fields(n_robots: int) -> list[str]:
    return (["round", "t", "cost"] + [f"grad_inf_{r}" for r in range(n_robots)]
            + ["kinetic", "delivered", "dropped", "staleness"])


@dataclass
class DistResult:
    rows: list[dict]
    X: Pose
    robots: list[Robot]
    packet_bytes: float
    diverged: bool = False
    message: str = ""

    @property
    def costs(self) -> np.ndarray:
        return np.array([r["cost"] for r in self.rows])


def make_robots(graph: PoseGraph, partition: Partition, metric: Metric, params: DynParams,
                X0: Pose | None = None, predict: bool = True,
                send_twists: bool = True) -> list[Robot]:
    X0 = graph.poses if X0 is None else X0
    robots = []
    for r in range(partition.n_robots):
        view = RobotView.build(graph, partition, r)
        robots.append(Robot(view, partition, X0[view.own], metric, params, predict, send_twists))
    return robots


def gather(robots: Sequence[Robot], n: int) -> Pose:
    """Global snapshot of all robots' poses (a harness-side view)."""
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    for r in robots:
        R[r.view.own] = r.X.R
        t[r.view.own] = r.X.t
    return Pose(R, t)


def run_distributed(graph: PoseGraph, partition: Partition, metric: Metric, params: DynParams,
                    net: NetConfig, max_iter: int, solver: Solver = Solver.CORD,
                    alpha: float = 1.0, predict: bool = True, X0: Pose | None = None,
                    log_cost: bool = True, stop_on_divergence: bool = True,
                    callback: Callable[[int, list[Robot]], None] | None = None) -> DistResult:
    """Drive every robot for ``max_iter`` rounds; row ``k`` logs the state at round ``k``.

    The global cost is computed from a harness snapshot and never reaches the
    robots. A DJ run ignores ``predict`` and sends poses only.
    """
    solver = Solver(solver)
    metric = Metric(metric)
    cord = solver is Solver.CORD
    robots = make_robots(graph, partition, metric, params, X0,
                         predict=predict and cord, send_twists=cord)
    network = Network(net, partition)
    bootstrap(robots)
    n = graph.n_vertices
    rows: list[dict] = []
    sizes: list[int] = []
    res = DistResult(rows, gather(robots, n), robots, 0.0)
    for k in range(max_iter + 1):
        d0, x0 = network.delivered, network.dropped
        if k > 0:
            for j, pk in network.collect(k).items():
                robots[j].receive(pk)
        logged = log_cost or k in (0, max_iter)
        C = total_cost(metric, graph, gather(robots, n)) if logged else math.nan
        row = {"round": k, "t": robots[0].t if robots else params.t0, "cost": C}
        last = k == max_iter or (stop_on_divergence and logged and not math.isfinite(C))
        if last:
            for r in robots:
                r.last_grad = r.view.gradient(metric, r.X, r.neighbor_poses())
                if cord and r.H is not None:
                    r.kinetic = 0.5 * params.m * r.H.quad(r.xi)
            if k < max_iter:
                res.diverged, res.message = True, f"non-finite cost at round {k}"
        else:
            try:
                for r in robots:
                    r.step() if cord else r.jacobi_step(alpha)
            except IntegrationError as exc:
                res.diverged, res.message, last = True, f"round {k}: {exc}", True
        for r in robots:
            row[f"grad_inf_{r.id}"] = float(np.abs(r.last_grad).max(initial=0.0))
        row["kinetic"] = float(sum(r.kinetic for r in robots))
        row["delivered"] = network.delivered - d0
        row["dropped"] = network.dropped - x0
        row["staleness"] = float(np.mean([r.staleness() for r in robots])) if robots else 0.0
        rows.append(row)
        if callback is not None:
            callback(k, robots)
        if last:
            break
        for r in robots:
            p = r.emit()
            sizes.append(p.nbytes)
            network.post(p, k)
    res.X = gather(robots, n)
    res.packet_bytes = float(np.mean(sizes)) if sizes else 0.0
    return res


def write_trajectory(rows: Sequence[dict], path, n_robots: int) -> None:
    fields = traj_fields(n_robots)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in fields})


def read_trajectory(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
