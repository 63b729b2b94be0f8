"""Experiment harness: reference solutions, metrics, presets and the command line.

Outputs of one run (all in the output directory)::

    trajectory.csv   one row per iteration (header documents the columns)
    summary.txt      key = value lines
    gap.png          optimality gap per iteration (with --plot)
    energy.png       cost / kinetic / total energy (with --plot, CORD only)
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import splu

from .dist import NetConfig, Regime, run_distributed, traj_fields
from .dynamics import DynParams
from .graph import (GridWorldSpec, Partition, PoseGraph, generate_grid_world,
                    generate_random_graph, load_g2o, partition_contiguous, read_kv_file)
from .lie import Pose, exp_se3
from .objective import Metric, RobotView, total_cost

OUT_ENV = "CORD_OUT"
CENTRAL_FIELDS = ["round", "cost", "grad_inf"]


class ReferenceError_(RuntimeError):
    """Raised when the centralized reference does not reach the gradient tolerance."""


# ---------------------------------------------------------------------- reference


def _lm_iterations(graph: PoseGraph, metric: Metric, X0: Pose, max_iter: int, gtol: float,
                   mu0: float = 1e-4):
    """Levenberg-Marquardt on the full graph; yields ``(X, cost, grad_inf)`` per accepted iterate."""
    metric = Metric(metric)
    view = RobotView.build(graph, None, anchor=0)
    X = X0.copy()
    C = total_cost(metric, graph, X)
    mu = mu0
    for _ in range(max_iter):
        e, Ja, Jb = view.linearize(metric, X)
        g = view.gradient_from(e, Ja, Jb)
        gi = float(np.abs(g).max(initial=0.0))
        yield X, C, gi
        if gi <= gtol:
            return
        H = view.hessian_from(Ja, Jb, lam=0.0, sparse_out=True)
        d = H.diagonal()
        while True:
            A = (H + _diag(mu * d)).tocsc()
            delta = -splu(A).solve(g)
            Xn = X @ exp_se3(delta.reshape(-1, 6))
            Cn = total_cost(metric, graph, Xn)
            accept = Cn <= C
            if not accept and Cn <= C + 16 * np.finfo(float).eps * abs(C):
                # cost changes are below round-off here: judge by the gradient instead
                accept = np.abs(view.gradient(metric, Xn)).max(initial=0.0) < gi
            if accept:
                X, C = Xn, Cn
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 4.0
            if mu > 1e12:
                return   # no decrease possible at working precision


def _diag(v):
    from scipy import sparse
    return sparse.diags(v, format="csr")


def reference_solve(graph: PoseGraph, metric: Metric, X0: Pose | None = None,
                    gtol: float = 1e-9, max_iter: int = 500) -> tuple[float, Pose, list[tuple]]:
    """Centralized LM; returns ``(C*, X*, [(cost, grad_inf), ...])``."""
    X0 = graph.poses if X0 is None else X0
    hist = []
    X, C, gi = X0, total_cost(metric, graph, X0), math.inf
    for X, C, gi in _lm_iterations(graph, metric, X0, max_iter, gtol):
        hist.append((C, gi))
    if gi > gtol:
        raise ReferenceError_(
            f"centralized reference stopped at |grad|_inf = {gi:.3e} > {gtol:g} after "
            f"{len(hist)} iterations; supply the reference cost (--reference-cost)")
    return C, X, hist


def reference_cost(graph: PoseGraph, metric: Metric, X0: Pose | None = None,
                   gtol: float = 1e-9, max_iter: int = 500) -> float:
    return reference_solve(graph, metric, X0, gtol, max_iter)[0]


# ---------------------------------------------------------------------- metrics


def optimality_gap(C, C_star: float):
    """Relative gap ``(C - C*)/C*``; absolute ``C - C*`` (with a warning) when ``C* <= 0``."""
    C = np.asarray(C, dtype=float)
    if C_star > 0:
        out = (C - C_star) / C_star
    else:
        warnings.warn("reference cost is not positive; reporting the absolute gap", stacklevel=2)
        out = C - C_star
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ProfilePoint:
    k: int
    fraction: float


@dataclass
class RunRecord:
    """What the profile needs from one run: start cost, reference and the cost trace."""

    c0: float
    c_star: float
    costs: Sequence[float]


def solved_iteration(run: RunRecord, delta: float) -> int | None:
    thresh = run.c_star + delta * (run.c0 - run.c_star)
    hits = np.flatnonzero(np.asarray(run.costs, dtype=float) <= thresh)
    return int(hits[0]) if len(hits) else None


def performance_profile(runs: Sequence[RunRecord], delta: float,
                        max_iter: int | None = None) -> list[ProfilePoint]:
    """Fraction of runs whose cost has reached ``C* + delta (C0 - C*)`` by iteration ``k``."""
    if max_iter is None:
        max_iter = max(len(r.costs) for r in runs) - 1 if runs else 0
    hit = [solved_iteration(r, delta) for r in runs]
    pts = []
    for k in range(max_iter + 1):
        n = sum(1 for h in hit if h is not None and h <= k)
        pts.append(ProfilePoint(k, n / len(runs) if runs else 0.0))
    return pts


def profile_auc(points: Sequence[ProfilePoint]) -> float:
    """Trapezoidal area under the profile over ``k = 0..K``."""
    if len(points) < 2:
        return 0.0
    k = np.array([p.k for p in points], dtype=float)
    f = np.array([p.fraction for p in points])
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(k)))


# ---------------------------------------------------------------------- configuration

PRESETS: dict[str, dict[str, object]] = {
    # published benchmark settings (synchronous, asynchronous, delay sweep)
    "chordal-sync": dict(metric="chordal", regime="sync", damping=2.0, mass=0.7, dt=1.0,
                         mass_mode="state"),
    "geodesic-sync": dict(metric="geodesic", regime="sync", damping=2.0, mass=0.7, dt=0.7,
                          mass_mode="state"),
    "smallgrid-chordal": dict(metric="chordal", regime="sync", damping=1.5, mass=1.0, dt=0.65,
                              mass_mode="state"),
    "smallgrid-geodesic": dict(metric="geodesic", regime="sync", damping=4.0, mass=0.7, dt=0.7,
                               mass_mode="state"),
    "async": dict(metric="chordal", regime="delay:5", damping=4.0, mass=0.7, dt=0.1),
    "lossy": dict(metric="chordal", regime="randdelay:1:10", loss=0.1, damping=4.0, mass=0.7,
                  dt=0.2),
    "edge": dict(metric="geodesic", regime="edge", damping=4.0, mass=0.7, dt=0.1),
    "delay3": dict(metric="chordal", regime="delay:3", damping=5.0, mass=0.45, dt=0.12),
    "delay7": dict(metric="chordal", regime="delay:7", damping=5.0, mass=0.45, dt=0.075),
    "delay10": dict(metric="chordal", regime="delay:10", damping=5.0, mass=0.45, dt=0.05),
}

SOLVERS = ("cord", "dj", "centralized-lm", "centralized-gd")


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    generate: str | None = "grid"     # "grid[:k=v,...]" or "random[:k=v,...]"
    side: int | None = None
    rotation_first: bool = False
    metric: str = "chordal"
    solver: str = "cord"
    robots: int = 4
    regime: str = "sync"
    loss: float = 0.0
    mass: float = 0.7
    damping: float = 4.0
    dt: float = 0.2
    eps_d: float = 0.01
    t0: float = 1.0
    mass_mode: str = "const"
    lam: float | None = None
    coadjoint: str = "full"
    predict: bool = True
    alpha: float = 0.3
    iters: int = 100
    seed: int = 0
    reference_cost: float | None = None
    delta: float = 1e-2
    out: str | None = None
    plot: bool = False

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        Metric(self.metric)
        if self.dataset is not None and not Path(self.dataset).is_file():
            raise FileNotFoundError(f"dataset {self.dataset!r} does not exist")
        if self.robots < 1 or self.iters < 0:
            raise ValueError("robots must be >= 1 and iters >= 0")

    @property
    def params(self) -> DynParams:
        return DynParams(m=self.mass, d=self.damping, eps_d=self.eps_d, dt=self.dt, t0=self.t0,
                         mass_mode=self.mass_mode, lam=self.lam, coadjoint=self.coadjoint)

    @property
    def net(self) -> NetConfig:
        return NetConfig.parse(self.regime, loss_prob=self.loss, seed=self.seed)

    @classmethod
    def from_mapping(cls, kv: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            key = k.strip().replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown configuration key {k!r}")
            args[key] = _coerce(known[key].type, v)
        return cls(**args)


def _coerce(tp: str, v):
    if not isinstance(v, str):
        return v
    if v.lower() in ("none", ""):
        return None
    if "bool" in tp:
        if v.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {v!r}")
        return v.lower() in ("1", "true", "yes")
    if tp.startswith("int"):
        return int(v)
    if tp.startswith("float"):
        return float(v)
    return v


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for item in filter(None, text.split(",")):
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class Problem:
    graph: PoseGraph
    partition: Partition
    ground_truth: Pose | None = None


def load_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.dataset is not None:
        graph = load_g2o(cfg.dataset, rotation_first=cfg.rotation_first)
        return Problem(graph, partition_contiguous(graph, cfg.robots))
    kind, _, rest = (cfg.generate or "grid").partition(":")
    kv = _parse_kv(rest)
    if kind == "grid":
        kv.setdefault("robots", str(cfg.robots))
        kv.setdefault("seed", str(cfg.seed))
        if cfg.side is not None:
            kv.setdefault("side", str(cfg.side))
        sp = generate_grid_world(GridWorldSpec.from_mapping(kv))
        return Problem(sp.graph, sp.partition, sp.ground_truth)
    if kind == "random":
        kw = {k: (int(v) if k in ("n_poses", "n_loops", "n_robots", "seed") else float(v))
              for k, v in kv.items()}
        kw.setdefault("n_robots", cfg.robots)
        kw.setdefault("seed", cfg.seed)
        sp = generate_random_graph(**kw)
        return Problem(sp.graph, sp.partition, sp.ground_truth)
    raise ValueError(f"unknown generator {kind!r}; use grid or random")


# ---------------------------------------------------------------------- runners


def _central_gd(graph: PoseGraph, metric: Metric, iters: int, step0: float = 1e-3):
    """Riemannian gradient descent with Armijo backtracking."""
    view = RobotView.build(graph, None, anchor=0)
    X = graph.poses.copy()
    C = total_cost(metric, graph, X)
    step = step0
    rows = []
    for k in range(iters + 1):
        g = view.gradient(metric, X)
        gg = float(g @ g)
        rows.append({"round": k, "cost": C, "grad_inf": float(np.abs(g).max(initial=0.0))})
        if k == iters or gg == 0.0:
            break
        step *= 2.0
        while True:
            Xn = X @ exp_se3((-step * g).reshape(-1, 6))
            Cn = total_cost(metric, graph, Xn)
            if Cn <= C - 1e-4 * step * gg or step < 1e-16:
                break
            step *= 0.5
        X, C = Xn, Cn
    return rows, X


def run_experiment(cfg: ExperimentConfig, problem: Problem | None = None) -> tuple[dict, list[dict]]:
    """Run one configured experiment; returns ``(summary, rows)`` and writes files if ``cfg.out``."""
    problem = problem or load_problem(cfg)
    graph, metric = problem.graph, Metric(cfg.metric)
    if cfg.solver in ("cord", "dj") and problem.partition.n_robots != cfg.robots:
        problem = replace(problem, partition=partition_contiguous(graph, cfg.robots))
    ref_supplied = cfg.reference_cost is not None
    c_star = cfg.reference_cost if ref_supplied else reference_cost(graph, metric)
    t_start = time.perf_counter()
    summary: dict[str, object] = {}
    if cfg.solver in ("cord", "dj"):
        with np.errstate(over="ignore", invalid="ignore"):
            res = run_distributed(graph, problem.partition, metric, cfg.params, cfg.net,
                                  cfg.iters, solver=cfg.solver, alpha=cfg.alpha,
                                  predict=cfg.predict)
        rows, header = res.rows, traj_fields(problem.partition.n_robots)
        summary.update(packet_bytes=res.packet_bytes, diverged=res.diverged)
    elif cfg.solver == "centralized-lm":
        rows = []
        for k, (_, C, gi) in enumerate(_lm_iterations(graph, metric, graph.poses, cfg.iters, 0.0)):
            rows.append({"round": k, "cost": C, "grad_inf": gi})
        header = CENTRAL_FIELDS
        summary.update(packet_bytes=0.0, diverged=False)
    else:
        rows, _ = _central_gd(graph, metric, cfg.iters)
        header = CENTRAL_FIELDS
        summary.update(packet_bytes=0.0, diverged=False)
    elapsed = time.perf_counter() - t_start
    costs = np.array([r["cost"] for r in rows])
    c0 = float(costs[0])
    final = float(costs[-1])
    prof = performance_profile([RunRecord(c0, c_star, costs)], cfg.delta, cfg.iters)
    summary = dict(
        solver=cfg.solver, metric=metric.value, regime=cfg.regime if cfg.solver in ("cord", "dj")
        else "centralized", robots=cfg.robots, iters=len(rows) - 1, seed=cfg.seed,
        n_vertices=graph.n_vertices, n_edges=graph.n_edges,
        initial_cost=c0, final_cost=final, reference_cost=c_star,
        reference="supplied" if ref_supplied else "centralized-lm",
        gap=optimality_gap(final, c_star) if c_star > 0 else final - c_star,
        gap_kind="relative" if c_star > 0 else "absolute",
        delta=cfg.delta, auc=profile_auc(prof), **summary,
        time_per_round_ms=1e3 * elapsed / max(len(rows) - 1, 1),
    )
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(rows, out / "trajectory.csv", header)
        write_summary(summary, out / "summary.txt")
        if cfg.plot:
            plot_run(rows, c_star, out, energy=cfg.solver == "cord")
    return summary, rows


def write_rows(rows: Sequence[dict], path, header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in header})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k} = {repr(v) if isinstance(v, float) else v}\n")


def read_summary(path) -> dict[str, str]:
    return read_kv_file(path)


def plot_run(rows: Sequence[dict], c_star: float, out: Path, energy: bool = False) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = np.array([r["round"] for r in rows])
    C = np.array([r["cost"] for r in rows])
    gap = optimality_gap(C, c_star) if c_star > 0 else C - c_star
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(k, np.maximum(gap, 1e-16))
    ax.set_xlabel("iteration")
    ax.set_ylabel("optimality gap")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "gap.png", dpi=120)
    plt.close(fig)
    if energy and "kinetic" in rows[0]:
        T = np.array([r["kinetic"] for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(k, C, label="potential (cost)")
        ax.semilogy(k, np.maximum(T, 1e-16), label="kinetic")
        ax.semilogy(k, C + T, "--", label="total")
        ax.set_xlabel("iteration")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "energy.png", dpi=120)
        plt.close(fig)


# ---------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="cord-bench", argument_default=S,
                                description="Run one distributed pose-graph experiment.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--dataset", metavar="PATH", help="g2o file (SE3:QUAT)")
    src.add_argument("--generate", metavar="SPEC",
                     help="grid[:key=val,...] or random[:key=val,...]")
    p.add_argument("--side", type=int, help="grid-world lattice side")
    p.add_argument("--rotation-first", action="store_true",
                   help="g2o information matrices list the rotation block first")
    p.add_argument("--metric", choices=["chordal", "geodesic"])
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--robots", type=int)
    p.add_argument("--regime", help="sync, delay:D, randdelay:LO:HI or edge")
    p.add_argument("--loss", type=float, help="packet loss probability")
    p.add_argument("--mass", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--eps-d", type=float, dest="eps_d")
    p.add_argument("--t0", type=float)
    p.add_argument("--mass-mode", choices=["const", "state"], dest="mass_mode")
    p.add_argument("--lam", type=float, help="absolute LM regularizer")
    p.add_argument("--coadjoint", choices=["full", "pose"])
    p.add_argument("--no-predict", action="store_false", dest="predict")
    p.add_argument("--alpha", type=float, help="DJ step scale")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--reference-cost", type=float, dest="reference_cost")
    p.add_argument("--delta", type=float, help="performance-profile tolerance")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", metavar="FILE", help="key = value file; flags override it")
    p.add_argument("--sweep", type=int, metavar="N", help="run seeds seed..seed+N-1")
    p.add_argument("--plot", action="store_true")
    return p


def config_from_args(argv: Sequence[str] | None = None) -> tuple[ExperimentConfig, int]:
    ns = vars(build_parser().parse_args(argv))
    merged: dict[str, object] = {}
    preset = ns.pop("preset", None)
    config = ns.pop("config", None)
    sweep = int(ns.pop("sweep", 0))
    file_kv = read_kv_file(config) if config else {}
    preset = file_kv.pop("preset", preset) if preset is None else preset
    if preset is not None:
        merged.update(PRESETS[preset])
    merged.update(file_kv)
    if "dataset" in ns or "dataset" in file_kv:
        merged.setdefault("generate", None)
        if "dataset" in ns:
            merged["generate"] = None
    merged.update(ns)
    merged.setdefault("out", os.environ.get(OUT_ENV, "runs"))
    return ExperimentConfig.from_mapping(merged), sweep


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg, sweep = config_from_args(argv)
        if sweep:
            base = Path(cfg.out)
            gaps = []
            for s in range(cfg.seed, cfg.seed + sweep):
                summ, _ = run_experiment(replace(cfg, seed=s, out=str(base / f"seed_{s:03d}")))
                gaps.append(summ["gap"])
                print(f"seed {s}: final_cost = {summ['final_cost']:.6g}  gap = {summ['gap']:.3e}")
            write_summary({"seeds": sweep, "mean_gap": float(np.mean(gaps)),
                           "median_gap": float(np.median(gaps)), "max_gap": float(np.max(gaps))},
                          base / "sweep.txt")
        else:
            summ, _ = run_experiment(cfg)
            for k in ("solver", "regime", "final_cost", "reference_cost", "gap", "auc"):
                print(f"{k} = {summ[k]}")
            if summ["diverged"]:
                print(f"cord-bench: error: run diverged at iteration {summ['iters']}",
                      file=sys.stderr)
                return 1
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"cord-bench: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
