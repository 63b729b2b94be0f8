"""CORD vs. block-Jacobi under constant delays on the synthetic grid world.

For each delay: tune the DJ step scale on a held-out seed, then run both
solvers (and CORD without prediction) on every seed. Writes per-run final
costs to ``delay_sweep.csv`` and a performance-profile plot per delay.
"""
from __future__ import annotations

import argparse
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cord.bench import RunRecord, performance_profile, profile_auc, reference_cost
from cord.dist import NetConfig, Solver, run_distributed
from cord.dynamics import DynParams
from cord.graph import generate_grid_world
from cord.objective import Metric


@dataclass
class SweepConfig:
    delays: tuple[int, ...] = (3, 7, 10)
    dts: dict[int, float] = field(default_factory=lambda: {3: 0.12, 7: 0.075, 10: 0.05})
    mass: float = 0.45
    damping: float = 5.0
    seeds: int = 20
    tune_seed: int = 1000
    alphas: tuple[float, ...] = (0.45, 0.4, 0.3, 0.2, 0.1, 0.05)
    iters: int = 1000
    delta: float = 1e-3
    out: Path = Path("runs/delay_sweep")


def trace(sp, cfg: SweepConfig, delay: int, solver: Solver, alpha=0.0, predict=True):
    params = DynParams(m=cfg.mass, d=cfg.damping, dt=cfg.dts[delay])
    with np.errstate(all="ignore"):
        res = run_distributed(sp.graph, sp.partition, Metric.CHORDAL, params,
                              NetConfig.parse(f"delay:{delay}"), cfg.iters, solver=solver,
                              alpha=alpha, predict=predict)
    c = res.costs
    return np.where(np.isfinite(c), c, np.inf)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--out", type=Path, default=Path("runs/delay_sweep"))
    a = ap.parse_args()
    cfg = SweepConfig(seeds=a.seeds, iters=a.iters, out=a.out)
    cfg.out.mkdir(parents=True, exist_ok=True)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    problems = [generate_grid_world(robots=4, side=5, seed=s) for s in range(cfg.seeds)]
    c_star = [reference_cost(sp.graph, Metric.CHORDAL) for sp in problems]
    held_out = generate_grid_world(robots=4, side=5, seed=cfg.tune_seed)
    rows = []
    for delay in cfg.delays:
        alpha = min(cfg.alphas, key=lambda al: trace(held_out, cfg, delay, Solver.DJ, al)[-1])
        runs = {"cord": [], "dj": [], "cord-nopred": []}
        for s, (sp, cs) in enumerate(zip(problems, c_star)):
            for name, kw in (("cord", dict(solver=Solver.CORD)),
                             ("dj", dict(solver=Solver.DJ, alpha=alpha)),
                             ("cord-nopred", dict(solver=Solver.CORD, predict=False))):
                c = trace(sp, cfg, delay, **kw)
                runs[name].append(RunRecord(c[0], cs, c))
                rows.append(dict(delay=delay, seed=s, solver=name, alpha=alpha if name == "dj" else "",
                                 final_cost=c[-1], gap=(c[-1] - cs) / cs))
            print(f"delay {delay} seed {s}: cord {runs['cord'][-1].costs[-1]:.6g} "
                  f"dj {runs['dj'][-1].costs[-1]:.6g}", flush=True)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, rr in runs.items():
            pts = performance_profile(rr, cfg.delta)
            ax.plot([p.k for p in pts], [p.fraction for p in pts],
                    label=f"{name} (AUC {profile_auc(pts):.0f})")
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"fraction solved (delta={cfg.delta:g})")
        ax.set_title(f"delay {delay}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(cfg.out / f"profile_delay{delay}.png", dpi=120)
        plt.close(fig)
    with open(cfg.out / "delay_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
