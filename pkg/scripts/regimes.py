"""One grid-world problem under every communication regime.

Plots the optimality gap per round for synchronous, constant-delay,
random-delay with loss and edge-based exchange.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from cord.bench import optimality_gap, reference_cost
from cord.dist import NetConfig, run_distributed
from cord.dynamics import DynParams
from cord.graph import generate_grid_world
from cord.objective import Metric

REGIMES = {
    "sync": (NetConfig.parse("sync"), DynParams(m=0.7, d=4.0, dt=0.2)),
    "delay:5": (NetConfig.parse("delay:5"), DynParams(m=0.7, d=4.0, dt=0.1)),
    "randdelay:1:10 + 10% loss": (NetConfig.parse("randdelay:1:10", loss_prob=0.1),
                                  DynParams(m=0.7, d=4.0, dt=0.1)),
    "edge": (NetConfig.parse("edge"), DynParams(m=0.7, d=4.0, dt=0.1)),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--metric", choices=["chordal", "geodesic"], default="chordal")
    ap.add_argument("--out", type=Path, default=Path("runs/regimes"))
    a = ap.parse_args()
    a.out.mkdir(parents=True, exist_ok=True)
    metric = Metric(a.metric)
    sp = generate_grid_world(robots=4, side=5, seed=a.seed)
    c_star = reference_cost(sp.graph, metric)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, (net, params) in REGIMES.items():
        with np.errstate(all="ignore"):
            res = run_distributed(sp.graph, sp.partition, metric, params, net, a.iters)
        gap = optimality_gap(res.costs, c_star)
        print(f"{name:28s} final gap {gap[-1]:.3e}  mean packet {res.packet_bytes:.0f} B"
              + ("  (diverged)" if res.diverged else ""))
        ax.semilogy(np.arange(len(gap)), np.maximum(gap, 1e-16), label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("optimality gap")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(a.out / "regimes.png", dpi=120)


if __name__ == "__main__":
    main()
