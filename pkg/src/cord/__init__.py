"""Distributed pose-graph optimization as damped rigid-body dynamics on SE(3)^N."""
from .lie import Pose, exp_se3, log_se3
from .objective import Metric, total_cost
from .dynamics import DynParams, MassMode, Coadjoint
from .dist import NetConfig, run_distributed

__all__ = ["Pose", "exp_se3", "log_se3", "Metric", "total_cost", "DynParams", "MassMode",
           "Coadjoint", "NetConfig", "run_distributed"]
