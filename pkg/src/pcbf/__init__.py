"""Dual-barrier CBF safety filtering for a 2D avoidance task, with auditable data campaigns."""

from __future__ import annotations

from .env import EnvConfig, SceneType, TerminationReason, Toy2DAvoidanceEnv, Toy2DAvoidanceVecEnv
from .errors import PCBFError
from .pipeline import make_policy, run_episode, wrap
from .safety import BarrierParams, DualBarrierCBF, PassThroughFilter, SafetyState, filter_action

__version__ = "0.1.0"

__all__ = [
    "BarrierParams", "DualBarrierCBF", "EnvConfig", "PCBFError", "PassThroughFilter", "SafetyState",
    "SceneType", "TerminationReason", "Toy2DAvoidanceEnv", "Toy2DAvoidanceVecEnv", "filter_action",
    "make_policy", "run_episode", "wrap",
]
