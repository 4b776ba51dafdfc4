from typing import Optional

from ..core import AFAEnv, CostModel
from .bouncing_ball import BallConfig, BouncingBallEnv
from .sepsis import SepsisDynamics, SepsisEnv, load_dynamics

ENV_NAMES = ("bouncing_ball", "sepsis")


def make_env(
    name: str,
    cost_model: Optional[CostModel] = None,
    seed: Optional[int] = None,
    dynamics: Optional[SepsisDynamics] = None,
    ball: Optional[BallConfig] = None,
) -> AFAEnv:
    if name == "bouncing_ball":
        return BouncingBallEnv(ball or BallConfig(), cost_model=cost_model, seed=seed)
    if name == "sepsis":
        return SepsisEnv(dynamics or load_dynamics(), cost_model=cost_model, seed=seed)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


__all__ = ["BallConfig", "BouncingBallEnv", "SepsisEnv", "ENV_NAMES", "load_dynamics", "make_env"]
