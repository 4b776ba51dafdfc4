"""BouncingBall+ navigation task on a 32x32 binary frame.

Coordinates are ``(x, y)`` in pixels with ``y`` growing downwards, so the
frame is indexed ``frame[y, x]``.  The four acquirable features are the
16x16 quadrants: upper-left, upper-right, lower-left, lower-right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import (
    AFAEnv,
    ContractViolation,
    CostModel,
    EnvDescriptor,
    JointAction,
    MaskedObservation,
    StepResult,
    acquisition_cost,
)

# control index -> (dvx, dvy)
VELOCITY_ACTIONS = (
    (-0.5, 0.0),  # leftwards
    (0.5, 0.0),  # rightwards
    (0.0, 0.5),  # downwards
    (0.0, -0.5),  # upwards
    (0.0, 0.0),  # null
)
NULL_ACTION = 4


@dataclass(frozen=True)
class BallConfig:
    box_size: int = 32
    ball_radius: int = 2
    target: tuple[float, float] = (5.0, 25.0)
    target_threshold: float = 1.0
    speed_init: float = 4.0
    velocity_delta: float = 0.5
    max_speed: float = 5.0
    max_steps: int = 50
    reward_success: float = 1.0

    def __post_init__(self):
        if min(self.box_size, self.ball_radius, self.speed_init, self.max_steps) <= 0:
            raise ContractViolation("ball configuration values must be positive")
        if not all(0 <= c < self.box_size for c in self.target):
            raise ContractViolation("target must lie inside the box")

    @property
    def lo(self) -> float:
        return float(self.ball_radius)

    @property
    def hi(self) -> float:
        return float(self.box_size - 1 - self.ball_radius)


@dataclass(frozen=True)
class BallState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    step_count: int = 0


def quadrant_groups(box_size: int = 32) -> tuple[tuple[int, ...], ...]:
    half = box_size // 2
    idx = np.arange(box_size * box_size).reshape(box_size, box_size)
    blocks = (
        idx[:half, :half],
        idx[:half, half:],
        idx[half:, :half],
        idx[half:, half:],
    )
    return tuple(tuple(int(i) for i in b.reshape(-1)) for b in blocks)


def make_descriptor(cfg: BallConfig = BallConfig()) -> EnvDescriptor:
    return EnvDescriptor(
        name="bouncing_ball",
        n_features=4,
        obs_shape=(cfg.box_size, cfg.box_size),
        n_control_actions=len(VELOCITY_ACTIONS),
        max_steps=cfg.max_steps,
        feature_group_map=quadrant_groups(cfg.box_size),
    )


def render(state: BallState, cfg: BallConfig = BallConfig()) -> np.ndarray:
    """Binary frame: 1 on pixels within ``ball_radius`` of the centre."""
    x, y = state.position
    rows, cols = np.mgrid[0 : cfg.box_size, 0 : cfg.box_size]
    inside = (rows - y) ** 2 + (cols - x) ** 2 <= cfg.ball_radius**2
    return inside.astype(np.float32)


def _reflect(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    while p < lo or p > hi:
        if p < lo:
            p = 2.0 * lo - p
        else:
            p = 2.0 * hi - p
        v = -v
    return p, v


def advance(state: BallState, control: int, cfg: BallConfig = BallConfig()) -> tuple[BallState, float, bool]:
    """Pure transition: returns ``(next_state, reward, terminal)``."""
    if not 0 <= control < len(VELOCITY_ACTIONS):
        raise ContractViolation(f"control index {control} outside [0, {len(VELOCITY_ACTIONS)})")
    dvx, dvy = VELOCITY_ACTIONS[control]
    vx, vy = state.velocity
    # an update that would exceed the speed cap is discarded, not clamped
    if abs(vx + dvx) <= cfg.max_speed:
        vx += dvx
    if abs(vy + dvy) <= cfg.max_speed:
        vy += dvy
    x, vx = _reflect(state.position[0] + vx, vx, cfg.lo, cfg.hi)
    y, vy = _reflect(state.position[1] + vy, vy, cfg.lo, cfg.hi)
    steps = state.step_count + 1
    nxt = BallState(position=(x, y), velocity=(vx, vy), step_count=steps)
    tx, ty = cfg.target
    if abs(x - tx) <= cfg.target_threshold and abs(y - ty) <= cfg.target_threshold:
        return nxt, cfg.reward_success, True
    return nxt, 0.0, steps >= cfg.max_steps


class BouncingBallEnv(AFAEnv):
    version = "bouncing-ball-v1"

    def __init__(self, cfg: BallConfig = BallConfig(), cost_model: Optional[CostModel] = None, seed: Optional[int] = None):
        super().__init__(cost_model)
        self.cfg = cfg
        self.descriptor = make_descriptor(cfg)
        self.rng = np.random.default_rng(seed)
        self.state: Optional[BallState] = None

    def sample_initial_state(self) -> BallState:
        half = self.cfg.box_size / 2
        # centre uniform over the part of the upper-left quadrant the ball can occupy
        pos = self.rng.uniform(self.cfg.lo, half, size=2)
        while True:
            v = self.rng.uniform(-0.5, 0.5, size=2)
            norm = float(np.hypot(v[0], v[1]))
            if norm > 0.0:
                break
        v = self.cfg.speed_init * v / norm
        return BallState(position=(float(pos[0]), float(pos[1])), velocity=(float(v[0]), float(v[1])))

    def reset(self, seed: Optional[int] = None) -> MaskedObservation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.sample_initial_state()
        self._needs_reset = False
        return self.null_observation(render(self.state, self.cfg))

    def set_state(self, state: BallState) -> None:
        self.state = state
        self._needs_reset = False

    def step(self, action: JointAction) -> StepResult:
        if self._needs_reset or self.state is None:
            raise ContractViolation("step() called before reset()")
        action.validate(self.descriptor)
        self.state, reward, terminal = advance(self.state, int(action.control), self.cfg)
        if terminal:
            self._needs_reset = True
        obs = self.observe(render(self.state, self.cfg), action.acquisition)
        cost = acquisition_cost(action.acquisition, self.cost_model)
        info = {"success": reward > 0}
        return StepResult(obs=obs, reward=reward, cost=cost, terminal=terminal, info=info)


__all__ = [
    "BallConfig",
    "BallState",
    "BouncingBallEnv",
    "NULL_ACTION",
    "VELOCITY_ACTIONS",
    "advance",
    "make_descriptor",
    "quadrant_groups",
    "render",
]
