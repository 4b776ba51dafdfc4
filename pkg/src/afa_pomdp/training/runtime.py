"""Shared plumbing: environment construction, versions, seeding, policy inputs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..config import POLICY_INPUT_PROJ, ExperimentConfig
from ..core import AFAEnv, CostModel, EnvDescriptor
from ..envs import make_env
from ..envs.bouncing_ball import make_descriptor as ball_descriptor
from ..envs.sepsis import SepsisDynamics, dynamics_to_doc, load_dynamics
from ..envs.sepsis import make_descriptor as sepsis_descriptor
from ..policy import ActorCritic
from ..representation.imputer import ImputerConfig
from ..representation.models import FilterState, VAEModel


class StartupError(ValueError):
    """Components disagree about shapes or versions before any work starts."""


def cost_model(cfg: ExperimentConfig, unit_cost: Optional[float] = None) -> CostModel:
    return CostModel(unit_cost=cfg.cost.unit_cost if unit_cost is None else unit_cost, discount=cfg.cost.discount)


def descriptor(cfg: ExperimentConfig) -> EnvDescriptor:
    return sepsis_descriptor() if cfg.env.name == "sepsis" else ball_descriptor()


def dynamics(cfg: ExperimentConfig) -> Optional[SepsisDynamics]:
    return load_dynamics(cfg.env.dynamics_path) if cfg.env.name == "sepsis" else None


def env_versions(cfg: ExperimentConfig, dyn: Optional[SepsisDynamics] = None) -> dict[str, Optional[str]]:
    """Identity of the environment an artifact was produced against."""
    if cfg.env.name != "sepsis":
        return {"env": cfg.env.name, "env_version": "bouncing-ball-v1", "dynamics_sha256": None}
    dyn = dyn or dynamics(cfg)
    doc = json.dumps(dynamics_to_doc(dyn), sort_keys=True).encode()
    return {"env": "sepsis", "env_version": dyn.version, "dynamics_sha256": hashlib.sha256(doc).hexdigest()}


def make_envs(cfg: ExperimentConfig, n: int, seeds: list[int], cm: Optional[CostModel] = None,
              dyn: Optional[SepsisDynamics] = None) -> list[AFAEnv]:
    cm = cm or cost_model(cfg)
    if cfg.env.name == "sepsis":
        dyn = dyn or dynamics(cfg)
    return [make_env(cfg.env.name, cost_model=cm, seed=s, dynamics=dyn) for s in seeds[:n]]


def spawn_seeds(master_seed: int, n: int, *path: int) -> list[int]:
    """``n`` independent 63-bit seeds derived from the master seed and a stream path."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(path))
    return [int(s.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(n)]


# stream identifiers for spawn_seeds
STREAM_COLLECT, STREAM_VAE, STREAM_RL_ENV, STREAM_RL_SAMPLE, STREAM_EVAL, STREAM_POLICY_INIT = range(6)


@dataclass
class PolicyInputs:
    """Turns masked observations into policy features for a batch of lockstep workers.

    ``vae=None`` is the End-to-End pathway (the imputed observation itself);
    otherwise features are the belief, i.e. the filtering-posterior mean of the
    frozen VAE.
    """

    fill_value: float
    vae: Optional[VAEModel] = None

    @property
    def belief(self) -> bool:
        return self.vae is not None

    def feature_shape(self, desc: EnvDescriptor) -> tuple[int, ...]:
        return (self.vae.latent_dim,) if self.vae is not None else tuple(desc.obs_shape)

    def initial_state(self, batch: int) -> Optional[FilterState]:
        return self.vae.initial_state(batch) if self.vae is not None else None

    @torch.no_grad()
    def step(self, state: Optional[FilterState], observed: torch.Tensor, mask: torch.Tensor,
             prev_action: torch.Tensor) -> tuple[Optional[FilterState], torch.Tensor]:
        x = torch.where(mask, observed, torch.full_like(observed, self.fill_value))
        if self.vae is None:
            return state, x
        state, mean, _ = self.vae.filter_step(state, x, prev_action)
        return state, mean

    def reset_rows(self, state: Optional[FilterState], done: torch.Tensor) -> Optional[FilterState]:
        if state is None or state.hidden is None:
            return state
        keep = (~done).to(state.hidden[0].dtype).unsqueeze(-1)
        return FilterState(hidden=tuple(h * keep for h in state.hidden), step=state.step)


def default_fill(env_name: str) -> float:
    return ImputerConfig.for_env(env_name).fill_value


def build_policy(cfg: ExperimentConfig, desc: EnvDescriptor, feature_shape: tuple[int, ...], end_to_end: bool,
                 seed: int) -> ActorCritic:
    if end_to_end:
        if cfg.env.name == "bouncing_ball":
            enc, sizes, proj = "image", (16, 32, 1024), None
        else:
            enc, sizes, proj = "vector", (32, 64, 32), None
    else:
        enc, sizes, proj = None, (), POLICY_INPUT_PROJ[cfg.env.name]
    return ActorCritic(feature_shape, desc.n_control_actions, desc.n_features, hidden_size=cfg.policy_hidden,
                       input_proj=proj, encoder=enc, encoder_sizes=sizes, seed=seed)
