"""Offline dataset collection: a random half and a half from a trained End-to-End policy."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..config import ExperimentConfig, dump_config
from ..core import AFAEnv, FeatureMask, JointAction, TrajectoryRecord
from ..persistence import check_versions, load_checkpoint, write_dataset
from ..policy import ActorCritic, policy_from_architecture, sample_actions
from . import runtime

log = logging.getLogger(__name__)

# (observation, mask, step) -> (control, acquisition bits)
Chooser = Callable[[np.ndarray, np.ndarray, int], tuple[int, np.ndarray]]


class CollectionError(RuntimeError):
    pass


def rollout(env: AFAEnv, choose: Chooser, seed: int, policy_id: str) -> TrajectoryRecord:
    """Run one episode; the stored observations are full, the masks are what the agent saw."""
    desc = env.descriptor
    obs = env.reset(seed=seed)
    fulls, masks, controls, acqs, rewards, costs = [], [], [], [], [], []
    terminal = False
    for t in range(desc.max_steps):
        fulls.append(obs.full)
        masks.append(obs.mask)
        control, bits = choose(obs.observed, obs.mask, t)
        result = env.step(JointAction(int(control), FeatureMask(np.asarray(bits, dtype=bool))))
        controls.append(control)
        acqs.append(bits)
        rewards.append(result.reward)
        costs.append(result.cost)
        obs = result.obs
        if result.terminal:
            terminal = True
            break
    return TrajectoryRecord(np.stack(fulls), np.stack(masks), np.array(controls), np.stack(acqs),
                            np.array(rewards), np.array(costs), terminal_flag=terminal, policy_id=policy_id)


def random_chooser(n_control: int, n_features: int, acq_prob: float, rng: np.random.Generator) -> Chooser:
    def choose(observed, mask, t):
        return int(rng.integers(n_control)), rng.random(n_features) < acq_prob

    return choose


def policy_chooser(policy: ActorCritic, fill_value: float, generator: torch.Generator) -> Chooser:
    """Stochastic End-to-End policy acting on imputed observations."""
    state = {"h": None}

    @torch.no_grad()
    def choose(observed, mask, t):
        if t == 0:
            state["h"] = policy.initial_state(1)
        x = torch.from_numpy(np.where(mask, observed, np.float32(fill_value))).unsqueeze(0)
        sample = sample_actions(policy(x, state["h"]), generator)
        state["h"] = sample.state
        return int(sample.control[0]), sample.acquisition[0].numpy()

    return choose


def load_collection_policy(path: str | Path, versions: dict) -> tuple[ActorCritic, str]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "policy" or ckpt.meta.get("input") != "end_to_end":
        raise CollectionError(f"{path} is not an End-to-End policy checkpoint")
    check_versions(versions, ckpt.meta.get("versions", {}), what=f"policy checkpoint {path}")
    policy = policy_from_architecture(ckpt.meta["architecture"])
    policy.load_state_dict(ckpt.state_dict())
    policy.eval()
    return policy, f"policy:{ckpt.digest[:16]}"


def collect_dataset(cfg: ExperimentConfig, out_dir: str | Path,
                    policy_path: Optional[str | Path] = None) -> dict[str, Path]:
    """Write ``train/`` and ``test/`` dataset directories under ``out_dir``."""
    out_dir = Path(out_dir)
    policy_path = policy_path or cfg.data.collection_policy
    desc = runtime.descriptor(cfg)
    dyn = runtime.dynamics(cfg)
    versions = runtime.env_versions(cfg, dyn)
    policy = None
    policy_id = "random"
    if policy_path is not None:
        policy, policy_id = load_collection_policy(policy_path, versions)
    elif cfg.data.random_fraction < 1.0 and not cfg.data.allow_random_fallback:
        raise CollectionError(
            "the non-random half needs data.collection_policy (an End-to-End checkpoint); "
            "set data.allow_random_fallback=true to collect with the random policy only"
        )
    fill = runtime.default_fill(cfg.env.name)
    env = runtime.make_envs(cfg, 1, [0], dyn=dyn)[0]
    sizes = {"train": cfg.data.n_train, "test": cfg.data.n_test}
    seeds = runtime.spawn_seeds(cfg.master_seed, sum(sizes.values()), runtime.STREAM_COLLECT)
    paths = {}
    offset = 0
    for split, n in sizes.items():
        n_random = int(round(n * cfg.data.random_fraction)) if policy is not None else n
        records = []
        for i in range(n):
            seed = seeds[offset + i]
            if i < n_random:
                rng = np.random.default_rng([seed, 1])
                choose = random_chooser(desc.n_control_actions, desc.n_features, cfg.data.random_acq_prob, rng)
                pid = "random"
            else:
                choose = policy_chooser(policy, fill, torch.Generator().manual_seed(seed))
                pid = policy_id
            rec = rollout(env, choose, seed, pid)
            rec.validate(desc, env.cost_model)
            records.append(rec)
        offset += n
        meta = {
            "split": split,
            "versions": versions,
            "config_hash": cfg.config_hash,
            "master_seed": cfg.master_seed,
            "unit_cost": cfg.cost.unit_cost,
            "policies": sorted({r.policy_id for r in records}),
            "n_random": n_random,
        }
        paths[split] = write_dataset(out_dir / split, records, desc.obs_shape, desc.n_features, meta)
        log.info("collected %s split: %d trajectories (%d random)", split, n, n_random)
    dump_config(cfg, out_dir / "config.yaml")
    return paths
