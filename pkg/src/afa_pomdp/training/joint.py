"""Policy training on top of a frozen representation (or End-to-End).

Workers run in lockstep: every worker advances one environment step per
iteration, the rollouts are stacked into ``[T, B]`` tensors and a single
optimizer step applies the summed actor-critic loss.  Updates are therefore
serialized and the whole run is a deterministic function of the master seed.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..config import ExperimentConfig, dump_config
from ..core import AFAEnv, CostModel, EnvDescriptor, FeatureMask, JointAction, MaskedObservation
from ..persistence import Checkpoint, check_versions, load_checkpoint, save_checkpoint
from ..policy import ActorCritic, a3c_loss, policy_from_architecture, sample_actions
from ..representation.models import VAEModel
from . import runtime
from .vae import load_vae

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "env_steps",
    "updates",
    "mean_task_reward",
    "mean_cost_adjusted_return",
    "mean_episodic_acquisitions",
    "discharge_rate",
    "mortality_rate",
    "wall_seconds",
)


@dataclass
class Transition:
    """What one lockstep iteration saves for the update, batched over workers."""

    belief: torch.Tensor  # [B, *features], input to both policies
    acquisition: torch.Tensor  # bool [B, n_features]
    control: torch.Tensor  # long [B]
    reward: torch.Tensor  # [B]
    cost: torch.Tensor  # [B]
    terminal: torch.Tensor  # bool [B]


@dataclass
class Rollout:
    transitions: list[Transition]
    log_probs: torch.Tensor  # [T, B]
    values: torch.Tensor  # [T, B]
    entropies: torch.Tensor  # [T, B]
    bootstrap: torch.Tensor  # [B]

    def stacked(self, name: str) -> torch.Tensor:
        return torch.stack([getattr(t, name) for t in self.transitions])


@dataclass
class EpisodeStats:
    task_reward: float
    cost_adjusted_return: float
    acquisitions: int
    length: int
    outcome: str


def _stack_obs(obs: list[MaskedObservation]) -> tuple[torch.Tensor, torch.Tensor]:
    observed = torch.from_numpy(np.stack([o.observed for o in obs]))
    mask = torch.from_numpy(np.stack([o.mask for o in obs]))
    return observed, mask


def _outcome(info) -> str:
    if "outcome" in info:
        return str(info["outcome"])
    return "success" if info.get("success") else "none"


class Workers:
    """A batch of environments advanced together under one policy."""

    def __init__(self, envs: list[AFAEnv], inputs: runtime.PolicyInputs, policy: ActorCritic,
                 generator: torch.Generator, random_acq_prob: Optional[float] = None,
                 reset_seeds: Optional[list[int]] = None):
        self.envs = envs
        self.inputs = inputs
        self.policy = policy
        self.generator = generator
        self.random_acq_prob = random_acq_prob
        self.desc: EnvDescriptor = envs[0].descriptor
        B = len(envs)
        obs = [env.reset(seed=None if reset_seeds is None else reset_seeds[i]) for i, env in enumerate(envs)]
        self.prev_action = torch.zeros(B, self.desc.action_encoding_size)
        self.fstate = inputs.initial_state(B)
        self.fstate, self.features = inputs.step(self.fstate, *_stack_obs(obs), self.prev_action)
        self.pstate = policy.initial_state(B)
        self._acc = np.zeros((B, 3))  # task reward, cost-adjusted return, acquisitions
        self._len = np.zeros(B, dtype=np.int64)
        self.finished: list[EpisodeStats] = []

    @property
    def size(self) -> int:
        return len(self.envs)

    def _act_and_step(self, greedy: bool, active: Optional[np.ndarray] = None):
        out = self.policy(self.features, self.pstate)
        s = sample_actions(out, self.generator, greedy, self.random_acq_prob)
        controls = s.control.tolist()
        acq = s.acquisition.numpy()
        B = self.size
        rewards = np.zeros(B)
        costs = np.zeros(B)
        dones = np.zeros(B, dtype=bool)
        obs = []
        for i, env in enumerate(self.envs):
            if active is not None and not active[i]:
                obs.append(self._last_obs[i])
                continue
            res = env.step(JointAction(controls[i], FeatureMask(acq[i])))
            rewards[i], costs[i], dones[i] = res.reward, res.cost, res.terminal
            self._acc[i] += (res.reward, res.reward - res.cost, int(acq[i].sum()))
            self._len[i] += 1
            if res.terminal:
                a = self._acc[i]
                self.finished.append(EpisodeStats(float(a[0]), float(a[1]), int(a[2]), int(self._len[i]),
                                                  _outcome(res.info)))
                self._acc[i] = 0.0
                self._len[i] = 0
                obs.append(env.reset() if active is None else res.obs)
            else:
                obs.append(res.obs)
        self._last_obs = obs
        done_t = torch.from_numpy(dones)
        prev = torch.zeros_like(self.prev_action)
        prev[torch.arange(B), s.control] = 1.0
        prev[:, self.desc.n_control_actions:] = s.acquisition.to(prev.dtype)
        prev[done_t] = 0.0
        transition = Transition(self.features, s.acquisition, s.control, torch.from_numpy(rewards).float(),
                                torch.from_numpy(costs).float(), done_t)
        self.prev_action = prev
        self.fstate = self.inputs.reset_rows(self.fstate, done_t)
        self.fstate, self.features = self.inputs.step(self.fstate, *_stack_obs(obs), prev)
        keep = (~done_t).float().unsqueeze(-1)
        h, c = s.state
        self.pstate = (h * keep, c * keep)
        return s, transition

    def rollout(self, length: int) -> Rollout:
        self.pstate = tuple(x.detach() for x in self.pstate)
        transitions, log_probs, values, entropies = [], [], [], []
        for _ in range(length):
            s, tr = self._act_and_step(greedy=False)
            transitions.append(tr)
            log_probs.append(s.log_prob)
            values.append(s.value)
            entropies.append(s.entropy)
        with torch.no_grad():
            bootstrap = self.policy(self.features, self.pstate).value
        return Rollout(transitions, torch.stack(log_probs), torch.stack(values), torch.stack(entropies), bootstrap)

    @torch.no_grad()
    def run_episodes(self, greedy: bool = True) -> list[EpisodeStats]:
        """Play exactly one episode per worker (evaluation)."""
        active = np.ones(self.size, dtype=bool)
        self._last_obs = [None] * self.size
        self.finished = []
        for _ in range(self.desc.max_steps):
            _, tr = self._act_and_step(greedy, active)
            active &= ~tr.terminal.numpy()
            if not active.any():
                break
        return list(self.finished)


def summarize(episodes: list[EpisodeStats], sepsis: bool) -> dict[str, float]:
    n = len(episodes)
    row = {
        "mean_task_reward": float(np.mean([e.task_reward for e in episodes])),
        "mean_cost_adjusted_return": float(np.mean([e.cost_adjusted_return for e in episodes])),
        "mean_episodic_acquisitions": float(np.mean([e.acquisitions for e in episodes])),
        "discharge_rate": math.nan,
        "mortality_rate": math.nan,
    }
    if sepsis:
        row["discharge_rate"] = sum(e.outcome == "discharge" for e in episodes) / n
        row["mortality_rate"] = sum(e.outcome == "mortality" for e in episodes) / n
    return row


def evaluate_policy(cfg: ExperimentConfig, policy: ActorCritic, inputs: runtime.PolicyInputs,
                    episodes: int, seed: int, unit_cost: Optional[float] = None,
                    random_acq_prob: Optional[float] = None, greedy: bool = True,
                    dyn=None) -> tuple[dict[str, float], list[EpisodeStats]]:
    """Greedy evaluation: ``episodes`` independent episodes played in one lockstep batch."""
    seeds = runtime.spawn_seeds(seed, episodes + 1, runtime.STREAM_EVAL)
    cm = runtime.cost_model(cfg, unit_cost)
    envs = runtime.make_envs(cfg, episodes, seeds[:episodes], cm=cm, dyn=dyn)
    was_training = policy.training
    policy.eval()
    with torch.no_grad():
        workers = Workers(envs, inputs, policy, torch.Generator().manual_seed(seeds[-1]), random_acq_prob)
        stats = workers.run_episodes(greedy=greedy)
    policy.train(was_training)
    return summarize(stats, cfg.env.name == "sepsis"), stats


def active_unit_cost(cfg: ExperimentConfig, env_steps: int, unit_cost: Optional[float] = None) -> float:
    cost = cfg.cost.unit_cost if unit_cost is None else unit_cost
    for start, value in sorted(cfg.rl.cost_schedule or []):
        if env_steps >= start:
            cost = value
    return cost


@dataclass
class JointResult:
    policy: ActorCritic
    inputs: runtime.PolicyInputs
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    # (env_steps, acquisition cost consumed in training so far, eval row) at each evaluation point
    cost_trace: list[tuple[int, float, dict]] = field(default_factory=list)

    def converged(self, column: str, fraction: float = 0.2) -> float:
        """Average of ``column`` over the last ``fraction`` of evaluation points."""
        values = [r[column] for r in self.metrics]
        k = max(1, int(math.ceil(len(values) * fraction)))
        return float(np.mean(values[-k:]))


def resolve_inputs(cfg: ExperimentConfig, vae: Optional[VAEModel | str | Path],
                   vae_meta: Optional[dict] = None) -> tuple[runtime.PolicyInputs, dict]:
    """Build the feature pathway and check that it fits the environment."""
    desc = runtime.descriptor(cfg)
    fill = runtime.default_fill(cfg.env.name)
    provenance: dict = {"vae_sha256": None, "vae_dataset_version": None}
    if cfg.rl.input == "end_to_end":
        return runtime.PolicyInputs(fill, None), provenance
    if vae is None:
        raise runtime.StartupError("belief input needs a VAE checkpoint (rl.checkpoint / --vae)")
    if isinstance(vae, (str, Path)):
        model, ckpt = load_vae(vae)
        vae_meta = ckpt.meta
    else:
        model = vae
    if vae_meta is not None:
        check_versions(runtime.env_versions(cfg), vae_meta.get("versions", {}), what="VAE checkpoint")
        provenance = {"vae_sha256": vae_meta.get("tensor_sha256"),
                      "vae_dataset_version": vae_meta.get("dataset_version")}
        fill = vae_meta.get("fill_value", fill)
    if tuple(model.obs_shape) != tuple(desc.obs_shape) or model.action_dim != desc.action_encoding_size:
        raise runtime.StartupError(
            f"VAE expects observations {tuple(model.obs_shape)} and actions of size {model.action_dim}; "
            f"environment {cfg.env.name} has {tuple(desc.obs_shape)} and {desc.action_encoding_size}"
        )
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return runtime.PolicyInputs(fill, model), provenance


def train_joint(cfg: ExperimentConfig, vae: Optional[VAEModel | str | Path] = None,
                out_dir: Optional[str | Path] = None, seed: Optional[int] = None,
                unit_cost: Optional[float] = None, random_acq_prob: Optional[float] = None,
                vae_meta: Optional[dict] = None,
                on_transition: Optional[Callable[[Transition], None]] = None) -> JointResult:
    """Actor-critic training of the task and acquisition heads on cost-adjusted returns."""
    if not cfg.rl.serialized_updates:
        raise runtime.StartupError("only serialized updates are supported (rl.serialized_updates=true)")
    seed = cfg.master_seed if seed is None else seed
    rap = cfg.rl.random_acq_prob if random_acq_prob is None else random_acq_prob
    desc = runtime.descriptor(cfg)
    dyn = runtime.dynamics(cfg)
    versions = runtime.env_versions(cfg, dyn)
    inputs, provenance = resolve_inputs(cfg, vae, vae_meta)
    (init_seed,) = runtime.spawn_seeds(seed, 1, runtime.STREAM_POLICY_INIT)
    (sample_seed,) = runtime.spawn_seeds(seed, 1, runtime.STREAM_RL_SAMPLE)
    env_seeds = runtime.spawn_seeds(seed, cfg.rl.workers, runtime.STREAM_RL_ENV)
    eval_seed = runtime.spawn_seeds(seed, 1, runtime.STREAM_EVAL)[0]

    policy = runtime.build_policy(cfg, desc, inputs.feature_shape(desc), cfg.rl.input == "end_to_end", init_seed)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.rl.learning_rate)
    cost = active_unit_cost(cfg, 0, unit_cost)
    envs = runtime.make_envs(cfg, cfg.rl.workers, env_seeds, cm=runtime.cost_model(cfg, cost), dyn=dyn)
    workers = Workers(envs, inputs, policy, torch.Generator().manual_seed(sample_seed), rap)
    cm = CostModel(unit_cost=cost, discount=cfg.cost.discount)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()

    result = JointResult(policy, inputs)
    start = time.perf_counter()
    env_steps = 0
    updates = 0
    consumed = 0.0
    next_eval = 0
    heartbeat = time.perf_counter()

    def record_eval():
        row, _ = evaluate_policy(cfg, policy, inputs, cfg.rl.eval_episodes, eval_seed, cm.unit_cost, rap, dyn=dyn)
        row = {"env_steps": env_steps, "updates": updates, **row,
               "wall_seconds": round(time.perf_counter() - start, 3)}
        result.metrics.append(row)
        result.cost_trace.append((env_steps, consumed, row))
        if writer is not None:
            writer.writerow(row)
            fh.flush()

    try:
        while True:
            if env_steps >= next_eval:
                record_eval()
                next_eval += cfg.rl.eval_interval
            if env_steps >= cfg.rl.total_env_steps:
                break
            new_cost = active_unit_cost(cfg, env_steps, unit_cost)
            if new_cost != cm.unit_cost:
                cm = CostModel(unit_cost=new_cost, discount=cfg.cost.discount)
                for env in envs:
                    env.cost_model = cm
            ro = workers.rollout(cfg.rl.rollout_length)
            if on_transition is not None:
                for tr in ro.transitions:
                    on_transition(tr)
            loss = a3c_loss(ro.log_probs, ro.values, ro.entropies, ro.stacked("reward"), ro.stacked("cost"),
                            ro.stacked("terminal").float(), ro.bootstrap, cm,
                            value_coef=cfg.rl.value_coef, entropy_coef=cfg.rl.entropy_coef)
            consumed += float(ro.stacked("cost").double().sum())
            opt.zero_grad()
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.rl.max_grad_norm)
            opt.step()
            updates += 1
            env_steps += cfg.rl.rollout_length * workers.size
            if time.perf_counter() - heartbeat > 30:
                heartbeat = time.perf_counter()
                log.info("env_steps=%d updates=%d last eval reward=%.3f", env_steps, updates,
                         result.metrics[-1]["mean_task_reward"])
    finally:
        if fh is not None:
            fh.close()

    if out is not None:
        meta = policy_meta(cfg, policy, versions, provenance, rap, cm.unit_cost, env_steps, seed)
        result.checkpoint = out / "policy.safetensors"
        save_checkpoint(result.checkpoint, policy, meta)
    return result


def policy_meta(cfg: ExperimentConfig, policy: ActorCritic, versions: dict, provenance: dict,
                random_acq_prob: Optional[float], unit_cost: float, env_steps: int, seed: int) -> dict:
    return {
        "kind": "policy",
        "input": cfg.rl.input,
        "architecture": policy.architecture(),
        "random_acq_prob": random_acq_prob,
        "unit_cost": unit_cost,
        "env_steps": env_steps,
        "seed": seed,
        "versions": versions,
        **provenance,
        "config": cfg.snapshot(),
        "config_hash": cfg.config_hash,
    }


def load_policy(path: str | Path, cfg: ExperimentConfig) -> tuple[ActorCritic, Checkpoint]:
    """Load a policy checkpoint, refusing one built against another environment version."""
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "policy":
        raise runtime.StartupError(f"{path} is not a policy checkpoint")
    check_versions(runtime.env_versions(cfg), ckpt.meta.get("versions", {}), what=f"policy checkpoint {path}")
    policy = policy_from_architecture(ckpt.meta["architecture"])
    policy.load_state_dict(ckpt.state_dict())
    policy.eval()
    return policy, ckpt
