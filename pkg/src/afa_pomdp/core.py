"""Shared contract for active-feature-acquisition POMDPs.

An environment exposes a joint action space (control index, acquisition
subset).  The acquisition submitted at step ``t`` decides which feature
groups of the observation at ``t + 1`` are revealed; the first observation
of every episode is the null observation.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Optional, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation is called outside its preconditions."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    n_features: int
    obs_shape: tuple[int, ...]
    n_control_actions: int
    max_steps: int
    # acquirable feature index -> raw (flattened) observation indices it reveals
    feature_group_map: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.n_features < 1 or self.max_steps < 1 or self.n_control_actions < 1:
            raise ContractViolation("n_features, n_control_actions and max_steps must be >= 1")
        if len(self.feature_group_map) != self.n_features:
            raise ContractViolation(
                f"feature_group_map has {len(self.feature_group_map)} groups, expected {self.n_features}"
            )
        seen: set[int] = set()
        for group in self.feature_group_map:
            for idx in group:
                if not 0 <= idx < self.obs_size:
                    raise ContractViolation(f"raw index {idx} outside observation of size {self.obs_size}")
                if idx in seen:
                    raise ContractViolation(f"raw index {idx} belongs to more than one feature group")
                seen.add(idx)

    @property
    def obs_size(self) -> int:
        return int(np.prod(self.obs_shape))

    @cached_property
    def always_observed(self) -> np.ndarray:
        """Raw indices outside every feature group (free features)."""
        grouped = np.zeros(self.obs_size, dtype=bool)
        for group in self.feature_group_map:
            grouped[list(group)] = True
        return _frozen(np.flatnonzero(~grouped))

    @cached_property
    def group_indices(self) -> tuple[np.ndarray, ...]:
        return tuple(_frozen(np.asarray(g, dtype=np.int64)) for g in self.feature_group_map)

    @property
    def action_encoding_size(self) -> int:
        return self.n_control_actions + self.n_features


@dataclass(frozen=True, eq=False)
class FeatureMask:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", _frozen(np.asarray(self.bits, dtype=bool).reshape(-1)))

    @classmethod
    def none(cls, n_features: int) -> "FeatureMask":
        return cls(np.zeros(n_features, dtype=bool))

    @classmethod
    def all(cls, n_features: int) -> "FeatureMask":
        return cls(np.ones(n_features, dtype=bool))

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeatureMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class JointAction:
    control: int
    acquisition: FeatureMask

    def validate(self, desc: EnvDescriptor) -> None:
        if not 0 <= int(self.control) < desc.n_control_actions:
            raise ContractViolation(
                f"control index {self.control} outside [0, {desc.n_control_actions})"
            )
        if len(self.acquisition) != desc.n_features:
            raise ContractViolation(
                f"acquisition mask has length {len(self.acquisition)}, expected {desc.n_features}"
            )


@dataclass(frozen=True, eq=False)
class MaskedObservation:
    """``observed`` carries NaN wherever ``mask`` is false."""

    observed: np.ndarray
    mask: np.ndarray
    full: Optional[np.ndarray] = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        observed = np.asarray(self.observed, dtype=np.float32)
        if observed.shape != mask.shape:
            raise ContractViolation(f"observed shape {observed.shape} != mask shape {mask.shape}")
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "observed", _frozen(observed))
        if self.full is not None:
            full = np.asarray(self.full, dtype=np.float32)
            if full.shape != mask.shape:
                raise ContractViolation(f"full shape {full.shape} != mask shape {mask.shape}")
            object.__setattr__(self, "full", _frozen(full))

    @classmethod
    def from_full(cls, full: np.ndarray, mask: np.ndarray, keep_full: bool = True) -> "MaskedObservation":
        full = np.asarray(full, dtype=np.float32)
        mask = np.asarray(mask, dtype=bool).reshape(full.shape)
        observed = np.where(mask, full, np.float32(np.nan)).astype(np.float32)
        return cls(observed=observed, mask=mask, full=full if keep_full else None)


@dataclass(frozen=True)
class StepResult:
    obs: MaskedObservation
    reward: float
    cost: float
    terminal: bool
    info: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CostModel:
    unit_cost: float = 0.01
    discount: float = 0.99
    # per-feature override of unit_cost; None means uniform cost
    feature_costs: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.unit_cost < 0:
            raise ContractViolation("unit_cost must be >= 0")
        if not 0.0 <= self.discount < 1.0:
            raise ContractViolation("discount must lie in [0, 1)")
        if self.feature_costs is not None and any(c < 0 for c in self.feature_costs):
            raise ContractViolation("feature costs must be >= 0")


def acquisition_cost(mask: FeatureMask | np.ndarray, cm: CostModel) -> float:
    bits = mask.bits if isinstance(mask, FeatureMask) else np.asarray(mask, dtype=bool)
    if cm.feature_costs is not None:
        if len(cm.feature_costs) != len(bits):
            raise ContractViolation("feature_costs length does not match the mask")
        return float(np.dot(np.asarray(cm.feature_costs, dtype=np.float64), bits))
    return cm.unit_cost * int(bits.sum())


def expand_mask(mask: FeatureMask | np.ndarray, desc: EnvDescriptor) -> np.ndarray:
    """Flat raw-index mask: selected groups plus every always-observed index."""
    bits = mask.bits if isinstance(mask, FeatureMask) else np.asarray(mask, dtype=bool).reshape(-1)
    if len(bits) != desc.n_features:
        raise ContractViolation(f"mask length {len(bits)} != n_features {desc.n_features}")
    raw = np.zeros(desc.obs_size, dtype=bool)
    raw[desc.always_observed] = True
    for selected, group in zip(bits, desc.group_indices):
        if selected:
            raw[group] = True
    return raw


def discounted_return(rewards: Sequence[float], costs: Sequence[float], cm: CostModel) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if rewards.shape != costs.shape:
        raise ContractViolation("rewards and costs must have equal length")
    out = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = (rewards[t] - costs[t]) + cm.discount * running
        out[t] = running
    return out


def encode_action(control: int, acquisition: np.ndarray, desc: EnvDescriptor) -> np.ndarray:
    """One-hot control followed by the acquisition bits (filter input)."""
    vec = np.zeros(desc.action_encoding_size, dtype=np.float32)
    vec[int(control)] = 1.0
    vec[desc.n_control_actions:] = np.asarray(acquisition, dtype=np.float32)
    return vec


@dataclass(eq=False)
class TrajectoryRecord:
    observations: np.ndarray  # float32 [T, *obs_shape], full features
    masks: np.ndarray  # bool [T, *obs_shape], what the agent saw at each step
    controls: np.ndarray  # int32 [T]
    acquisitions: np.ndarray  # bool [T, n_features]
    rewards: np.ndarray  # float32 [T]
    costs: np.ndarray  # float32 [T]
    terminal_flag: bool
    policy_id: str = "unknown"

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float32)
        self.masks = np.ascontiguousarray(self.masks, dtype=bool)
        self.controls = np.ascontiguousarray(self.controls, dtype=np.int32)
        self.acquisitions = np.ascontiguousarray(self.acquisitions, dtype=bool)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
        self.costs = np.ascontiguousarray(self.costs, dtype=np.float32)
        self.terminal_flag = bool(self.terminal_flag)

    def __len__(self) -> int:
        return len(self.controls)

    def validate(self, desc: EnvDescriptor, cm: Optional[CostModel] = None) -> None:
        T = len(self.controls)
        if T < 1 or T > desc.max_steps:
            raise ContractViolation(f"trajectory length {T} outside [1, {desc.max_steps}]")
        expected = {
            "observations": (T, *desc.obs_shape),
            "masks": (T, *desc.obs_shape),
            "acquisitions": (T, desc.n_features),
            "rewards": (T,),
            "costs": (T,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractViolation(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.controls < 0) or np.any(self.controls >= desc.n_control_actions):
            raise ContractViolation("control index out of range")
        # the acquisition chosen at t filters the observation at t + 1
        raw = np.stack([expand_mask(FeatureMask.none(desc.n_features), desc)]
                       + [expand_mask(a, desc) for a in self.acquisitions[:-1]])
        if not np.array_equal(raw, self.masks.reshape(T, -1)):
            bad = int(np.nonzero(np.any(raw != self.masks.reshape(T, -1), axis=1))[0][0])
            if bad == 0:
                raise ContractViolation("the first observation of a trajectory must be the null observation")
            raise ContractViolation(f"observation mask at step {bad} does not match the acquisition of step {bad - 1}")
        if cm is not None:
            want = np.array([acquisition_cost(a, cm) for a in self.acquisitions], dtype=np.float32)
            if not np.array_equal(want, self.costs):
                raise ContractViolation("costs inconsistent with acquisitions and unit cost")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        names = ("observations", "masks", "controls", "acquisitions", "rewards", "costs")
        return (
            all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)
            and self.terminal_flag == other.terminal_flag
            and self.policy_id == other.policy_id
        )


class AFAEnv(abc.ABC):
    """Single-threaded environment; the transition ignores the acquisition."""

    descriptor: EnvDescriptor
    version: str = "1"

    def __init__(self, cost_model: Optional[CostModel] = None):
        self.cost_model = cost_model or CostModel()
        self._needs_reset = True

    @abc.abstractmethod
    def reset(self, seed: Optional[int] = None) -> MaskedObservation: ...

    @abc.abstractmethod
    def step(self, action: JointAction) -> StepResult: ...

    def null_observation(self, full: np.ndarray) -> MaskedObservation:
        raw = expand_mask(FeatureMask.none(self.descriptor.n_features), self.descriptor)
        return MaskedObservation.from_full(full, raw.reshape(self.descriptor.obs_shape))

    def observe(self, full: np.ndarray, acquisition: FeatureMask) -> MaskedObservation:
        raw = expand_mask(acquisition, self.descriptor)
        return MaskedObservation.from_full(full, raw.reshape(self.descriptor.obs_shape))
