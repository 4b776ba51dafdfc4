"""Tabular sepsis treatment simulator.

State: four categorical vitals (heart rate, systolic BP, percent oxygen,
glucose), three treatment flags (antibiotics, ventilation, vasopressors)
and a diabetes flag.  The control head is an 8-way categorical over
treatment subsets; bit ``i`` of the control index switches treatment ``i``.

Dynamics are data.  Each vital transitions independently given
``(level, abx, vent, vaso, diabetic)`` where every treatment entry is a
transition code: 0 = stays off, 1 = on this step, 2 = withdrawn this step
(on before, off now).  Tables live in a versioned JSON file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from itertools import product
from pathlib import Path
from typing import Mapping, Optional

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

VITALS = ("heart_rate", "sys_bp", "percoxyg", "glucose")
TREATMENTS = ("abx", "vent", "vaso")
OFF, ON, WITHDRAWN = 0, 1, 2
MAX_STEPS = 30
DEFAULT_DYNAMICS = "sepsis_dynamics_v1.json"


class DynamicsError(ValueError):
    """Malformed or non-stochastic dynamics file."""


@dataclass(frozen=True)
class SepsisState:
    heart_rate: int
    sys_bp: int
    percoxyg: int
    glucose: int
    abx_on: bool = False
    vent_on: bool = False
    vaso_on: bool = False
    diabetic: bool = False
    step_count: int = 0

    def levels(self) -> tuple[int, int, int, int]:
        return (self.heart_rate, self.sys_bp, self.percoxyg, self.glucose)

    def treatments(self) -> tuple[bool, bool, bool]:
        return (self.abx_on, self.vent_on, self.vaso_on)


@dataclass(frozen=True, eq=False)
class SepsisDynamics:
    version: str
    level_counts: Mapping[str, int]
    normal_level: Mapping[str, int]
    initial_levels: Mapping[str, np.ndarray]
    diabetic_prob: float
    # vital -> array [levels, 3, 3, 3, 2, levels] of next-level probabilities
    tables: Mapping[str, np.ndarray]
    mortality_min_abnormal: int
    # resample initial states that already satisfy an outcome predicate
    exclude_terminal_initial: bool = True
    source: Optional[str] = field(default=None, compare=False)

    def row(self, vital: str, level: int, codes: tuple[int, int, int], diabetic: bool) -> np.ndarray:
        return self.tables[vital][level, codes[0], codes[1], codes[2], int(diabetic)]

    @cached_property
    def cdfs(self) -> dict[str, np.ndarray]:
        return {v: np.cumsum(t, axis=-1) for v, t in self.tables.items()}

    def num_abnormal(self, state: SepsisState) -> int:
        return sum(lvl != self.normal_level[v] for v, lvl in zip(VITALS, state.levels()))

    def is_discharge(self, state: SepsisState) -> bool:
        return self.num_abnormal(state) == 0

    def is_mortality(self, state: SepsisState) -> bool:
        return self.num_abnormal(state) >= self.mortality_min_abnormal


def _row_key(level: int, codes: tuple[int, int, int], diabetic: int) -> str:
    return f"{level},{codes[0]},{codes[1]},{codes[2]},{diabetic}"


def parse_dynamics(doc: Mapping, source: Optional[str] = None) -> SepsisDynamics:
    try:
        version = str(doc["version"])
        counts = {v: int(doc["level_counts"][v]) for v in VITALS}
        normal = {v: int(doc["normal_level"][v]) for v in VITALS}
        init = doc["initial"]
        diabetic_prob = float(init["diabetic_prob"])
        init_levels = {v: np.asarray(init["levels"][v], dtype=np.float64) for v in VITALS}
        raw_tables = doc["transitions"]
        mortality = int(doc["outcome_rule"]["mortality_min_abnormal"])
        exclude_terminal = bool(init.get("exclude_terminal", True))
    except KeyError as exc:
        raise DynamicsError(f"dynamics file missing required entry {exc}") from None
    except (TypeError, ValueError) as exc:
        raise DynamicsError(f"dynamics file malformed: {exc}") from None

    if not 0.0 <= diabetic_prob <= 1.0:
        raise DynamicsError("initial.diabetic_prob must lie in [0, 1]")
    for v in VITALS:
        if counts[v] < 2:
            raise DynamicsError(f"vital {v!r} needs at least two levels")
        if not 0 <= normal[v] < counts[v]:
            raise DynamicsError(f"normal level of {v!r} outside its level range")
        p = init_levels[v]
        if p.shape != (counts[v],) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DynamicsError(f"initial level distribution of {v!r} is not a distribution over {counts[v]} levels")

    tables = {}
    for v in VITALS:
        if v not in raw_tables:
            raise DynamicsError(f"transition table for vital {v!r} missing")
        n = counts[v]
        table = np.zeros((n, 3, 3, 3, 2, n), dtype=np.float64)
        for level, a, b, c, d in product(range(n), range(3), range(3), range(3), range(2)):
            key = _row_key(level, (a, b, c), d)
            if key not in raw_tables[v]:
                raise DynamicsError(f"transition row {v}[{key}] missing")
            row = np.asarray(raw_tables[v][key], dtype=np.float64)
            if row.shape != (n,):
                raise DynamicsError(f"transition row {v}[{key}] has {row.size} entries, expected {n}")
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                raise DynamicsError(f"transition row {v}[{key}] has negative or non-finite entries")
            if abs(row.sum() - 1.0) > 1e-9:
                raise DynamicsError(f"transition row {v}[{key}] sums to {row.sum():.12g}, not 1")
            table[level, a, b, c, d] = row
        table.setflags(write=False)
        tables[v] = table
    return SepsisDynamics(
        version=version,
        level_counts=counts,
        normal_level=normal,
        initial_levels=init_levels,
        diabetic_prob=diabetic_prob,
        tables=tables,
        mortality_min_abnormal=mortality,
        exclude_terminal_initial=exclude_terminal,
        source=source,
    )


def load_dynamics(path: str | Path | None = None) -> SepsisDynamics:
    """Load and validate a dynamics file; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("afa_pomdp.envs.data").joinpath(DEFAULT_DYNAMICS).read_text()
        source = DEFAULT_DYNAMICS
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DynamicsError(f"cannot read dynamics file {path}: {exc}") from None
        source = str(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DynamicsError(f"dynamics file {source} is not valid JSON: {exc}") from None
    return parse_dynamics(doc, source=source)


def dynamics_to_doc(dyn: SepsisDynamics) -> dict:
    transitions = {}
    for v in VITALS:
        n = dyn.level_counts[v]
        transitions[v] = {
            _row_key(level, (a, b, c), d): [float(p) for p in dyn.tables[v][level, a, b, c, d]]
            for level, a, b, c, d in product(range(n), range(3), range(3), range(3), range(2))
        }
    return {
        "version": dyn.version,
        "level_counts": dict(dyn.level_counts),
        "normal_level": dict(dyn.normal_level),
        "initial": {
            "diabetic_prob": dyn.diabetic_prob,
            "exclude_terminal": dyn.exclude_terminal_initial,
            "levels": {v: [float(p) for p in dyn.initial_levels[v]] for v in VITALS},
        },
        "outcome_rule": {"mortality_min_abnormal": dyn.mortality_min_abnormal},
        "transitions": transitions,
    }


def save_dynamics(dyn: SepsisDynamics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dynamics_to_doc(dyn), indent=1, sort_keys=True))


# -- reference kernels --------------------------------------------------------
# Per-treatment effects of the reference simulator, written as per-vital
# Markov kernels and composed in the simulator's order (abx, vent, vaso,
# then random fluctuation of untreated vitals).


def _move(n: int, moves: Mapping[int, tuple[int, float]]) -> np.ndarray:
    """Kernel moving ``level -> target`` with the given probability."""
    k = np.eye(n)
    for level, (target, p) in moves.items():
        k[level, level] -= p
        k[level, target] += p
    return k


def _fluctuate(n: int, p_down: float, p_up: float) -> np.ndarray:
    k = np.zeros((n, n))
    for level in range(n):
        k[level, max(level - 1, 0)] += p_down
        k[level, min(level + 1, n - 1)] += p_up
        k[level, level] += 1.0 - p_down - p_up
    return k


def reference_dynamics() -> SepsisDynamics:
    counts = {"heart_rate": 3, "sys_bp": 3, "percoxyg": 2, "glucose": 5}
    normal = {"heart_rate": 1, "sys_bp": 1, "percoxyg": 1, "glucose": 2}
    tables = {v: np.zeros((n, 3, 3, 3, 2, n)) for v, n in counts.items()}
    for abx, vent, vaso, diab in product(range(3), range(3), range(3), range(2)):
        hr = np.eye(3)
        bp = np.eye(3)
        ox = np.eye(2)
        gl = np.eye(5)
        if abx == ON:
            hr = hr @ _move(3, {2: (1, 0.5)})
            bp = bp @ _move(3, {2: (1, 0.5)})
        elif abx == WITHDRAWN:
            hr = hr @ _move(3, {1: (2, 0.1)})
            bp = bp @ _move(3, {1: (2, 0.1)})
        if vent == ON:
            ox = ox @ _move(2, {0: (1, 0.7)})
        elif vent == WITHDRAWN:
            ox = ox @ _move(2, {1: (0, 0.1)})
        if vaso == ON:
            p_raise = 0.5 if diab else 0.7
            bp = bp @ _move(3, {0: (1, p_raise), 1: (2, p_raise)})
            if diab:
                gl = gl @ _move(5, {lvl: (lvl + 1, 0.5) for lvl in range(4)})
        elif vaso == WITHDRAWN:
            p_drop = 0.05 if diab else 0.1
            bp = bp @ _move(3, {1: (0, p_drop), 2: (1, p_drop)})
        if abx == OFF:
            hr = hr @ _fluctuate(3, 0.1, 0.1)
        if abx == OFF and vaso == OFF:
            bp = bp @ _fluctuate(3, 0.1, 0.1)
        if vent == OFF:
            ox = ox @ _fluctuate(2, 0.1, 0.1)
        if vaso != ON:
            gl = gl @ (_fluctuate(5, 0.3, 0.3) if diab else _fluctuate(5, 0.1, 0.1))
        for v, k in zip(VITALS, (hr, bp, ox, gl)):
            tables[v][:, abx, vent, vaso, diab, :] = k
    for t in tables.values():
        t.setflags(write=False)
    return SepsisDynamics(
        version="sepsis-sim-port-v1",
        level_counts=counts,
        normal_level=normal,
        initial_levels={v: np.full(n, 1.0 / n) for v, n in counts.items()},
        diabetic_prob=0.2,
        tables=tables,
        mortality_min_abnormal=3,
    )


def identity_dynamics(version: str = "identity-test") -> SepsisDynamics:
    """Every vital keeps its level with probability one."""
    ref = reference_dynamics()
    tables = {}
    for v, n in ref.level_counts.items():
        t = np.zeros((n, 3, 3, 3, 2, n))
        for level in range(n):
            t[level, ..., level] = 1.0
        t.setflags(write=False)
        tables[v] = t
    return replace(ref, version=version, tables=tables)


# -- environment --------------------------------------------------------------


def make_descriptor() -> EnvDescriptor:
    return EnvDescriptor(
        name="sepsis",
        n_features=4,
        obs_shape=(8,),
        n_control_actions=8,
        max_steps=MAX_STEPS,
        feature_group_map=((0,), (1,), (2,), (3,)),
    )


def decode_control(control: int) -> tuple[bool, bool, bool]:
    if not 0 <= control < 8:
        raise ContractViolation(f"control index {control} outside [0, 8)")
    return (bool(control & 1), bool(control & 2), bool(control & 4))


def encode_state(state: SepsisState, dyn: SepsisDynamics) -> np.ndarray:
    vitals = [lvl / (dyn.level_counts[v] - 1) for v, lvl in zip(VITALS, state.levels())]
    flags = [float(b) for b in (*state.treatments(), state.diabetic)]
    return np.asarray(vitals + flags, dtype=np.float32)


def transition_codes(prev: tuple[bool, bool, bool], nxt: tuple[bool, bool, bool]) -> tuple[int, int, int]:
    return tuple(ON if n else (WITHDRAWN if p else OFF) for p, n in zip(prev, nxt))  # type: ignore[return-value]


def sample_next(state: SepsisState, control: int, dyn: SepsisDynamics, rng: np.random.Generator) -> SepsisState:
    treat = decode_control(control)
    codes = transition_codes(state.treatments(), treat)
    u = rng.random(len(VITALS))
    levels = []
    for v, level, ui in zip(VITALS, state.levels(), u):
        cdf = dyn.cdfs[v][level, codes[0], codes[1], codes[2], int(state.diabetic)]
        levels.append(int(min(np.searchsorted(cdf, ui, side="right"), len(cdf) - 1)))
    return SepsisState(
        *levels,
        abx_on=treat[0],
        vent_on=treat[1],
        vaso_on=treat[2],
        diabetic=state.diabetic,
        step_count=state.step_count + 1,
    )


class SepsisEnv(AFAEnv):
    def __init__(
        self,
        dynamics: Optional[SepsisDynamics] = None,
        cost_model: Optional[CostModel] = None,
        seed: Optional[int] = None,
    ):
        super().__init__(cost_model)
        self.dynamics = dynamics or load_dynamics()
        self.descriptor = make_descriptor()
        self.rng = np.random.default_rng(seed)
        self.state: Optional[SepsisState] = None

    @property
    def version(self) -> str:  # type: ignore[override]
        return self.dynamics.version

    def sample_initial_state(self) -> SepsisState:
        dyn = self.dynamics
        while True:
            levels = [int(self.rng.choice(dyn.level_counts[v], p=dyn.initial_levels[v])) for v in VITALS]
            diabetic = bool(self.rng.random() < dyn.diabetic_prob)
            state = SepsisState(*levels, diabetic=diabetic)
            if not dyn.exclude_terminal_initial or not (dyn.is_discharge(state) or dyn.is_mortality(state)):
                return state

    def reset(self, seed: Optional[int] = None) -> MaskedObservation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.sample_initial_state()
        self._needs_reset = False
        return self.null_observation(encode_state(self.state, self.dynamics))

    def set_state(self, state: SepsisState) -> None:
        self.state = state
        self._needs_reset = False

    def step(self, action: JointAction) -> StepResult:
        if self._needs_reset or self.state is None:
            raise ContractViolation("step() called before reset()")
        action.validate(self.descriptor)
        dyn = self.dynamics
        self.state = sample_next(self.state, int(action.control), dyn, self.rng)
        if dyn.is_discharge(self.state):
            reward, terminal, outcome = 1.0, True, "discharge"
        elif dyn.is_mortality(self.state):
            reward, terminal, outcome = -1.0, True, "mortality"
        elif self.state.step_count >= MAX_STEPS:
            reward, terminal, outcome = 0.0, True, "timeout"
        else:
            reward, terminal, outcome = 0.0, False, "none"
        if terminal:
            self._needs_reset = True
        obs = self.observe(encode_state(self.state, dyn), action.acquisition)
        cost = acquisition_cost(action.acquisition, self.cost_model)
        return StepResult(obs=obs, reward=reward, cost=cost, terminal=terminal, info={"outcome": outcome})
