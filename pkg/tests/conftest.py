import numpy as np
import pytest
import torch

from afa_pomdp.config import build_config
from afa_pomdp.envs.sepsis import SepsisEnv, make_descriptor as sepsis_descriptor
from afa_pomdp.training.collect import random_chooser, rollout


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def sepsis_desc():
    return sepsis_descriptor()


def sepsis_records(n, seed=0, acq_prob=0.5, unit_cost=0.01):
    from afa_pomdp.core import CostModel

    out = []
    for i in range(n):
        env = SepsisEnv(cost_model=CostModel(unit_cost=unit_cost))
        rng = np.random.default_rng([seed, i])
        out.append(rollout(env, random_chooser(8, 4, acq_prob, rng), seed * 100_000 + i, "random"))
    return out


@pytest.fixture
def tiny_cfg():
    """Sepsis config small enough for end-to-end tests in seconds."""
    return build_config({}, [
        "data.n_train=12", "data.n_test=8", "data.random_fraction=1.0",
        "vae.epochs=2", "vae.batch_size=4",
        "rl.workers=2", "rl.total_env_steps=400", "rl.eval_interval=200", "rl.eval_episodes=4",
        "rl.hidden_size=16", "rl.rollout_length=5",
    ])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
