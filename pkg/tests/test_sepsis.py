import json
from dataclasses import replace

import numpy as np
import pytest

from afa_pomdp.core import ContractViolation, CostModel, FeatureMask, JointAction
from afa_pomdp.envs.sepsis import (
    MAX_STEPS,
    VITALS,
    DynamicsError,
    SepsisEnv,
    SepsisState,
    decode_control,
    dynamics_to_doc,
    encode_state,
    identity_dynamics,
    load_dynamics,
    reference_dynamics,
    save_dynamics,
)


def test_shipped_dynamics_rows_are_stochastic():
    dyn = load_dynamics()
    for table in dyn.tables.values():
        assert np.all(table >= 0)
        np.testing.assert_allclose(table.sum(-1), 1.0, atol=1e-9)


def test_shipped_file_equals_reference_port():
    shipped, ref = load_dynamics(), reference_dynamics()
    assert shipped.version == ref.version
    for v in VITALS:
        np.testing.assert_array_equal(shipped.tables[v], ref.tables[v])


def test_non_stochastic_row_names_the_row(tmp_path):
    doc = dynamics_to_doc(load_dynamics())
    doc["transitions"]["glucose"]["2,1,0,0,1"] = [0.1, 0.2, 0.3, 0.2, 0.1]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DynamicsError, match=r"glucose\[2,1,0,0,1\].*0\.9"):
        load_dynamics(p)


def test_missing_vital_rejected(tmp_path):
    doc = dynamics_to_doc(load_dynamics())
    del doc["transitions"]["sys_bp"]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DynamicsError, match="sys_bp"):
        load_dynamics(p)


def test_malformed_file_rejected(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(DynamicsError, match="not valid JSON"):
        load_dynamics(p)


def test_identity_dynamics_round_trip(tmp_path):
    p = tmp_path / "identity.json"
    save_dynamics(identity_dynamics(), p)
    dyn = load_dynamics(p)
    assert dyn.version == "identity-test"
    assert dyn.tables["glucose"][3, 1, 1, 1, 0, 3] == 1.0


def normal_state(dyn, **kw):
    return SepsisState(*(dyn.normal_level[v] for v in VITALS), **kw)


def test_identity_all_normal_discharges():
    dyn = identity_dynamics()
    env = SepsisEnv(dyn, seed=0)
    env.reset()
    env.set_state(normal_state(dyn))
    res = env.step(JointAction(5, FeatureMask.none(4)))
    assert res.terminal and res.reward == 1.0 and res.info["outcome"] == "discharge"


def test_identity_one_abnormal_times_out():
    dyn = identity_dynamics()
    env = SepsisEnv(dyn, seed=0)
    env.reset()
    env.set_state(replace(normal_state(dyn), glucose=0))
    for t in range(MAX_STEPS):
        res = env.step(JointAction(t % 8, FeatureMask.none(4)))
        if t < MAX_STEPS - 1:
            assert not res.terminal and res.reward == 0.0
    assert res.terminal and res.reward == 0.0 and res.info["outcome"] == "timeout"


def test_identity_many_abnormal_is_mortality():
    dyn = identity_dynamics()
    env = SepsisEnv(dyn, seed=0)
    env.reset()
    env.set_state(SepsisState(0, 0, 0, 2))
    res = env.step(JointAction(0, FeatureMask.none(4)))
    assert res.terminal and res.reward == -1.0 and res.info["outcome"] == "mortality"


@pytest.mark.parametrize("seed", range(10))
def test_reset_has_no_treatment_and_null_observation(seed):
    env = SepsisEnv(seed=seed)
    obs = env.reset()
    assert env.state.treatments() == (False, False, False)
    assert not obs.mask[:4].any() and obs.mask[4:].all()


def test_reset_deterministic_under_seed():
    a, b = SepsisEnv(), SepsisEnv()
    a.reset(seed=5)
    b.reset(seed=5)
    assert a.state == b.state


def test_fixed_actions_reproduce_trajectory():
    def run():
        env = SepsisEnv(seed=42)
        env.reset()
        out = []
        for t in range(MAX_STEPS):
            res = env.step(JointAction(t % 8, FeatureMask([t % 2, 1, 0, 1])))
            out.append((env.state, res.reward))
            if res.terminal:
                break
        return out

    assert run() == run()


def test_decode_control_bits():
    assert decode_control(0) == (False, False, False)
    assert decode_control(5) == (True, False, True)
    with pytest.raises(ContractViolation):
        decode_control(8)


def test_encoding_is_normalized_and_above_fill():
    dyn = load_dynamics()
    x = encode_state(SepsisState(2, 0, 1, 4, abx_on=True, diabetic=True), dyn)
    assert x.tolist() == [1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]


def test_invalid_control_rejected():
    env = SepsisEnv(seed=0)
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(JointAction(8, FeatureMask.none(4)))


def test_treatment_flags_follow_previous_control_and_cost():
    env = SepsisEnv(cost_model=CostModel(unit_cost=0.025), seed=1)
    env.reset()
    for t in range(MAX_STEPS):
        control = (3 * t + 1) % 8
        res = env.step(JointAction(control, FeatureMask([1, 0, 1, 0])))
        assert res.obs.observed[4:7].tolist() == [float(b) for b in decode_control(control)]
        assert res.cost == pytest.approx(0.05)
        if res.terminal:
            break
