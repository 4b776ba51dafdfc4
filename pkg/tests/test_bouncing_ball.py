import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afa_pomdp.core import ContractViolation, CostModel, FeatureMask, JointAction, expand_mask
from afa_pomdp.envs.bouncing_ball import (
    NULL_ACTION,
    BallConfig,
    BallState,
    BouncingBallEnv,
    advance,
    make_descriptor,
    render,
)
from afa_pomdp.representation import ImputerConfig, zero_impute

CFG = BallConfig()


def render_oracle(x, y, radius=2, size=32):
    frame = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            if (i - y) ** 2 + (j - x) ** 2 <= radius**2:
                frame[i, j] = 1.0
    return frame


def test_render_centre_matches_pixel_oracle():
    frame = render(BallState((16.0, 16.0), (0.0, 0.0)))
    np.testing.assert_array_equal(frame, render_oracle(16, 16))
    assert frame.sum() == 13


@settings(max_examples=40)
@given(st.floats(CFG.lo, CFG.hi), st.floats(CFG.lo, CFG.hi))
def test_render_matches_oracle_anywhere(x, y):
    np.testing.assert_array_equal(render(BallState((x, y), (0.0, 0.0))), render_oracle(x, y))


def test_render_corner_is_clipped_binary_and_deterministic():
    s = BallState((0.5, 31.0), (0.0, 0.0))
    a, b = render(s), render(s)
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a, b)


def test_euler_step_with_null_action():
    nxt, reward, terminal = advance(BallState((16.0, 16.0), (1.0, 0.0)), NULL_ACTION)
    assert nxt.position == (17.0, 16.0)
    assert nxt.velocity == (1.0, 0.0)
    assert reward == 0.0 and not terminal


def test_velocity_update_exceeding_cap_is_discarded():
    nxt, _, _ = advance(BallState((16.0, 16.0), (4.8, 0.0)), 1)  # +dVx
    assert nxt.velocity[0] == 4.8


def test_velocity_update_within_cap_applies():
    nxt, _, _ = advance(BallState((16.0, 16.0), (4.5, 0.0)), 1)
    assert nxt.velocity[0] == 5.0


def test_target_reached_after_update():
    nxt, reward, terminal = advance(BallState((5.4, 24.3), (0.0, 0.5)), NULL_ACTION)
    assert reward == 1.0 and terminal


def test_wall_reflection_negates_velocity():
    nxt, _, _ = advance(BallState((28.0, 16.0), (3.0, 0.0)), NULL_ACTION)
    # hi = 29, so 31 reflects to 27
    assert nxt.position[0] == pytest.approx(27.0)
    assert nxt.velocity[0] == -3.0


def test_timeout_at_max_steps():
    state = BallState((16.0, 16.0), (0.0, 0.0), step_count=49)
    _, reward, terminal = advance(state, NULL_ACTION)
    assert terminal and reward == 0.0


def test_invalid_control_rejected():
    with pytest.raises(ContractViolation):
        advance(BallState((16.0, 16.0), (0.0, 0.0)), 5)
    env = BouncingBallEnv(seed=0)
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(JointAction(7, FeatureMask.none(4)))


def test_step_before_reset_rejected():
    with pytest.raises(ContractViolation, match="before reset"):
        BouncingBallEnv(seed=0).step(JointAction(0, FeatureMask.none(4)))


@pytest.mark.parametrize("seed", range(20))
def test_reset_speed_position_and_null_observation(seed):
    env = BouncingBallEnv(seed=seed)
    obs = env.reset()
    vx, vy = env.state.velocity
    assert abs(np.hypot(vx, vy) - 4.0) < 1e-9
    x, y = env.state.position
    assert 0 <= x < 16 and 0 <= y < 16
    assert not obs.mask.any()
    imputed = zero_impute(obs, ImputerConfig.for_env("bouncing_ball"))
    assert np.all(imputed == 0.5)
    assert obs.full is not None and obs.full.sum() > 0


def test_reset_is_deterministic_per_seed():
    a, b = BouncingBallEnv(), BouncingBallEnv()
    a.reset(seed=11)
    b.reset(seed=11)
    assert a.state == b.state


def test_quadrant_groups_have_256_pixels():
    desc = make_descriptor()
    for i in range(4):
        bits = np.zeros(4, dtype=bool)
        bits[i] = True
        assert expand_mask(bits, desc).sum() == 256
    upper_left = expand_mask(np.array([1, 0, 0, 0], dtype=bool), desc).reshape(32, 32)
    assert upper_left[:16, :16].all() and upper_left.sum() == 256


def test_acquisition_reveals_next_frame_and_costs():
    env = BouncingBallEnv(cost_model=CostModel(unit_cost=0.01), seed=3)
    env.reset()
    res = env.step(JointAction(NULL_ACTION, FeatureMask([1, 1, 0, 0])))
    assert res.cost == pytest.approx(0.02)
    assert res.obs.mask[:16].all() and not res.obs.mask[16:].any()
    np.testing.assert_array_equal(res.obs.observed[:16], res.obs.full[:16])
    assert np.isnan(res.obs.observed[16:]).all()


def test_null_action_without_walls_keeps_velocity():
    state = BallState((10.0, 10.0), (0.5, -0.5))
    for _ in range(5):
        state, _, _ = advance(state, NULL_ACTION)
        assert state.velocity == (0.5, -0.5)
