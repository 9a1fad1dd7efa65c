import numpy as np
import pytest

from prefdiff.evalharness import rollout_episode
from prefdiff.gaitsim import (
    ACTION_DIM,
    GAITS,
    STATE_DIM,
    EnvConstants,
    EnvState,
    ExpertPolicy,
    evaluate_reward,
    expert_action,
    get_gait,
    reset,
    step,
)
from prefdiff.util import wrap_pm_pi


def test_reset_is_deterministic():
    a, b = reset("trotting", 0.5, 7), reset("trotting", 0.5, 7)
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())
    assert a.v == 0 and a.tilt == 0 and a.clock == 0


@pytest.mark.parametrize("gait", list(GAITS))
def test_reset_perturbation_bound(gait):
    offsets = np.array(GAITS[gait].offsets)
    for seed in range(1000):
        s = reset(gait, 0.5, seed)
        assert np.all((0 <= s.phases) & (s.phases < 2 * np.pi))
        assert np.all(np.abs(wrap_pm_pi(s.phases - offsets)) <= 0.1 + 1e-12)


def test_reset_trotting_diagonals_in_phase():
    s = reset("trotting", 1.0, 3)
    fl, fr, rl, rr = s.phases
    assert abs(wrap_pm_pi(fl - rr)) <= 0.2
    assert abs(wrap_pm_pi(fr - rl)) <= 0.2


def test_reset_rejects_bad_command():
    with pytest.raises(ValueError, match="outside"):
        reset("pacing", 3.0, 0)
    with pytest.raises(ValueError, match="Unknown gait"):
        get_gait("galloping")


def test_state_vector_layout():
    s = reset("bounding", 0.5, 1)
    x = s.to_vector()
    assert x.shape == (STATE_DIM,)
    np.testing.assert_array_equal(EnvState.from_vector(x).to_vector(), x)


def test_zero_action_keeps_rest():
    env = EnvConstants()
    s = reset("trotting", 0.5, 0)
    r = step(s, np.zeros(ACTION_DIM), "trotting", 0.0, env)
    assert r.next_state.v == 0
    assert r.reward == pytest.approx(np.exp(-0.5) - 0.1 * abs(r.next_state.tilt), abs=1e-15)


def test_phase_locked_tilt_decays_geometrically():
    env = EnvConstants()
    s = EnvState(0.5, 0.0, 0.1, np.array([0.0, np.pi, np.pi, 0.0]), np.zeros(4), 0.0)
    for _ in range(5):
        r = step(s, np.zeros(ACTION_DIM), "trotting", 0.0, env)
        assert r.next_state.tilt == pytest.approx((1 - env.k_r) * s.tilt, rel=1e-12)
        s = r.next_state


def test_step_clamps_and_wraps():
    env = EnvConstants()
    s = reset("pacing", 0.5, 0)
    r = step(s, np.array([-1.0, 0.2, 9.0, 0.1]), "pacing", 0.0, env)
    np.testing.assert_array_equal(r.next_state.phase_rates, [0.0, 0.2, env.a_max, 0.1])
    assert np.all(r.next_state.phases < 2 * np.pi)


def test_step_errors():
    s = reset("pacing", 0.5, 0)
    with pytest.raises(ValueError):
        step(s, np.zeros(3), "pacing")
    with pytest.raises(ValueError):
        step(s, np.array([np.nan, 0, 0, 0]), "pacing")


def test_step_budget_marks_done():
    s = reset("pacing", 0.5, 0)
    assert step(s, np.zeros(4), "pacing", steps_left=1).done
    assert not step(s, np.zeros(4), "pacing", steps_left=2).done


def test_replay_is_bit_identical():
    env = EnvConstants()
    gait = GAITS["bounding"]
    kicks = np.random.default_rng(5).uniform(-0.05, 0.05, size=250)

    def run():
        s, results = reset(gait, 1.0, 11, env), []
        for kick in kicks:
            r = step(s, expert_action(s, gait, env), gait, kick, env)
            results.append((r.next_state.to_vector(), r.reward, r.done))
            s = r.next_state
            if r.done:
                break
        return results

    for (x1, r1, d1), (x2, r2, d2) in zip(run(), run()):
        np.testing.assert_array_equal(x1, x2)
        assert r1 == r2 and d1 == d2


def test_expert_on_template_uses_base_rate():
    env = EnvConstants()
    s = EnvState(0.5, 0.5, 0.0, np.array(GAITS["trotting"].offsets), np.zeros(4), 0.0)
    np.testing.assert_allclose(expert_action(s, "trotting", env), env.omega_base)


def test_expert_clamps_at_zero_when_too_fast():
    s = EnvState(0.5, 2.0, 0.0, np.array(GAITS["pacing"].offsets), np.zeros(4), 0.0)
    np.testing.assert_array_equal(expert_action(s, "pacing"), np.zeros(4))


def test_expert_policy_block_shape():
    s = reset("trotting", 0.5, 0)
    assert ExpertPolicy("trotting")(s).shape == (1, ACTION_DIM)


@pytest.mark.parametrize("gait", list(GAITS))
@pytest.mark.parametrize("v_cmd", [0.5, 1.0])
def test_expert_never_falls_without_disturbance(gait, v_cmd):
    env = EnvConstants()
    traj = rollout_episode(ExpertPolicy(gait, env), gait, v_cmd, env=env, disturbance=0.0)
    assert len(traj) == 250 and not traj.fell
    assert np.max(np.abs(traj["tilt"])) < env.tilt_fall


@pytest.mark.parametrize("gait", list(GAITS))
def test_expert_tracks_command(gait):
    traj = rollout_episode(ExpertPolicy(gait), gait, 0.5, disturbance=0.0)
    assert np.mean(np.abs(traj["v"][50:] - 0.5)) < 0.05


def test_evaluate_reward():
    assert evaluate_reward({"rewards": [0.7]}) == pytest.approx(0.7)
    r1, r2 = np.array([0.1, 0.4]), np.array([0.3])
    total = evaluate_reward({"rewards": np.concatenate([r1, r2])})
    parts = evaluate_reward({"rewards": r1}) + evaluate_reward({"rewards": r2})
    assert total == pytest.approx(parts)
    acc = 0.0
    for r in np.concatenate([r1, r2]):
        acc += r
    assert total == pytest.approx(acc, abs=1e-15)
