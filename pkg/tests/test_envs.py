import numpy as np
import pytest

from transplant_rl.envs import (
    AGENT,
    ENVIRONMENTS,
    GOAL,
    HAZARD,
    EnvSpec,
    EpisodeOver,
    FrameStack,
    make_env,
)

NAMES = sorted(ENVIRONMENTS)


def test_three_environments_share_one_spec():
    specs = [make_env(n).spec for n in NAMES]
    assert NAMES == ["chase", "corridor", "river"]
    assert all(s == EnvSpec() for s in specs)
    assert specs[0].obs_shape == (10, 10, 1) and specs[0].n_actions == 5 and specs[0].max_episode_steps == 200


@pytest.mark.parametrize("name", NAMES)
def test_reset_is_deterministic_and_in_range(name):
    a, b = make_env(name).reset(7), make_env(name).reset(7)
    assert np.array_equal(a, b)
    assert a.shape == (10, 10, 1)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_different_envs_differ_on_same_seed():
    frames = [make_env(n).reset(3) for n in NAMES]
    assert not np.array_equal(frames[0], frames[1])
    assert not np.array_equal(frames[1], frames[2])
    assert len({f.shape for f in frames}) == 1


def _place(env, agent, goal, hazard):
    env.reset(0)
    env.agent, env.goal, env.hazard = agent, goal, hazard


def test_corridor_reaching_goal():
    env = make_env("corridor")
    _place(env, (4, 8), (4, 9), (5, 5))
    res = env.step(4)  # right
    assert res.reward == 1.0 and res.terminal


def test_corridor_hazard():
    env = make_env("corridor")
    _place(env, (4, 4), (4, 9), (4, 5))
    res = env.step(4)
    assert res.reward == -1.0 and res.terminal


def test_corridor_noop_and_wall_bump():
    env = make_env("corridor")
    _place(env, (3, 0), (4, 9), (5, 5))
    res = env.step(0)
    assert res.reward == 0.0 and not res.terminal and env.agent == (3, 0)
    res = env.step(3)  # left into the wall
    assert res.reward == 0.0 and env.agent == (3, 0)
    res = env.step(1)  # up out of the corridor
    assert env.agent == (3, 0)


def test_rendering_values():
    env = make_env("corridor")
    _place(env, (4, 0), (5, 9), (6, 4))
    f = env.render()[..., 0]
    assert f[4, 0] == np.float32(AGENT) and f[5, 9] == np.float32(GOAL) and f[6, 4] == np.float32(HAZARD)
    assert np.count_nonzero(f) == 3


@pytest.mark.parametrize("name", NAMES)
def test_truncation_at_cap(name):
    env = make_env(name)
    env.reset(0)
    # noop forever; river may end early on a hazard, so just check the cap contract when reached
    for t in range(1, 201):
        res = env.step(0)
        if res.terminal:
            break
    if t == 200 and res.reward == 0.0:
        assert env.steps == 200
    assert env.steps <= 200
    with pytest.raises(EpisodeOver):
        env.step(0)


def test_corridor_truncation_reward_zero():
    env = make_env("corridor")
    _place(env, (3, 0), (6, 9), (6, 5))
    for _ in range(199):
        assert not env.step(0).terminal
    res = env.step(0)
    assert res.terminal and res.reward == 0.0


def test_chase_goal_respawns_and_relocates():
    env = make_env("chase")
    env.reset(1)
    env.hazards = [(0, 0), (0, 1)]
    env.agent, env.goal = (5, 5), (5, 6)
    res = env.step(4)
    assert res.reward == 1.0 and not res.terminal
    assert env.goal != (5, 6)
    goal = env.goal
    env.agent = (9, 9) if goal != (9, 9) else (9, 8)
    for _ in range(18):
        env.step(0)
    assert env.steps == 19 and env.goal == goal
    env.step(0)
    assert env.steps == 20


def test_chase_hazard_terminates():
    env = make_env("chase")
    env.reset(1)
    env.hazards = [(5, 6), (0, 1)]
    env.agent, env.goal = (5, 5), (9, 9)
    res = env.step(4)
    assert res.reward == -1.0 and res.terminal


def test_river_survival_reward_and_band():
    env = make_env("river")
    env.reset(2)
    res = env.step(1)  # up, still inside the band
    assert res.reward == pytest.approx(0.05)
    for _ in range(5):
        env.step(1)
    assert env.agent[0] == 7


def test_river_hazard_contact():
    env = make_env("river")
    env.reset(2)
    env.agent = (8, 0)
    env.rows = [[8, 5]]  # gap at columns 5..7; agent at column 0 sits on the hazard row
    res = env.step(0)
    assert res.reward == -1.0 and res.terminal


@pytest.mark.parametrize("name", NAMES)
def test_determinism_under_action_sequence(name):
    actions = np.random.default_rng(0).integers(0, 5, 300)

    def rollout():
        env = make_env(name)
        frames, rewards = [env.reset(11)], []
        for a in actions:
            res = env.step(int(a))
            frames.append(res.frame)
            rewards.append(res.reward)
            if res.terminal:
                frames.append(env.reset(12))
        return frames, rewards

    (f1, r1), (f2, r2) = rollout(), rollout()
    assert r1 == r2 and all(np.array_equal(a, b) for a, b in zip(f1, f2))


@pytest.mark.parametrize("name", NAMES)
def test_reward_bounds_and_episode_length(name):
    env = make_env(name)
    rng = np.random.default_rng(5)
    env.reset(0)
    length, episode = 0, 0
    for _ in range(10_000):
        res = env.step(int(rng.integers(5)))
        length += 1
        assert -1.0 <= res.reward <= 1.0
        assert length <= 200
        if res.terminal:
            episode += 1
            env.reset(episode)
            length = 0


def test_unknown_env_and_bad_action():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("pong")
    env = make_env("corridor")
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(5)


# -- frame stacking -------------------------------------------------------------


def test_stack_reset_fill_then_push():
    env = make_env("corridor")
    fs = FrameStack()
    f0 = env.reset(0)
    s = fs.reset(f0)
    assert s.shape == (10, 10, 4)
    assert all(np.array_equal(s[..., i], f0[..., 0]) for i in range(4))
    f1 = env.step(4).frame
    s = fs.push(f1)
    for i in range(3):
        assert np.array_equal(s[..., i], f0[..., 0])
    assert np.array_equal(s[..., 3], f1[..., 0])


def test_stack_order_oldest_to_newest():
    fs = FrameStack()
    fs.reset(np.zeros((10, 10, 1), np.float32))
    frames = [np.full((10, 10, 1), v, np.float32) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
    for f in frames:
        s = fs.push(f)
        assert np.array_equal(s[..., 3], f[..., 0])
    np.testing.assert_array_equal(s[0, 0], np.float32([0.2, 0.3, 0.4, 0.5]))
