"""Shared builders for tests that need trained-looking networks or filled replay."""

import numpy as np

from transplant_rl import nn, surgery
from transplant_rl.agent import AgentConfig, RainbowAgent
from transplant_rl.envs import FrameStack, make_env
from transplant_rl.replay import NStepAccumulator


def parent_checkpoint(seed=0, env="corridor"):
    net = nn.rainbow_network(5, 21)
    net.init_params(seed)
    return surgery.Checkpoint.from_network(net, env=env, training_steps=0, seed=seed)


def fill_replay(agent, n=400, env_name="corridor", seed=0):
    """Push ``n`` random-policy transitions through n-step folding."""
    rng = np.random.default_rng(seed)
    env, stack = make_env(env_name), FrameStack()
    acc = NStepAccumulator(agent.config.n_step, agent.config.gamma)
    obs = stack.reset(env.reset(seed))
    episode = 0
    for _ in range(n):
        a = int(rng.integers(5))
        res = env.step(a)
        nxt = stack.push(res.frame)
        for t in acc.push(obs, a, res.reward, nxt, res.terminal):
            agent.replay.push(t)
        obs = nxt
        if res.terminal:
            episode += 1
            obs = stack.reset(env.reset(seed + episode))
    return agent


def child_agent(parent, k, mode, seed=0, config=None):
    child, mask = surgery.transplant(parent, surgery.TransplantSpec(k, mode, seed))
    agent = RainbowAgent(config or AgentConfig(), seed=seed, network=child, freeze_mask=mask)
    return fill_replay(agent, seed=seed)


def train_steps(agent, n):
    for _ in range(n):
        assert agent.train_step() is not None
    return agent
