"""Environment loop: acting, n-step folding into replay, periodic learning and evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .agent import RainbowAgent
from .envs import FrameStack, make_env
from .replay import NStepAccumulator


@dataclass
class EvalConfig:
    interval: int = 5000
    episodes: int = 10
    seed: int = 10_000


@dataclass
class CurveRow:
    env_steps: int
    eval_return_mean: float
    eval_return_std: float
    wall_clock_seconds: float


def evaluate(agent: RainbowAgent, env_name: str, episodes: int = 10, seed: int = 10_000) -> np.ndarray:
    """Undiscounted returns of noise-free greedy episodes on seeds ``seed, seed+1, ...``."""
    env = make_env(env_name)
    returns = np.zeros(episodes)
    for i in range(episodes):
        stack = FrameStack(agent.config.history_len)
        obs = stack.reset(env.reset(seed + i))
        total, done = 0.0, False
        while not done:
            res = env.step(agent.act(obs, training=False))
            total += res.reward
            done = res.terminal
            obs = stack.push(res.frame)
        returns[i] = total
    return returns


def train(agent: RainbowAgent, env_name: str, steps: int, seed: int, eval_config: EvalConfig | None = None,
          before_final_eval=None, log=None) -> list[CurveRow]:
    """Train ``agent`` for ``steps`` environment steps and return its learning curve.

    Evaluation happens at step 0, every ``eval_config.interval`` steps and at
    the final step. ``before_final_eval(agent)`` runs just before the last
    evaluation, e.g. to round parameters to the precision they will be saved at.
    """
    eval_config = eval_config or EvalConfig()
    cfg = agent.config
    env = make_env(env_name)
    episode_seeds = np.random.default_rng([seed, 0xE9])
    start = time.perf_counter()
    curve: list[CurveRow] = []

    def record(step, final=False):
        if final and before_final_eval:
            before_final_eval(agent)
        returns = evaluate(agent, env_name, eval_config.episodes, eval_config.seed)
        row = CurveRow(step, float(returns.mean()), float(returns.std()), time.perf_counter() - start)
        curve.append(row)
        if log:
            log(row)

    if steps == 0:
        record(0, final=True)
        return curve
    record(0)

    stack = FrameStack(cfg.history_len)
    fold = NStepAccumulator(cfg.n_step, cfg.gamma)
    obs = stack.reset(env.reset(int(episode_seeds.integers(2**31))))
    for step in range(1, steps + 1):
        action = agent.act(obs, training=True)
        res = env.step(action)
        next_obs = stack.push(res.frame)
        for t in fold.push(obs, action, res.reward, next_obs, res.terminal):
            agent.replay.push(t)
        obs = next_obs
        if res.terminal:
            fold.reset()
            obs = stack.reset(env.reset(int(episode_seeds.integers(2**31))))
        if step >= cfg.warmup_steps and step % cfg.train_every == 0:
            agent.train_step(cfg.buffer.beta(step / steps))
        if step == steps:
            record(step, final=True)
        elif step % eval_config.interval == 0:
            record(step)
    return curve
