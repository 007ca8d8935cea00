"""Categorical dueling double-Q agent with n-step targets and noisy-net exploration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .envs import HISTORY_LEN, N_ACTIONS
from .replay import BufferConfig, PrioritizedReplay


@dataclass(frozen=True)
class AtomSupport:
    n_atoms: int = 21
    v_min: float = -10.0
    v_max: float = 10.0

    def __post_init__(self):
        if self.n_atoms < 2:
            raise ValueError("n_atoms must be >= 2")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be < v_max")

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @property
    def z(self) -> np.ndarray:
        return self.v_min + np.arange(self.n_atoms) * self.delta


@dataclass
class AgentConfig:
    gamma: float = 0.99
    n_step: int = 3
    target_sync_period: int = 2000  # env steps
    batch_size: int = 32
    train_every: int = 4
    warmup_steps: int = 1000
    history_len: int = HISTORY_LEN
    lr: float = 1e-3
    adam_eps: float = 1.5e-4
    hidden: int = 128
    sigma0: float = 0.5
    n_atoms: int = 21
    v_min: float = -10.0
    v_max: float = 10.0
    buffer: BufferConfig = field(default_factory=BufferConfig)

    def __post_init__(self):
        if isinstance(self.buffer, dict):
            self.buffer = BufferConfig(**self.buffer)
        if self.history_len != HISTORY_LEN:
            raise ValueError(f"history_len is fixed at {HISTORY_LEN}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("n_step", "target_sync_period", "batch_size", "train_every", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def support(self) -> AtomSupport:
        return AtomSupport(self.n_atoms, self.v_min, self.v_max)

    def to_dict(self) -> dict:
        return asdict(self)


def dueling_aggregate(value, advantage):
    """logits[a, i] = V[i] + A[a, i] - mean_a' A[a', i]; leading batch axes pass through."""
    value = np.asarray(value, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return value[..., None, :] + advantage - advantage.mean(axis=-2, keepdims=True)


def dueling_aggregate_grad(g_logits):
    """Gradients of dueling_aggregate w.r.t. (V, A) given the logits gradient."""
    g_value = g_logits.sum(axis=-2)
    g_adv = g_logits - g_logits.mean(axis=-2, keepdims=True)
    return g_value, g_adv


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def q_values(probs, support: AtomSupport):
    """Expected return per action: sum_i probs[..., a, i] * z[i]."""
    return np.asarray(probs) @ support.z


def greedy(q) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest index
    return np.argmax(q, axis=-1)


def categorical_project(next_probs, reward, discount_n, support: AtomSupport):
    """Project the shifted distribution ``reward + discount_n * z`` back onto ``z``.

    Works on a single atom row or a batch of rows (``reward`` and ``discount_n``
    then broadcast per row). Each shifted atom is clamped to the support and its
    mass split linearly between the two neighbouring atoms.
    """
    p = np.asarray(next_probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    r = np.asarray(reward, dtype=np.float64).reshape(-1, 1)
    d = np.asarray(discount_n, dtype=np.float64).reshape(-1, 1)
    z = support.z
    tz = np.clip(r + d * z[None, :], support.v_min, support.v_max)
    b = (tz - support.v_min) / support.delta
    lo = np.floor(b).astype(np.int64)
    hi = np.ceil(b).astype(np.int64)
    # guard against float drift past the last atom
    lo = np.clip(lo, 0, support.n_atoms - 1)
    hi = np.clip(hi, 0, support.n_atoms - 1)
    w_hi = b - lo
    w_lo = 1.0 - w_hi
    same = lo == hi
    w_lo = np.where(same, 1.0, w_lo)
    w_hi = np.where(same, 0.0, w_hi)
    out = np.zeros_like(p)
    rows = np.broadcast_to(np.arange(p.shape[0])[:, None], lo.shape)
    np.add.at(out, (rows, lo), p * w_lo)
    np.add.at(out, (rows, hi), p * w_hi)
    return out[0] if single else out


class RainbowAgent:
    """Online/target network pair plus the acting and learning rules.

    ``freeze_mask`` names depth positions whose parameters are never updated.
    """

    def __init__(self, config: AgentConfig | None = None, seed: int = 0, network: nn.Network | None = None,
                 n_actions: int = N_ACTIONS, obs_shape=(10, 10, HISTORY_LEN), freeze_mask=None):
        self.config = config or AgentConfig()
        self.support = self.config.support
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)
        if network is None:
            network = nn.rainbow_network(n_actions, self.support.n_atoms, obs_shape,
                                         self.config.hidden, self.config.sigma0)
            network.init_params(self.rng)
        self.online = network
        self.target = network.copy()
        self.steps_since_sync = 0
        self.optimizer = nn.Adam(lr=self.config.lr, eps=self.config.adam_eps)
        self.freeze_mask = nn.resolve_freeze_mask(self.online, freeze_mask)
        self.replay = PrioritizedReplay(self.config.buffer, obs_shape)
        self.train_steps = 0

    # -- distributions -----------------------------------------------------

    def logits(self, net: nn.Network, obs, noise=None):
        out, cache = net.forward(obs, noise)
        n_atoms = self.support.n_atoms
        value = out[:, :n_atoms]
        adv = out[:, n_atoms:].reshape(-1, self.n_actions, n_atoms)
        return dueling_aggregate(value, adv), cache

    def distribution(self, net: nn.Network, obs, noise=None):
        return softmax(self.logits(net, obs, noise)[0])

    # -- acting --------------------------------------------------------------

    def act(self, stacked_obs, training: bool = True) -> int:
        obs = np.asarray(stacked_obs)[None]
        noise = nn.sample_noise(self.online, self.rng) if training else None
        q = q_values(self.distribution(self.online, obs, noise), self.support)
        return int(greedy(q)[0])

    # -- learning ------------------------------------------------------------

    def compute_target(self, batch, online_noise=None, target_noise=None):
        """Double-Q categorical target rows for a replay batch."""
        next_obs = batch["next_obs"]
        online_q = q_values(self.distribution(self.online, next_obs, online_noise), self.support)
        best = greedy(online_q)
        target_probs = self.distribution(self.target, next_obs, target_noise)
        rows = target_probs[np.arange(len(best)), best]
        discount = self.config.gamma ** batch["n_actual"] * (~np.asarray(batch["terminals"], dtype=bool))
        return categorical_project(rows, batch["returns"], discount, self.support)

    def learn_on_batch(self, batch, is_weights):
        """One gradient step on a given batch. Returns (loss, per-sample cross-entropy)."""
        online_noise = nn.sample_noise(self.online, self.rng)
        target_noise = nn.sample_noise(self.target, self.rng)
        target = self.compute_target(batch, online_noise, target_noise)
        logits, cache = self.logits(self.online, batch["obs"], online_noise)
        idx = np.arange(len(target))
        chosen = logits[idx, batch["actions"]]
        logp = log_softmax(chosen)
        ce = -(target * logp).sum(axis=-1)
        w = np.asarray(is_weights, dtype=np.float64)
        loss = float(np.mean(w * ce))

        g_chosen = (np.exp(logp) - target) * (w / len(w))[:, None]
        g_logits = np.zeros_like(logits)
        g_logits[idx, batch["actions"]] = g_chosen
        g_value, g_adv = dueling_aggregate_grad(g_logits)
        g_out = np.concatenate([g_value, g_adv.reshape(len(w), -1)], axis=1)
        grads = self.online.backward(cache, g_out, frozen=self.freeze_mask)
        nn.apply_gradients(self.online, grads, self.optimizer, self.freeze_mask)
        return loss, ce

    def train_step(self, beta: float | None = None):
        """Sample, learn, reprioritize, maybe sync. Returns ``(loss, td_errors)`` or None if replay is short."""
        cfg = self.config
        if len(self.replay) < cfg.batch_size:
            return None
        beta = cfg.buffer.beta0 if beta is None else beta
        batch, idx, weights = self.replay.sample(cfg.batch_size, beta, self.rng)
        loss, ce = self.learn_on_batch(batch, weights)
        self.replay.update_priorities(idx, ce)
        self.train_steps += 1
        self.steps_since_sync += cfg.train_every
        if self.steps_since_sync >= cfg.target_sync_period:
            self.sync_target()
        return loss, ce

    def sync_target(self) -> None:
        self.target.set_parameters({k: v.copy() for k, v in self.online.parameters().items()})
        self.steps_since_sync = 0
