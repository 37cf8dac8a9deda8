"""DQN over frozen CARNet features with proportional prioritized replay."""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .driving import N_ACTIONS, DrivingEnv, EnvConfig
from .metrics import MetricsLog
from .model import CARNet, Controller
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad
from .training import check_finite


@dataclass
class DqnConfig:
    steps: int = 50000
    buffer_size: int = 5000
    lr: float = 5e-3
    batch_size: int = 64
    gamma: float = 0.99
    alpha: float = 0.6
    beta0: float = 0.4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    target_sync: int = 1000
    learning_starts: int = 1000
    train_every: int = 1
    huber_beta: float = 1.0
    eval_episodes: int = 20
    eval_every: int = 5000
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)

    def epsilon(self, step: int) -> float:
        horizon = max(int(self.eps_fraction * self.steps), 1)
        frac = min(step / horizon, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def beta(self, step: int) -> float:
        frac = min(step / max(self.steps - 1, 1), 1.0)
        return self.beta0 + frac * (1.0 - self.beta0)


class PrioritizedReplay:
    """Ring buffer of (features, action, reward, next features, done) with proportional priorities."""

    def __init__(self, capacity: int, dim: int, alpha: float, rng: np.random.Generator, eps: float = 1e-6):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity, self.alpha, self.rng, self.eps = capacity, alpha, rng, eps
        self.obs = np.zeros((capacity, dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, dim), dtype=np.float32)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity, dtype=np.float64)
        self.done = np.zeros(capacity, dtype=np.float64)
        self.priority = np.zeros(capacity, dtype=np.float64)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        p = self.priority[:self.size].max() if self.size else 1.0
        i = self.pos
        self.obs[i], self.next_obs[i] = obs, next_obs
        self.action[i], self.reward[i], self.done[i] = action, reward, float(done)
        self.priority[i] = p
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def probabilities(self) -> np.ndarray:
        scaled = self.priority[:self.size] ** self.alpha
        return scaled / scaled.sum()

    def sample(self, n: int, beta: float):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        probs = self.probabilities()
        cdf = np.cumsum(probs)
        idx = np.minimum(np.searchsorted(cdf, self.rng.random(n) * cdf[-1], side="right"), self.size - 1)
        weights = (self.size * probs[idx]) ** (-beta)
        weights /= weights.max()
        return idx, weights

    def update(self, idx: np.ndarray, td_error: np.ndarray) -> None:
        self.priority[idx] = np.abs(td_error) + self.eps


class FeatureTracker:
    """Keeps the last ``T - 1`` latents/sensors/previous actions of an episode and
    produces the Q-network input (latest latent, predicted next latent)."""

    def __init__(self, backbone: CARNet):
        self.backbone = backbone
        self.k = backbone.cfg.window - 1
        self.lat: deque = deque(maxlen=self.k)
        self.sens: deque = deque(maxlen=self.k)
        self.act: deque = deque(maxlen=self.k)

    def reset(self, frame, sensors) -> np.ndarray:
        for buf in (self.lat, self.sens, self.act):
            buf.clear()
        return self.push(frame, sensors, None)

    def push(self, frame, sensors, prev_action: int | None) -> np.ndarray:
        cfg = self.backbone.cfg
        with self.backbone.evaluating(), no_grad():
            z = self.backbone.encode(np.asarray(frame, dtype=self.backbone.dtype)[None]).data[0]
        onehot = np.zeros(cfg.action_dim, dtype=self.backbone.dtype)
        if cfg.action_dim and prev_action is not None:
            onehot[prev_action] = 1.0
        if not self.lat:   # pad the history with the first observation
            for _ in range(self.k - 1):
                self._append(z, sensors, np.zeros_like(onehot))
        self._append(z, sensors, onehot)
        return self.features()

    def _append(self, z, sensors, onehot) -> None:
        self.lat.append(z)
        self.sens.append(sensors)
        self.act.append(onehot)

    def features(self) -> np.ndarray:
        cfg = self.backbone.cfg
        lat = Tensor(np.stack(self.lat)[None])
        sens = np.stack(self.sens)[None] if cfg.sensor_dim else None
        act = np.stack(self.act)[None] if cfg.action_dim else None
        with self.backbone.evaluating(), no_grad():
            h = self.backbone.propagate(lat, sens, act)
        return np.concatenate([self.lat[-1], h.data[0, -1, :cfg.latent_size]]).astype(np.float32)


def q_network(backbone: CARNet, seed: int) -> Controller:
    return Controller(backbone.cfg.latent_size, backbone.cfg.controller_widths, stream(seed, "init", "q"),
                      dtype=np.float32)


def greedy(q: Controller, feats: np.ndarray) -> int:
    with no_grad():
        return int(np.argmax(q(feats[None]).data[0]))


def run_episodes(backbone: CARNet, policy, n: int, seed: int, env_cfg: EnvConfig | None = None,
                 label: str = "eval") -> np.ndarray:
    """Total reward of ``n`` episodes; ``policy(features, rng)`` returns an action index.

    Episode ``i`` uses the same road and start for every policy given the same ``seed``.
    """
    backbone.eval()
    env = DrivingEnv(env_cfg or EnvConfig(), seed=seed)
    tracker = FeatureTracker(backbone)
    totals = []
    for i in range(n):
        g = stream(seed, label, "policy", i)
        frame, sens = env.reset(seed=int(stream(seed, label, "episode", i).integers(2 ** 31)))
        feats = tracker.reset(frame, sens)
        total, done = 0.0, False
        while not done:
            a = policy(feats, g)
            frame, sens, r, done, _ = env.step(a)
            total += r
            if not done:
                feats = tracker.push(frame, sens, a)
        totals.append(total)
    return np.asarray(totals)


def random_policy(_feats, g: np.random.Generator) -> int:
    return int(g.integers(N_ACTIONS))


def td_loss(q: Controller, target: Controller, batch, weights: np.ndarray, gamma: float, beta: float):
    obs, act, rew, nxt, done = batch
    with no_grad():
        q_next = target(nxt).data.max(axis=-1)
    y = (rew + gamma * (1.0 - done) * q_next).astype(np.float32)
    q_all = q(obs)
    q_sa = T.reduce_sum(T.mul(q_all, np.eye(q_all.shape[-1], dtype=np.float32)[act]), axis=-1)
    d = T.sub(q_sa, y)
    ad = np.abs(d.data)
    per = T.where(ad < beta, T.mul(T.mul(d, d), 0.5 / beta), T.sub(T.abs_(d), 0.5 * beta))
    loss = T.reduce_mean(T.mul(per, weights.astype(np.float32)))
    return loss, d.data.astype(np.float64)


@dataclass
class DqnResult:
    q: Controller
    eval_rewards: np.ndarray
    random_rewards: np.ndarray
    episode_rewards: list[float]


def train_dqn(backbone: CARNet, cfg: DqnConfig, log: MetricsLog | None = None) -> DqnResult:
    backbone.eval()
    backbone.set_requires_grad(False)
    rng = stream(cfg.seed, "dqn")
    q = q_network(backbone, cfg.seed)
    target = copy.deepcopy(q)
    opt = Adam(q.parameters(), cfg.lr)
    dim = 2 * backbone.cfg.latent_size
    replay = PrioritizedReplay(cfg.buffer_size, dim, cfg.alpha, stream(cfg.seed, "dqn", "replay"))
    env = DrivingEnv(cfg.env, seed=cfg.seed)
    tracker = FeatureTracker(backbone)
    episode = 0

    def new_episode():
        frame, sens = env.reset(seed=int(stream(cfg.seed, "dqn", "episode", episode).integers(2 ** 31)))
        return tracker.reset(frame, sens)

    feats = new_episode()
    ep_reward, episode_rewards, recent = 0.0, [], []
    for step in range(cfg.steps):
        if rng.random() < cfg.epsilon(step):
            a = int(rng.integers(N_ACTIONS))
        else:
            a = greedy(q, feats)
        frame, sens, r, done, _ = env.step(a)
        ep_reward += r
        nxt = feats if done else tracker.push(frame, sens, a)
        # running out of time is not a terminal state of the task
        terminal = done and env.t < cfg.env.max_steps
        replay.add(feats, a, r, nxt, terminal)
        feats = nxt
        if done:
            episode_rewards.append(ep_reward)
            recent.append(ep_reward)
            episode += 1
            ep_reward = 0.0
            feats = new_episode()
        if step >= cfg.learning_starts and step % cfg.train_every == 0:
            idx, w = replay.sample(cfg.batch_size, cfg.beta(step))
            batch = (replay.obs[idx], replay.action[idx], replay.reward[idx], replay.next_obs[idx], replay.done[idx])
            loss, td = td_loss(q, target, batch, w, cfg.gamma, cfg.huber_beta)
            check_finite(float(loss.data), "train-rl", step)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            replay.update(idx, td)
        if (step + 1) % cfg.target_sync == 0:
            for dst, src in zip(target.parameters(), q.parameters()):
                dst.data = src.data.copy()
        if log and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            ev = run_episodes(backbone, lambda f, g: greedy(q, f), max(cfg.eval_episodes // 4, 1),
                              cfg.seed, cfg.env, label="dqn-probe")
            log.log("train-rl/episodes", step + 1,
                    reward_mean=float(np.mean(recent)) if recent else None,
                    reward_std=float(np.std(recent)) if recent else None)
            log.log("train-rl/probe", step + 1, reward_mean=float(ev.mean()), reward_std=float(ev.std()))
            recent = []
    evals = run_episodes(backbone, lambda f, g: greedy(q, f), cfg.eval_episodes, cfg.seed + 1, cfg.env)
    rand = run_episodes(backbone, random_policy, cfg.eval_episodes, cfg.seed + 1, cfg.env)
    if log:
        log.log("train-rl/greedy", cfg.steps, reward_mean=float(evals.mean()), reward_std=float(evals.std()))
        log.log("train-rl/random", cfg.steps, reward_mean=float(rand.mean()), reward_std=float(rand.std()))
    return DqnResult(q, evals, rand, episode_rewards)
