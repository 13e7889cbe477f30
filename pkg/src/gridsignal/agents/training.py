"""Episode loops: training learners and rolling out any controller."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..env import EpisodeMetrics, TrafficEnv
from ..netmodel import Scenario
from .actor_critic import ACNet, actor_critic_update, build_acnet
from .baselines import ActionMatrix, act_auction_nash, act_fixed, act_random
from .config import AgentConfig
from .dqn import QNet, build_qnet, epsilon_at, select_action, sync_target, td_update
from .replay import Batch, ReplayBuffer, Transition

log = logging.getLogger(__name__)


def _rngs(seed: int, k: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 7]).spawn(k)]


def uses_phase_features(config: AgentConfig) -> bool:
    return config.variant not in ("marl_s", "marl_g")


class Controller:
    """Chooses one phase per intersection from the environment's current state."""

    def act(self, env: TrafficEnv, obs) -> np.ndarray:
        raise NotImplementedError


class RandomController(Controller):
    def __init__(self, rng):
        self.rng = rng

    def act(self, env, obs):
        return act_random(env.mask, self.rng).chosen


class FixedController(Controller):
    def __init__(self, dwell: int):
        self.dwell = dwell

    def act(self, env, obs):
        return act_fixed(env.state.clock, self.dwell, env.state.phase_count).chosen


class AuctionController(Controller):
    def __init__(self, probes: int, rng, normalizer: float = 10.0):
        self.probes, self.rng, self.normalizer = probes, rng, normalizer

    def act(self, env, obs):
        return act_auction_nash(env.state, self.probes, self.rng, self.normalizer).chosen


class GreedyController(Controller):
    """Epsilon-free policy of a trained Q or actor-critic network."""

    def __init__(self, net):
        self.net = net

    def scores(self, env, obs) -> ActionMatrix:
        return self.net.action_matrix(env.features(obs))

    def act(self, env, obs):
        return self.scores(env, obs).chosen


def make_controller(config: AgentConfig, scenario: Scenario, seed: int = 0, net=None) -> Controller:
    rng = _rngs(seed, 1)[0]
    if config.variant == "random":
        return RandomController(rng)
    if config.variant == "fixed":
        return FixedController(config.fixed_dwell)
    if config.variant == "auction":
        return AuctionController(config.auction_probes, rng, config.auction_normalizer)
    if net is None:
        raise ValueError(f"{config.variant} needs trained parameters")
    return GreedyController(net)


def rollout(scenario: Scenario, controller: Controller, steps: int, alpha: float = 1.0,
            include_phases: bool = True) -> EpisodeMetrics:
    env = TrafficEnv(scenario, episode_length=steps, alpha=alpha, include_phases=include_phases)
    obs = env.reset()
    done = False
    while not done:
        obs, _, done = env.step(controller.act(env, obs))
    return env.metrics


def build_network(config: AgentConfig, scenario: Scenario, seed: int):
    rng = _rngs(seed, 3)[0]
    if config.learner == "actor_critic":
        return build_acnet(config, scenario, rng)
    return build_qnet(config, scenario, rng)


@dataclass
class TrainResult:
    net: QNet | ACNet
    curves: list = field(default_factory=list)
    learn_steps: int = 0


def train(scenario: Scenario, config: AgentConfig, episodes: int = 500, steps: int = 1000,
          seed: int = 0, on_episode=None) -> TrainResult:
    """Train a learner with per-step updates; returns the network and one curve row per episode.

    Curve rows: episode, cost (summed per-step Cost_wt in seconds), reward,
    epsilon, loss (mean over the episode's updates; nan if none).
    """
    if not config.learned:
        raise ValueError(f"{config.variant} does not learn")
    if episodes < 1 or steps < 1:
        raise ValueError("episodes and steps must be positive")
    if config.learner == "actor_critic":
        return _train_ac(scenario, config, episodes, steps, seed, on_episode)
    _, explore_rng, replay_rng = _rngs(seed, 3)
    net = build_network(config, scenario, seed)
    target = net.clone()
    opt = T.Adam(config.lr)
    buf = ReplayBuffer(config.replay_capacity)
    env = TrafficEnv(scenario, steps, config.alpha, include_phases=uses_phase_features(config))
    result = TrainResult(net)
    learn_steps = 0
    for ep in range(episodes):
        obs = env.reset()
        rows = env.features(obs)
        done = False
        losses = []
        while not done:
            eps = epsilon_at(config, learn_steps)
            am = select_action(net.action_matrix(rows), eps, explore_rng)
            obs, reward, done = env.step(am.chosen)
            nxt = env.features(obs)
            buf.push(Transition(rows, am.chosen, reward.r_total, nxt, done))
            rows = nxt
            if len(buf) >= config.batch:
                batch = buf.sample(config.batch, replay_rng)
                losses.append(td_update(net, target, batch, config.gamma, opt, config.reward_scale))
                learn_steps += 1
                sync_target(net, target, learn_steps, config.target_sync)
        row = {
            "episode": ep,
            "cost": env.metrics.cost_wt_total,
            "reward": env.metrics.reward_sum,
            "epsilon": epsilon_at(config, learn_steps),
            "loss": float(np.mean(losses)) if losses else float("nan"),
        }
        result.curves.append(row)
        log.info("episode %d cost %.0f reward %.1f eps %.3f", ep, row["cost"], row["reward"], row["epsilon"])
        if on_episode is not None:
            on_episode(row)
    result.learn_steps = learn_steps
    return result


def _train_ac(scenario, config, episodes, steps, seed, on_episode) -> TrainResult:
    _, sample_rng, _ = _rngs(seed, 3)
    net = build_network(config, scenario, seed)
    opt = T.Adam(config.lr)
    env = TrafficEnv(scenario, steps, config.alpha)
    result = TrainResult(net)
    learn_steps = 0
    for ep in range(episodes):
        obs = env.reset()
        rows = env.features(obs)
        done = False
        traj, losses = [], []
        while not done:
            chosen = net.sample_action(rows, sample_rng)
            obs, reward, done = env.step(chosen)
            nxt = env.features(obs)
            traj.append(Transition(rows, chosen, reward.r_total, nxt, done))
            rows = nxt
            if len(traj) >= config.ac_batch or done:
                losses.append(actor_critic_update(
                    net, Batch.of(traj), config.gamma, opt, config.reward_scale,
                    config.entropy_coef, config.value_coef,
                ))
                learn_steps += 1
                traj = []
        row = {
            "episode": ep,
            "cost": env.metrics.cost_wt_total,
            "reward": env.metrics.reward_sum,
            "epsilon": 0.0,
            "loss": float(np.mean(losses)) if losses else float("nan"),
        }
        result.curves.append(row)
        if on_episode is not None:
            on_episode(row)
    result.learn_steps = learn_steps
    return result
