"""MDP layer over the simulator: observations, rewards, costs and episodes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Scenario
from .simcore import SimConfig, SimState, apply_signal_action, read_detectors, sim_reset, sim_step

WT_SCALE = 100.0  # seconds; divides waiting sums in learner features


@dataclass
class Observation:
    """Detector state over controlled lanes (global lane order) plus signal phases."""

    s_num: np.ndarray
    s_wt: np.ndarray
    s_p: np.ndarray | None
    step: int

    def vector(self) -> np.ndarray:
        parts = [self.s_num, self.s_wt]
        if self.s_p is not None:
            parts.append(self.s_p)
        return np.concatenate(parts).astype(np.float64)


@dataclass(frozen=True)
class RewardBreakdown:
    r_wt: float
    r_uc: int
    r_total: float
    alpha: float


@dataclass
class EpisodeMetrics:
    cost_wt_per_step: list = field(default_factory=list)
    total_stop_time: float = 0.0
    arrivals: int = 0
    reward_sum: float = 0.0

    @property
    def cost_wt_total(self) -> float:
        return float(np.sum(self.cost_wt_per_step))


def _controlled(state: SimState) -> np.ndarray:
    idx = getattr(state, "_ctrl_idx", None)
    if idx is None:
        idx = state._ctrl_idx = np.flatnonzero(state.lane_ctrl)
    return idx


def observe(state: SimState, include_phases: bool = True) -> Observation:
    counts, sums = read_detectors(state)
    idx = _controlled(state)
    return Observation(
        s_num=counts[idx].astype(np.float64),
        s_wt=sums[idx],
        s_p=state.current_phase.copy() if include_phases else None,
        step=state.clock,
    )


def compute_cost(state: SimState) -> float:
    """Cost_wt: accumulated waiting time summed over vehicles in the network."""
    return float(state.wt[state.status == 1].sum())


def total_stop_time(state: SimState) -> float:
    """Stop time of every vehicle that has entered, including ones that left."""
    return float(state.st[state.status >= 1].sum())


def compute_reward(prev_cost, cur_cost, prev_phases, cur_phases, alpha: float) -> RewardBreakdown:
    """Hybrid reward; pass commanded phases so a switch counts from its decision step."""
    if prev_cost < 0 or cur_cost < 0:
        raise ValueError("costs must be non-negative")
    r_wt = float(prev_cost) - float(cur_cost)
    r_uc = int(np.sum(np.asarray(prev_phases) == np.asarray(cur_phases)))
    return RewardBreakdown(r_wt, r_uc, r_wt + alpha * r_uc, float(alpha))


def env_step(state: SimState, action, alpha: float = 1.0, episode_length: int = 1000,
             include_phases: bool = True):
    """Apply ``action``, advance one step; returns (observation, reward, done)."""
    prev_cost = compute_cost(state)
    prev_phases = state.commanded_phases()
    apply_signal_action(state, action)
    cur_phases = state.commanded_phases()
    sim_step(state)
    reward = compute_reward(prev_cost, compute_cost(state), prev_phases, cur_phases, alpha)
    return observe(state, include_phases), reward, state.clock >= episode_length


class FeatureLayout:
    """Maps observations to fixed-width per-intersection feature rows.

    Row ``i`` holds ``[count/capacity per lane, wt/100 per lane, one-hot phase]``
    with lanes taken from the intersection's incoming list and zero padding up
    to the widest intersection.
    """

    def __init__(self, state_or_scenario, include_phases: bool = True):
        scenario = getattr(state_or_scenario, "scenario", state_or_scenario)
        net = scenario.network
        prm = scenario.sim_params
        ctrl = net.controlled_lanes()
        where = {lane: k for k, lane in enumerate(ctrl)}
        self.n = net.n_intersections
        self.m = net.max_phase_count
        self.max_lanes = max(len(x.incoming_lane_ids) for x in net.intersections)
        self.include_phases = include_phases
        self.lane_idx = np.zeros((self.n, self.max_lanes), dtype=np.int64)
        self.lane_ok = np.zeros((self.n, self.max_lanes), dtype=bool)
        cap = np.ones((self.n, self.max_lanes))
        for x in net.intersections:
            for j, lane in enumerate(x.incoming_lane_ids):
                self.lane_idx[x.id, j] = where[lane]
                self.lane_ok[x.id, j] = True
                cap[x.id, j] = net.lanes[lane].length / (prm.vehicle_length + prm.min_gap)
        self.capacity = cap
        self.mask = np.zeros((self.n, self.m), dtype=bool)
        for x in net.intersections:
            self.mask[x.id, :x.phase_count] = True
        self.width = 2 * self.max_lanes + (self.m if include_phases else 0)

    def rows(self, obs: Observation, phases=None) -> np.ndarray:
        """Feature rows ``(n, width)``; ``phases`` overrides ``obs.s_p`` for the one-hot."""
        cnt = np.where(self.lane_ok, obs.s_num[self.lane_idx], 0.0) / self.capacity
        wt = np.where(self.lane_ok, obs.s_wt[self.lane_idx], 0.0) / WT_SCALE
        parts = [cnt, wt]
        if self.include_phases:
            parts.append(np.eye(self.m)[obs.s_p if phases is None else phases])
        return np.concatenate(parts, axis=1)


class TrafficEnv:
    """Owns one SimState and runs fixed-length episodes."""

    def __init__(self, scenario: Scenario, episode_length: int = 1000, alpha: float = 1.0,
                 config: SimConfig | None = None, include_phases: bool = True):
        if episode_length <= 0:
            raise ValueError("episode_length must be positive")
        self.scenario = scenario
        self.episode_length = episode_length
        self.alpha = alpha
        self.config = config
        self.include_phases = include_phases
        self.layout = FeatureLayout(scenario, include_phases=include_phases)
        self.state: SimState | None = None
        self.metrics = EpisodeMetrics()

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def mask(self) -> np.ndarray:
        return self.layout.mask

    def reset(self) -> Observation:
        self.state = sim_reset(self.scenario, self.config)
        self.metrics = EpisodeMetrics()
        return observe(self.state, True)

    def features(self, obs: Observation) -> np.ndarray:
        """Learner rows for ``obs``; the one-hot shows the phase actually displayed."""
        return self.layout.rows(obs)

    def step(self, action):
        obs, reward, done = env_step(self.state, action, self.alpha, self.episode_length, True)
        m = self.metrics
        m.cost_wt_per_step.append(compute_cost(self.state))
        m.reward_sum += reward.r_total
        if done:
            m.total_stop_time = total_stop_time(self.state)
            m.arrivals = self.state.arrived
        return obs, reward, done


def metrics_row(scene: str, flow, agent: str, seed: int, episode: int, metrics: EpisodeMetrics) -> dict:
    return {
        "scene": scene,
        "flow": flow,
        "agent": agent,
        "seed": seed,
        "episode": episode,
        "cost": metrics.cost_wt_total,
        "reward": metrics.reward_sum,
        "stop_time": metrics.total_stop_time,
        "arrivals": metrics.arrivals,
    }
