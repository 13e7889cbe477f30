"""Discrete-time microsimulation over a :class:`RoadNetwork`.

One-dimensional car following per lane with semi-implicit Euler updates,
signal programs with yellow interludes, loop detectors near the stop line
and per-vehicle waiting / stop time accounting.  The state is a bundle of
numpy arrays advanced in place by the kernels in :mod:`._kernels`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .netmodel import RoadNetwork, Scenario, SimParams, scenario_departures


class InvalidActionError(ValueError):
    def __init__(self, intersection: int, phase, phase_count: int):
        super().__init__(
            f"intersection {intersection}: phase {phase} out of range [0, {phase_count})"
        )
        self.intersection = intersection


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0
    wait_threshold: float = 0.1
    yellow_duration: int = 3
    stop_eps: float = 0.01  # speeds below this snap to a standstill
    sealed: bool = False  # sinks hold vehicles instead of absorbing them


@dataclass(frozen=True)
class SignalState:
    intersection_id: int
    current_phase: int
    in_yellow: bool
    yellow_remaining: int
    pending_phase: int | None


@dataclass(frozen=True)
class VehicleState:
    id: int
    route: tuple[int, ...]
    lane_index: int
    pos: float
    speed: float
    max_speed: float
    waiting_time_acc: float
    stop_time_acc: float
    depart_step: int
    arrived: bool


class SimState:
    """Mutable world state.  Use the module functions to advance it."""

    def __init__(self, scenario: Scenario, config: SimConfig, departures):
        net = scenario.network
        params = scenario.sim_params
        if params.reaction_time > config.dt:
            raise ValueError("reaction_time longer than one step is not supported")
        self.scenario = scenario
        self.network = net
        self.config = config
        self.params = params
        self.clock = 0

        n_lanes = len(net.lanes)
        n = net.n_intersections
        m = net.max_phase_count
        self.lane_len = np.array([l.length for l in net.lanes], dtype=np.float64)
        self.lane_speed = np.array([l.speed_limit for l in net.lanes], dtype=np.float64)
        self.lane_zone = np.array([l.detector_zone for l in net.lanes], dtype=np.float64)
        self.lane_node = np.array(
            [l.to_node if net.is_intersection(l.to_node) else -1 for l in net.lanes], dtype=np.int64
        )
        self.lane_ctrl = self.lane_node >= 0
        self.phase_count = np.array([x.phase_count for x in net.intersections], dtype=np.int64)
        self.phase_mask = np.zeros((n_lanes, m), dtype=np.bool_)
        for x in net.intersections:
            for p, lanes in enumerate(x.phase_table):
                self.phase_mask[list(lanes), p] = True

        self.current_phase = np.zeros(n, dtype=np.int64)
        self.in_yellow = np.zeros(n, dtype=np.bool_)
        self.yellow_remaining = np.zeros(n, dtype=np.int64)
        self.pending_phase = np.full(n, -1, dtype=np.int64)
        self.lane_green = np.ones(n_lanes, dtype=np.bool_)
        self._update_green()
        self.lane_green_prev = self.lane_green.copy()

        cap = int(max(math.floor(l.length / (params.vehicle_length + params.min_gap)) for l in net.lanes)) + 2
        self.lane_veh = np.full((n_lanes, cap), -1, dtype=np.int64)
        self.lane_n = np.zeros(n_lanes, dtype=np.int64)
        self.tail_limit = np.zeros(n_lanes, dtype=np.float64)

        nv = len(departures)
        self.dep_step = np.array([d for d, _ in departures], dtype=np.int64)
        self.route_len = np.array([len(r) if r else 0 for _, r in departures], dtype=np.int64)
        self.route_off = np.zeros(nv, dtype=np.int64)
        if nv:
            self.route_off[1:] = np.cumsum(self.route_len)[:-1]
        self.route_lanes = np.array([lane for _, r in departures if r for lane in r], dtype=np.int64)
        self.status = np.zeros(nv, dtype=np.int8)
        self.veh_lane = np.full(nv, -1, dtype=np.int64)
        self.pos = np.zeros(nv)
        self.speed = np.zeros(nv)
        self.rk = np.zeros(nv, dtype=np.int64)
        self.wt = np.zeros(nv)
        self.st = np.zeros(nv)
        self.moved = np.zeros(nv, dtype=np.bool_)
        rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 1]))
        self.rng = rng
        self.speed_factor = np.clip(rng.normal(1.0, params.speed_deviation, nv), 0.5, 1.5)
        self.backlog = np.zeros(nv, dtype=np.int64)
        self.n_backlog = 0
        self.next_due = 0
        self.counters = np.zeros(3, dtype=np.int64)  # spawned, arrived, skipped

    # -- bookkeeping -------------------------------------------------------

    @property
    def spawned(self) -> int:
        return int(self.counters[0])

    @property
    def arrived(self) -> int:
        return int(self.counters[1])

    @property
    def skipped(self) -> int:
        return int(self.counters[2])

    @property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.status == K.ACTIVE)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.status == K.ACTIVE))

    def signal(self, i: int) -> SignalState:
        return SignalState(
            i,
            int(self.current_phase[i]),
            bool(self.in_yellow[i]),
            int(self.yellow_remaining[i]),
            int(self.pending_phase[i]) if self.in_yellow[i] else None,
        )

    def vehicle(self, v: int) -> VehicleState:
        off, n = self.route_off[v], self.route_len[v]
        lane = self.veh_lane[v]
        limit = self.lane_speed[lane] if lane >= 0 else self.lane_speed[self.route_lanes[off]]
        return VehicleState(
            int(v),
            tuple(int(x) for x in self.route_lanes[off:off + n]),
            int(self.rk[v]),
            float(self.pos[v]),
            float(self.speed[v]),
            float(self.speed_factor[v] * limit),
            float(self.wt[v]),
            float(self.st[v]),
            int(self.dep_step[v]),
            bool(self.status[v] == K.ARRIVED),
        )

    def lane_vehicles(self, lane: int) -> np.ndarray:
        return self.lane_veh[lane, :self.lane_n[lane]].copy()

    def commanded_phases(self) -> np.ndarray:
        """Phase each signal is heading to: the pending phase while yellow."""
        return np.where(self.in_yellow, self.pending_phase, self.current_phase)

    def _update_green(self) -> None:
        ctrl = self.lane_ctrl
        node = self.lane_node[ctrl]
        idx = np.flatnonzero(ctrl)
        cur = self.current_phase[node]
        pend = np.where(self.pending_phase[node] >= 0, self.pending_phase[node], cur)
        green = self.phase_mask[idx, cur] & (~self.in_yellow[node] | self.phase_mask[idx, pend])
        self.lane_green[idx] = green

    def _grow(self, extra: int) -> None:
        def pad(a, fill):
            return np.concatenate([a, np.full(extra, fill, dtype=a.dtype)])

        self.dep_step = pad(self.dep_step, np.iinfo(np.int64).max)
        self.route_len = pad(self.route_len, 0)
        self.route_off = pad(self.route_off, 0)
        self.status = pad(self.status, K.SCHEDULED)
        self.veh_lane = pad(self.veh_lane, -1)
        for name in ("pos", "speed", "wt", "st"):
            setattr(self, name, pad(getattr(self, name), 0.0))
        self.rk = pad(self.rk, 0)
        self.moved = pad(self.moved, False)
        self.speed_factor = pad(self.speed_factor, 1.0)
        self.backlog = pad(self.backlog, 0)


def sim_reset(scenario: Scenario, config: SimConfig | None = None) -> SimState:
    """Fresh state at clock 0 with every flow of ``scenario`` scheduled."""
    config = config or SimConfig()
    departures = scenario_departures(scenario, config.dt)
    return SimState(scenario, config, departures)


def apply_signal_action(state: SimState, action: Sequence[int]) -> SimState:
    """Request a phase per intersection.

    A different phase starts a yellow interlude of ``yellow_duration`` steps
    after which it activates; requests made during yellow are ignored.
    """
    action = np.asarray(action, dtype=np.int64).reshape(-1)
    n = state.network.n_intersections
    if action.shape[0] != n:
        raise ValueError(f"expected {n} phase choices, got {action.shape[0]}")
    for i in range(n):
        if not 0 <= action[i] < state.phase_count[i]:
            raise InvalidActionError(i, int(action[i]), int(state.phase_count[i]))
    switch = (~state.in_yellow) & (action != state.current_phase)
    if state.config.yellow_duration > 0:
        state.in_yellow[switch] = True
        state.pending_phase[switch] = action[switch]
        state.yellow_remaining[switch] = state.config.yellow_duration
    else:
        state.current_phase[switch] = action[switch]
    state._update_green()
    return state


def sim_step(state: SimState, trace: "TraceWriter | None" = None) -> SimState:
    cfg, prm = state.config, state.params
    state.n_backlog, state.next_due = K.spawn(
        state.clock, state.dep_step, state.route_off, state.route_len, state.route_lanes,
        state.status, state.veh_lane, state.pos, state.speed, state.rk,
        state.lane_veh, state.lane_n, state.backlog, state.n_backlog, state.next_due,
        prm.vehicle_length, prm.min_gap, state.counters,
    )
    state._update_green()
    arrivals = K.advance(
        state.lane_len, state.lane_speed, state.lane_ctrl, state.lane_green, state.lane_green_prev,
        state.lane_veh, state.lane_n, state.route_off, state.route_len, state.route_lanes,
        state.status, state.veh_lane, state.pos, state.speed, state.rk,
        state.speed_factor, state.wt, state.st, state.moved, state.tail_limit,
        cfg.dt, prm.start_accel, prm.stop_decel, prm.vehicle_length, prm.min_gap,
        cfg.wait_threshold, cfg.stop_eps, prm.reaction_time > 0, cfg.sealed,
        state.counters,
    )
    y = state.in_yellow
    state.yellow_remaining[y] -= 1
    done = y & (state.yellow_remaining <= 0)
    state.current_phase[done] = state.pending_phase[done]
    state.pending_phase[done] = -1
    state.in_yellow[done] = False
    state.yellow_remaining[done] = 0
    state._update_green()
    state.clock += 1
    if trace is not None:
        trace.record(state, int(arrivals))
    return state


def read_detectors(state: SimState) -> tuple[np.ndarray, np.ndarray]:
    """Per-lane waiting counts and detector-zone waiting-time sums (all lanes)."""
    n_lanes = state.lane_len.shape[0]
    ids = state.active_ids
    lane = state.veh_lane[ids]
    waiting = state.speed[ids] <= state.config.wait_threshold
    counts = np.bincount(lane[waiting], minlength=n_lanes)
    in_zone = state.lane_len[lane] - state.pos[ids] <= state.lane_zone[lane]
    sums = np.bincount(lane[in_zone], weights=state.wt[ids][in_zone], minlength=n_lanes)
    return counts, sums


def place_vehicle(
    state: SimState,
    route: Sequence[int],
    lane_index: int = 0,
    pos: float = 0.0,
    speed: float = 0.0,
    speed_factor: float = 1.0,
    waiting_time: float = 0.0,
) -> int:
    """Put an extra vehicle straight into the network; returns its id."""
    route = [int(x) for x in route]
    lane = route[lane_index]
    if not 0 <= pos <= state.lane_len[lane]:
        raise ValueError(f"pos {pos} outside lane {lane}")
    prm = state.params
    ids = list(state.lane_vehicles(lane))
    at = sum(1 for u in ids if state.pos[u] > pos)
    if at > 0 and state.pos[ids[at - 1]] - prm.vehicle_length - prm.min_gap < pos - 1e-9:
        raise ValueError("placement violates the gap to the leader")
    if at < len(ids) and pos - prm.vehicle_length - prm.min_gap < state.pos[ids[at]] - 1e-9:
        raise ValueError("placement violates the gap to the follower")
    if len(ids) + 1 > state.lane_veh.shape[1]:
        raise ValueError(f"lane {lane} is full")

    state._grow(1)
    v = state.status.shape[0] - 1
    state.route_off[v] = state.route_lanes.shape[0]
    state.route_len[v] = len(route)
    state.route_lanes = np.concatenate([state.route_lanes, np.array(route, dtype=np.int64)])
    state.dep_step[v] = state.clock
    state.status[v] = K.ACTIVE
    state.rk[v] = lane_index
    state.pos[v] = pos
    state.speed[v] = speed
    state.speed_factor[v] = speed_factor
    state.wt[v] = waiting_time
    state.veh_lane[v] = lane
    ids.insert(at, v)
    state.lane_veh[lane, :len(ids)] = ids
    state.lane_n[lane] = len(ids)
    state.counters[0] += 1
    return v


class TraceWriter:
    """One JSON record per step: clock, waiting counts on controlled lanes, arrivals."""

    def __init__(self, fh):
        self.fh = fh

    def record(self, state: SimState, arrivals: int) -> None:
        counts, _ = read_detectors(state)
        rec = {
            "clock": state.clock,
            "waiting_count": counts[state.lane_ctrl].tolist(),
            "arrivals": arrivals,
            "active": state.n_active,
        }
        self.fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
