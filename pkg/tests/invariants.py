"""Step-by-step checker for the simulator's safety and accounting invariants."""

import numpy as np

from gridsignal.simcore import apply_signal_action, sim_step

EPS = 1e-9


class InvariantMonitor:
    def __init__(self, state):
        self.state = state
        self.violations: list[str] = []
        self.yellow_age = np.zeros(state.network.n_intersections, dtype=np.int64)

    def _fail(self, msg):
        self.violations.append(f"t={self.state.clock}: {msg}")

    def step(self, action):
        s = self.state
        prm, cfg = s.params, s.config
        apply_signal_action(s, action)
        green = s.lane_green.copy()
        phase0 = s.current_phase.copy()
        yellow0 = s.in_yellow.copy()
        active0 = s.status == 1
        lane0, rk0 = s.veh_lane.copy(), s.rk.copy()
        wt0, st0 = s.wt.copy(), s.st.copy()

        sim_step(s)

        # conservation
        if s.spawned != s.n_active + s.arrived + s.skipped:
            self._fail(f"conservation {s.spawned} != {s.n_active}+{s.arrived}+{s.skipped}")
        ids = s.active_ids
        # bounds
        lane_len = s.lane_len[s.veh_lane[ids]]
        if (s.pos[ids] < -EPS).any() or (s.pos[ids] > lane_len + EPS).any() or (s.speed[ids] < 0).any():
            self._fail("position or speed out of bounds")
        # no collisions
        for lane in range(len(s.lane_n)):
            vs = s.lane_vehicles(lane)
            if len(vs) > 1:
                gaps = s.pos[vs[:-1]] - prm.vehicle_length - s.pos[vs[1:]]
                if (gaps < prm.min_gap - 1e-6).any():
                    self._fail(f"collision on lane {lane}: min gap {gaps.min():.4f}")
        # no red running: vehicles on a red controlled lane stay on it
        held = active0 & s.lane_ctrl[np.maximum(lane0, 0)] & ~green[np.maximum(lane0, 0)] & (lane0 >= 0)
        # trips may end on an internal lane; arriving at its end is not a crossing
        last_lane = rk0 == s.route_len - 1
        crossed = held & ((s.rk != rk0) | ((s.status != 1) & ~last_lane))
        if crossed.any():
            self._fail(f"red light run by vehicles {np.flatnonzero(crossed).tolist()}")
        # monotone accounting for vehicles that stayed in the network
        stay = active0 & (s.status == 1)
        if (s.wt[stay] < wt0[stay] - EPS).any() or (s.st[stay] < st0[stay] - EPS).any():
            self._fail("waiting or stop time decreased")
        if (s.st[stay] - st0[stay] > s.wt[stay] - wt0[stay] + EPS).any():
            self._fail("stop time accrued without waiting time")
        # yellow safety: a phase change only after a full yellow interlude
        self.yellow_age = np.where(yellow0, self.yellow_age + 1, 0)
        changed = s.current_phase != phase0
        if cfg.yellow_duration > 0:
            early = changed & (self.yellow_age < cfg.yellow_duration)
            if early.any():
                self._fail(f"phase changed after {self.yellow_age[early].tolist()} yellow steps")
        self.yellow_age = np.where(s.in_yellow, self.yellow_age, 0)
        return s
