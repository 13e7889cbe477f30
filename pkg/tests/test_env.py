import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsignal.env import (
    FeatureLayout,
    TrafficEnv,
    compute_cost,
    compute_reward,
    env_step,
    metrics_row,
    observe,
    total_stop_time,
)
from gridsignal.netmodel import Scenario, SimParams, build_grid_map, grid_scenario
from gridsignal.simcore import SimConfig, apply_signal_action, place_vehicle, sim_reset, sim_step


def empty_state(rows=1, cols=1, **cfg):
    return sim_reset(Scenario(build_grid_map(rows, cols), (), SimParams(), 0), SimConfig(**cfg))


def red_route(state, approach=2):
    x = state.network.intersections[0]
    lane = x.incoming_lane_ids[approach]
    return (lane, state.network.successors(lane)[0])


def test_observe_empty_network():
    s = sim_reset(grid_scenario(2, 2))
    obs = observe(s, include_phases=True)
    n_ctrl = len(s.network.controlled_lanes())
    assert obs.s_num.shape == (n_ctrl,) and obs.s_wt.shape == (n_ctrl,)
    assert not obs.s_num.any() and not obs.s_wt.any()
    assert obs.s_p.tolist() == [0, 0, 0, 0]
    assert observe(s, include_phases=False).s_p is None


def test_observe_lane_slice():
    s = empty_state()
    route = red_route(s)
    L = s.lane_len[route[0]]
    place_vehicle(s, route, pos=L - 1.0, waiting_time=10.0)
    place_vehicle(s, route, pos=L - 7.5, waiting_time=20.0)
    obs = observe(s, True)
    k = s.network.controlled_lanes().index(route[0])
    assert obs.s_num[k] == 2
    assert obs.s_wt[k] == 30.0
    assert obs.s_num.sum() == 2


def test_observe_reports_activated_phase():
    s = sim_reset(grid_scenario(3, 3))
    action = np.zeros(9, dtype=int)
    action[7] = 3
    apply_signal_action(s, action)
    for _ in range(3):
        sim_step(s)
    assert observe(s).s_p[7] == 3


def test_reward_examples():
    assert compute_reward(100.0, 80.0, [0], [0], 0.0).r_wt == 20.0
    prev = np.zeros(15, dtype=int)
    cur = prev.copy()
    cur[:3] = 1
    r = compute_reward(50.0, 30.0, prev, cur, 1.0)
    assert r.r_uc == 12
    assert r.r_total == 32.0
    with pytest.raises(ValueError):
        compute_reward(-1.0, 0.0, [0], [0], 1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 5),
    st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=20),
)
def test_reward_properties(c0, c1, alpha, phases):
    prev, cur = np.array(phases).T
    r = compute_reward(c0, c1, prev, cur, alpha)
    assert 0 <= r.r_uc <= len(prev)
    assert r.r_total == r.r_wt + alpha * r.r_uc


def test_cost_sums_waiting_times():
    s = empty_state()
    assert compute_cost(s) == 0.0
    route = red_route(s)
    for pos, w in ((150.0, 10.0), (100.0, 20.0), (50.0, 30.0)):
        place_vehicle(s, route, pos=pos, waiting_time=w)
    assert compute_cost(s) == 60.0


def test_cost_grows_by_waiting_count_per_step():
    s = empty_state()
    route = red_route(s)
    L = s.lane_len[route[0]]
    k = 4
    for j in range(k):
        # a packed queue at the stop line: zero gaps everywhere
        place_vehicle(s, route, pos=L - 6.0 * j)
    assert (s.speed[s.active_ids] == 0).all()
    before = compute_cost(s)
    sim_step(s)
    assert compute_cost(s) - before == k * s.config.dt


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.booleans()), min_size=1, max_size=30), st.randoms())
def test_cost_ignores_vehicle_labels(rows, rnd):
    s = empty_state()
    wt = np.array([w for w, _ in rows])
    status = np.array([1 if a else 2 for _, a in rows], dtype=np.int8)
    s.wt, s.status = wt, status
    c = compute_cost(s)
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    s.wt, s.status = wt[perm], status[perm]
    assert compute_cost(s) == pytest.approx(c, rel=1e-12)


def test_done_at_episode_end():
    s = sim_reset(grid_scenario(1, 1))
    for _ in range(998):
        _, _, done = env_step(s, [0], 1.0, 1000)
        assert not done
    assert s.clock == 998
    _, _, done = env_step(s, [0], 1.0, 1000)
    assert s.clock == 999 and not done
    _, _, done = env_step(s, [0], 1.0, 1000)
    assert done


def test_identity_action_counts_all_unchanged():
    s = sim_reset(grid_scenario(2, 2, period=1.0))
    for _ in range(30):
        _, r, _ = env_step(s, s.current_phase.copy(), 1.0)
        assert r.r_uc == 4


def test_switch_counts_as_changed_from_decision_step():
    s = sim_reset(grid_scenario(1, 1))
    _, r, _ = env_step(s, [2], 1.0)
    assert r.r_uc == 0
    # still yellow, commanded phase unchanged from here on
    _, r, _ = env_step(s, [0], 1.0)
    assert r.r_uc == 1


def test_telescoping_on_sealed_toy():
    scen = grid_scenario(1, 1, period=3.0, horizon=60, seed=1)
    s = sim_reset(scen, SimConfig(sealed=True))
    rng = np.random.default_rng(0)
    c0 = compute_cost(s)
    total, uc = 0.0, 0
    for _ in range(120):
        _, r, _ = env_step(s, rng.integers(0, 4, size=1), 1.0, 120)
        total += r.r_total
        uc += r.r_uc
    assert s.arrived == 0
    assert total == pytest.approx(c0 - compute_cost(s) + uc, abs=1e-9)

    s = sim_reset(scen, SimConfig(sealed=True))
    rwt = 0.0
    for _ in range(120):
        _, r, _ = env_step(s, rng.integers(0, 4, size=1), 0.0, 120)
        rwt += r.r_wt
    assert rwt == pytest.approx(-compute_cost(s), abs=1e-9)


def test_episode_metrics_and_stop_time_bound():
    env = TrafficEnv(grid_scenario(2, 2, period=1.0), episode_length=300)
    env.reset()
    n_obs = None
    rng = np.random.default_rng(0)
    done = False
    while not done:
        obs, _, done = env.step(rng.integers(0, 4, size=4))
        n_obs = n_obs or len(obs.s_num)
        assert len(obs.s_num) == n_obs
    m = env.metrics
    assert len(m.cost_wt_per_step) == 300
    assert all(c >= 0 for c in m.cost_wt_per_step)
    s = env.state
    assert m.total_stop_time == total_stop_time(s)
    assert m.total_stop_time <= s.wt[s.status >= 1].sum()
    row = metrics_row("grid2x2", 1.0, "random", 0, 0, m)
    assert set(row) == {"scene", "flow", "agent", "seed", "episode", "cost", "reward", "stop_time", "arrivals"}


def test_feature_rows_layout():
    s = sim_reset(grid_scenario(2, 2))
    layout = FeatureLayout(s)
    route = (s.network.intersections[3].incoming_lane_ids[1],
             s.network.successors(s.network.intersections[3].incoming_lane_ids[1])[0])
    L = s.lane_len[route[0]]
    place_vehicle(s, route, pos=L - 2.0, waiting_time=50.0)
    rows = layout.rows(observe(s))
    assert rows.shape == (4, 12)
    cap = L / 6.0
    assert rows[3, 1] == pytest.approx(1 / cap)
    assert rows[3, 5] == pytest.approx(0.5)
    assert rows[:, 8].tolist() == [1, 1, 1, 1]
    assert FeatureLayout(s, include_phases=False).rows(observe(s)).shape == (4, 8)
