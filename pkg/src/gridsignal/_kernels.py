"""Hot loops of the microsimulator.

Vehicle arrays are indexed by vehicle id; ``lane_veh[l, :lane_n[l]]`` lists the
vehicles on lane ``l`` from the front (closest to the stop line) to the back.
Status codes: 0 scheduled, 1 active, 2 arrived, 3 skipped.
"""

import math

import numpy as np

from ._jit import njit

SCHEDULED, ACTIVE, ARRIVED, SKIPPED = 0, 1, 2, 3


@njit
def spawn(
    step, dep_step, route_off, route_len, route_lanes, status, veh_lane,
    pos, speed, rk, lane_veh, lane_n, backlog, n_backlog, next_due,
    veh_len, min_gap, counters,
):
    """Move due departures into the backlog and insert what fits.

    One insertion per entry lane per step; a departure is held while the
    entry lane's last vehicle is within ``veh_len + min_gap`` of the origin.
    ``counters`` = [spawned, arrived, skipped].  Returns (n_backlog, next_due).
    """
    n_veh = dep_step.shape[0]
    while next_due < n_veh and dep_step[next_due] <= step:
        v = next_due
        next_due += 1
        if status[v] != SCHEDULED:
            continue
        if route_len[v] == 0:
            status[v] = SKIPPED
            counters[0] += 1
            counters[2] += 1
        else:
            backlog[n_backlog] = v
            n_backlog += 1

    n_lanes = lane_n.shape[0]
    cap = lane_veh.shape[1]
    used = np.zeros(n_lanes, dtype=np.bool_)
    keep = 0
    for k in range(n_backlog):
        v = backlog[k]
        lane = route_lanes[route_off[v]]
        ok = not used[lane]
        used[lane] = True
        if ok:
            cnt = lane_n[lane]
            if cnt >= cap:
                ok = False
            elif cnt > 0 and pos[lane_veh[lane, cnt - 1]] < veh_len + min_gap:
                ok = False
        if ok:
            status[v] = ACTIVE
            pos[v] = 0.0
            speed[v] = 0.0
            rk[v] = 0
            veh_lane[v] = lane
            lane_veh[lane, lane_n[lane]] = v
            lane_n[lane] += 1
            counters[0] += 1
        else:
            backlog[keep] = v
            keep += 1
    return keep, next_due


@njit
def _safe_speed(gap, v_lead, decel, dt):
    # largest v with v*dt + v^2/(2b) <= gap + v_lead^2/(2b)
    g = max(gap, 0.0) + v_lead * v_lead / (2.0 * decel)
    return decel * (-dt + math.sqrt(dt * dt + 2.0 * g / decel))


@njit
def advance(
    lane_len, lane_speed, lane_ctrl, lane_green, lane_green_prev, lane_veh, lane_n,
    route_off, route_len, route_lanes, status, veh_lane, pos, speed, rk,
    speed_factor, wt, st, moved, tail_limit,
    dt, accel, decel, veh_len, min_gap, wait_thr, stop_eps, delayed, sealed,
    counters,
):
    """Advance every active vehicle by one step; returns arrivals this step.

    Lanes are processed in id order and vehicles front to back, so each
    follower is clamped against its leader's already-updated position.  The
    perceived (comfort) speed uses start-of-step leader and signal state when
    ``delayed``; hard clamps use the actual state and forbid collisions and
    passing a non-green stop line.
    """
    n_lanes = lane_n.shape[0]
    inf = np.inf
    pos0 = pos.copy()
    speed0 = speed.copy()

    tail0 = np.full(n_lanes, -1, dtype=np.int64)
    for l in range(n_lanes):
        cnt = lane_n[l]
        if cnt > 0:
            tail0[l] = lane_veh[l, cnt - 1]
            tail_limit[l] = pos0[tail0[l]] - veh_len - min_gap
        else:
            tail_limit[l] = lane_len[l]
        for k in range(cnt):
            moved[lane_veh[l, k]] = False

    arrivals = 0
    for l in range(n_lanes):
        length = lane_len[l]
        cnt = lane_n[l]
        nleft = 0
        lead_left = False
        for k in range(cnt):
            v = lane_veh[l, k]
            if moved[v]:
                break
            p = pos[v]
            final = rk[v] == route_len[v] - 1

            v_safe = inf
            hard = inf
            if final:
                if sealed:
                    v_safe = min(v_safe, _safe_speed(length - p, 0.0, decel, dt))
                    hard = min(hard, length - p)
            else:
                nl = route_lanes[route_off[v] + rk[v] + 1]
                seen_green = lane_green_prev[l] if delayed else lane_green[l]
                if lane_ctrl[l] and not seen_green:
                    v_safe = min(v_safe, _safe_speed(length - p, 0.0, decel, dt))
                elif tail0[nl] >= 0:
                    t = tail0[nl]
                    g = length - p + pos0[t] - veh_len - min_gap
                    v_safe = min(v_safe, _safe_speed(g, speed0[t], decel, dt))
                if lane_ctrl[l] and not lane_green[l]:
                    hard = min(hard, length - p)
                else:
                    room = min(tail_limit[nl], lane_len[nl])
                    hard = min(hard, length - p + max(room, 0.0))

            if k > 0:
                u = lane_veh[l, k - 1]
                if delayed:
                    # leader as seen at the start of the step, even if it has left since
                    g = pos0[u] - veh_len - min_gap - p
                    v_safe = min(v_safe, _safe_speed(g, speed0[u], decel, dt))
                elif not lead_left:
                    g = pos[u] - veh_len - min_gap - p
                    v_safe = min(v_safe, _safe_speed(g, speed[u], decel, dt))
                if not lead_left:
                    hard = min(hard, pos[u] - veh_len - min_gap - p)

            v_new = min(speed_factor[v] * lane_speed[l], speed[v] + accel * dt, v_safe)
            if v_new < 0.0:
                v_new = 0.0
            if hard < inf:
                v_new = min(v_new, max(hard, 0.0) / dt)
            if v_new < stop_eps:
                v_new = 0.0
            p_new = p + v_new * dt
            speed[v] = v_new

            if final and not sealed and p_new >= length:
                status[v] = ARRIVED
                pos[v] = length
                veh_lane[v] = -1
                counters[1] += 1
                arrivals += 1
                nleft += 1
                lead_left = True
                continue
            if not final and p_new > length:
                nl = route_lanes[route_off[v] + rk[v] + 1]
                q = p_new - length
                pos[v] = q
                rk[v] += 1
                veh_lane[v] = nl
                moved[v] = True
                lane_veh[nl, lane_n[nl]] = v
                lane_n[nl] += 1
                tail_limit[nl] = q - veh_len - min_gap
                nleft += 1
                lead_left = True
            else:
                pos[v] = p_new
                lead_left = False
            if v_new <= wait_thr:
                wt[v] += dt
            if v_new == 0.0:
                st[v] += dt

        if nleft > 0:
            # leavers form a prefix of the lane's list
            m = lane_n[l]
            for j in range(nleft, m):
                lane_veh[l, j - nleft] = lane_veh[l, j]
            lane_n[l] = m - nleft

    for l in range(n_lanes):
        lane_green_prev[l] = lane_green[l]
    return arrivals
