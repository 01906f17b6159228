"""Hot loops with a numba path and a plain numpy/python fallback.

Set ``NATURAL_MARL_DISABLE_NUMBA=1`` before import to force the fallback.
Both paths consume identical inputs and are deterministic; the queue
simulator is integer arithmetic so both paths agree exactly, while the
rank-one inverse update agrees to floating-point rounding.
"""

import os

import numpy as np

_DISABLED = os.environ.get("NATURAL_MARL_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by environment")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# rank-one inverse update
# ---------------------------------------------------------------------------

def _sm_update_py(g_inv, psi, beta):
    """In-place Sherman-Morrison step on a symmetric inverse. Returns False if skipped."""
    u = g_inv @ psi
    denom = 1.0 - beta + beta * float(psi @ u)
    scale = 1.0 / (1.0 - beta)
    if abs(denom) < 1e-12:
        g_inv *= scale
        g_inv += g_inv.T
        g_inv *= 0.5
        return False
    g_inv -= (beta / denom) * np.outer(u, u)
    g_inv *= scale
    g_inv += g_inv.T
    g_inv *= 0.5
    return True


def _sm_update_nb(g_inv, psi, beta):
    m = psi.shape[0]
    u = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for j in range(m):
            acc += g_inv[i, j] * psi[j]
        u[i] = acc
    quad = 0.0
    for i in range(m):
        quad += psi[i] * u[i]
    denom = 1.0 - beta + beta * quad
    scale = 1.0 / (1.0 - beta)
    ok = abs(denom) >= 1e-12
    c = beta / denom if ok else 0.0
    for i in range(m):
        for j in range(i, m):
            val = (0.5 * (g_inv[i, j] + g_inv[j, i]) - c * u[i] * u[j]) * scale
            g_inv[i, j] = val
            g_inv[j, i] = val
    return ok


# ---------------------------------------------------------------------------
# queue simulator for one decision epoch
# ---------------------------------------------------------------------------
#
# Lanes are ring buffers over (route, hop, travel time) of stopped vehicles.
# routes[r, h] is the lane of hop h and route_len[r] the hop count.
# Vehicles entering a lane (from a source or discharged upstream) first
# drive along it for tt seconds in the transit list, then join its queue.
# A lane holds at most ``capacity`` vehicles counting both groups; entry
# arrivals to a full lane are dropped and upstream discharge blocks.
# ev_tick/ev_route/ev_tt are arrival events sorted by tick.
# green_ns[l] counts the NS-green seconds of the light owning lane l and
# lane_ns[l] is 1 for NS approaches.
# occ (ticks, n_lights) receives per-tick queued vehicles per light and
# counters [arrived, dropped, exited, transferred].

def _epoch(ring_route, ring_hop, ring_tt, head, length, tr_route, tr_hop, tr_tt, tr_lane, tr_left,
           tr_state, tr_count, routes, route_len, ev_tick, ev_route, ev_tt, lane_light, lane_ns,
           green_ns, ticks, capacity, service_rate, occ, counters):
    n_lanes = length.shape[0]
    n_ev = ev_tick.shape[0]
    tr_cap = tr_route.shape[0]
    pre = np.zeros(n_lanes, dtype=np.int64)
    e = 0
    for k in range(ticks):
        # transit completions, in insertion order
        n_tr = tr_state[0]
        kept = 0
        for j in range(n_tr):
            left = tr_left[j] - 1
            lane = tr_lane[j]
            if left <= 0:
                pos = (head[lane] + length[lane]) % capacity
                ring_route[lane, pos] = tr_route[j]
                ring_hop[lane, pos] = tr_hop[j]
                ring_tt[lane, pos] = tr_tt[j]
                length[lane] += 1
                tr_count[lane] -= 1
            else:
                tr_route[kept] = tr_route[j]
                tr_hop[kept] = tr_hop[j]
                tr_tt[kept] = tr_tt[j]
                tr_lane[kept] = lane
                tr_left[kept] = left
                kept += 1
        tr_state[0] = kept
        # external arrivals
        while e < n_ev and ev_tick[e] == k:
            r = ev_route[e]
            lane = routes[r, 0]
            counters[0] += 1
            if length[lane] + tr_count[lane] >= capacity or tr_state[0] >= tr_cap:
                counters[1] += 1
            else:
                j = tr_state[0]
                tr_route[j] = r
                tr_hop[j] = 0
                tr_tt[j] = ev_tt[e]
                tr_lane[j] = lane
                tr_left[j] = ev_tt[e]
                tr_state[0] = j + 1
                tr_count[lane] += 1
            e += 1
        for lane in range(n_lanes):
            pre[lane] = length[lane]
        # discharge on green
        for lane in range(n_lanes):
            g = green_ns[lane]
            if lane_ns[lane] == 1:
                green = k < g
                kg = k
            else:
                green = k >= g
                kg = k - g
            if not green:
                continue
            slots = int(np.floor(service_rate * (kg + 1)) - np.floor(service_rate * kg))
            served = 0
            while served < slots and served < pre[lane] and length[lane] > 0:
                pos = head[lane]
                r = ring_route[lane, pos]
                h = ring_hop[lane, pos] + 1
                if h < route_len[r]:
                    nxt = routes[r, h]
                    if length[nxt] + tr_count[nxt] >= capacity or tr_state[0] >= tr_cap:
                        break
                    j = tr_state[0]
                    tr_route[j] = r
                    tr_hop[j] = h
                    tr_tt[j] = ring_tt[lane, pos]
                    tr_lane[j] = nxt
                    tr_left[j] = ring_tt[lane, pos]
                    tr_state[0] = j + 1
                    tr_count[nxt] += 1
                    counters[3] += 1
                else:
                    counters[2] += 1
                head[lane] = (pos + 1) % capacity
                length[lane] -= 1
                served += 1
        for lane in range(n_lanes):
            occ[k, lane_light[lane]] += length[lane]


if HAVE_NUMBA:
    sm_update = njit(cache=True)(_sm_update_nb)
    simulate_epoch = njit(cache=True)(_epoch)
else:  # pragma: no cover
    sm_update = _sm_update_py
    simulate_epoch = _epoch

# always-available references for benchmarks and parity tests
sm_update_py = _sm_update_py
simulate_epoch_py = _epoch
