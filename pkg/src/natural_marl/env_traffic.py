"""Queue-level surrogate of a 2x2 signalized grid with four agent-controlled lights.

Layout (north up)::

            N1        N2
            |         |
    W1 --- T1 ------- T2 --- E1
            |         |
    W2 --- T3 ------- T4 --- E2
            |         |
            S1        S2

Each light has four inbound lanes, one per approach, ordered (N, E, S, W);
lane index = 4 * light + approach. A vehicle enters at its source's light,
follows a shortest path over lights (ties split uniformly) and leaves at
the light adjacent to its destination. Time advances in one-second ticks;
every light starts a decision epoch with its north-south phase green.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import _kernels

SOURCES = ("W1", "W2", "N1", "N2", "E1", "E2", "S1", "S2")
LIGHTS = ("T1", "T2", "T3", "T4")
APPROACHES = ("N", "E", "S", "W")
_POS = {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1)}  # (row, col), row grows southward
# source/destination node -> (light, side of the light it touches)
_ATTACH = {
    "N1": (0, 0), "W1": (0, 3),
    "N2": (1, 0), "E1": (1, 1),
    "S1": (2, 2), "W2": (2, 3),
    "S2": (3, 2), "E2": (3, 1),
}

ARRIVAL_PATTERNS = {
    1: {"W1": 3 / 16, "W2": 1 / 16, "N1": 1 / 16, "N2": 3 / 16,
        "E1": 3 / 16, "E2": 1 / 16, "S1": 1 / 16, "S2": 3 / 16},
    2: {"W1": 1 / 28, "W2": 1 / 28, "N1": 3 / 14, "N2": 3 / 14,
        "E1": 1 / 28, "E2": 1 / 28, "S1": 3 / 14, "S2": 3 / 14},
}

# green fractions (north-south, east-west) for plans 1..3
SIGNAL_PLANS = ((0.5, 0.5), (0.75, 0.25), (0.25, 0.75))

N_LANES = 16
XI_DIM = 16 + 4 * (4 ** 2 + 4 ** 3)


@dataclass(frozen=True)
class ArrivalPattern:
    id: int
    p_source: dict

    @classmethod
    def get(cls, pattern_id):
        if pattern_id not in ARRIVAL_PATTERNS:
            raise ValueError(f"invalid arrival pattern {pattern_id!r}")
        p = ARRIVAL_PATTERNS[pattern_id]
        assert abs(sum(p.values()) - 1.0) < 1e-12
        return cls(pattern_id, dict(p))

    def vector(self):
        return np.array([self.p_source[s] for s in SOURCES])


@dataclass(frozen=True)
class SignalPlan:
    plan_id: int

    @property
    def split(self):
        return SIGNAL_PLANS[self.plan_id - 1]

    def green_ns(self, cycle_seconds):
        return int(round(self.split[0] * cycle_seconds))


def _approach_from(src_light, dst_light):
    """Approach (side) of dst_light through which a vehicle from src_light enters."""
    (r0, c0), (r1, c1) = _POS[src_light], _POS[dst_light]
    if r1 == r0 + 1:
        return 0  # moving south, arrives on the north approach
    if r1 == r0 - 1:
        return 2
    if c1 == c0 + 1:
        return 3  # moving east, arrives on the west approach
    return 1


def _light_paths(a, b):
    """All minimal light sequences between two lights of the 2x2 grid."""
    if a == b:
        return [(a,)]
    (r0, c0), (r1, c1) = _POS[a], _POS[b]
    if abs(r0 - r1) + abs(c0 - c1) == 1:
        return [(a, b)]
    inv = {v: k for k, v in _POS.items()}
    return [(a, inv[(r0, c1)], b), (a, inv[(r1, c0)], b)]


def _build_routes():
    routes, lens, table = [], [], {}
    for s, d in product(SOURCES, SOURCES):
        if s == d:
            continue
        ls, side = _ATTACH[s]
        ld, _ = _ATTACH[d]
        ids = []
        for path in _light_paths(ls, ld):
            lanes = [4 * ls + side]
            for u, v in zip(path[:-1], path[1:]):
                lanes.append(4 * v + _approach_from(u, v))
            ids.append(len(routes))
            routes.append(lanes + [-1] * (3 - len(lanes)))
            lens.append(len(lanes))
        table[(s, d)] = ids
    return np.array(routes, dtype=np.int64), np.array(lens, dtype=np.int64), table


@dataclass
class TrafficNet:
    arrival_pattern: int = 1
    n_vehicles: int = 50000
    horizon: int = 180000
    cycle_seconds: int = 120
    capacity: int = 50
    service_rate: float = 0.5
    link_time_min: int = 20  # seconds to traverse an internal link, drawn per vehicle
    link_time_max: int = 60
    warmup_epochs: int = 1  # epochs run at the equal-split plan before the first decision
    n_agents: int = field(default=4, init=False)
    n_actions: int = field(default=3, init=False)

    def __post_init__(self):
        self.pattern = ArrivalPattern.get(self.arrival_pattern)
        if self.capacity < 1 or self.cycle_seconds < 1:
            raise ValueError("capacity and cycle_seconds must be positive")
        if not (1 <= self.link_time_min <= self.link_time_max):
            raise ValueError("link travel times must satisfy 1 <= min <= max")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if not (0.0 < self.service_rate <= 1.0):
            raise ValueError("service_rate must lie in (0, 1]")
        self.routes, self.route_len, self.route_table = _build_routes()
        self.lane_light = np.repeat(np.arange(4), 4).astype(np.int64)
        self.lane_ns = np.tile(np.array([1, 0, 1, 0], dtype=np.int64), 4)
        # options[s, d_slot, k] and counts for the vectorized route draw
        self.n_opts = np.zeros((8, 7), dtype=np.int64)
        self.opts = np.zeros((8, 7, 2), dtype=np.int64)
        for si, s in enumerate(SOURCES):
            others = [d for d in SOURCES if d != s]
            for di, d in enumerate(others):
                ids = self.route_table[(s, d)]
                self.n_opts[si, di] = len(ids)
                self.opts[si, di, :len(ids)] = ids
                self.opts[si, di, len(ids):] = ids[-1]
        self.green_table = np.array([SignalPlan(k + 1).green_ns(self.cycle_seconds) for k in range(3)],
                                    dtype=np.int64)

    @property
    def policy_dim(self):
        return 1 + 3 * XI_DIM

    @property
    def value_dim(self):
        return 1 + XI_DIM

    @property
    def reward_dim(self):
        return 1 + 4 * 3 * XI_DIM

    def max_epochs(self):
        return self.horizon // self.cycle_seconds

    def simulator(self, rng):
        return TrafficSim(self, rng)


def sample_arrivals(ap, n_vehicles, horizon, t, rng):
    """Per-source arrival counts for second t (sources in SOURCES order)."""
    if not isinstance(ap, ArrivalPattern):
        ap = ArrivalPattern.get(ap)
    if not (0 <= t < horizon):
        raise ValueError(f"second {t} outside the horizon {horizon}")
    return rng.binomial(n_vehicles, ap.vector() / horizon)


def route(source, destination, net, rng):
    """Lane path for one vehicle."""
    if source not in _ATTACH or destination not in _ATTACH:
        raise ValueError(f"unknown node in {(source, destination)}")
    if source == destination:
        raise ValueError("source and destination coincide")
    ids = net.route_table[(source, destination)]
    r = ids[int(rng.integers(len(ids)))]
    return [int(x) for x in net.routes[r, :net.route_len[r]]]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def state_features(queues, capacity=50):
    """Returns (xi, phi) for a 16-vector of lane queue lengths."""
    x = np.asarray(queues, dtype=float)
    if x.shape != (N_LANES,) or np.any(x < 0) or np.any(x > capacity):
        raise ValueError("queue vector out of range")
    z = x / capacity
    zl = z.reshape(4, 4)
    pairs = np.einsum("li,lj->lij", zl, zl).reshape(-1)
    triples = np.einsum("li,lj,lk->lijk", zl, zl, zl).reshape(-1)
    xi = np.concatenate([z, pairs, triples])
    return xi, np.concatenate([[1.0], xi])


def policy_features(xi, plan_index):
    """q for one light choosing plan ``plan_index`` (0-based)."""
    q = np.zeros(1 + 3 * XI_DIM)
    q[0] = 1.0
    q[1 + plan_index * XI_DIM: 1 + (plan_index + 1) * XI_DIM] = xi
    return q


def policy_feature_block(xi):
    """(3, 1009) features of every plan."""
    q = np.zeros((3, 1 + 3 * XI_DIM))
    q[:, 0] = 1.0
    for a in range(3):
        q[a, 1 + a * XI_DIM: 1 + (a + 1) * XI_DIM] = xi
    return q


def reward_features(xi, joint_plan):
    f = np.zeros(1 + 12 * XI_DIM)
    f[0] = 1.0
    for light, a in enumerate(joint_plan):
        off = 1 + (3 * light + int(a)) * XI_DIM
        f[off: off + XI_DIM] = xi
    return f


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

class TrafficSim:
    """Mutable run state: lane ring buffers, epoch counter and the dynamics stream."""

    def __init__(self, net, rng):
        self.net = net
        self.rng = rng
        cap = net.capacity
        self.ring_route = np.zeros((N_LANES, cap), dtype=np.int64)
        self.ring_hop = np.zeros((N_LANES, cap), dtype=np.int64)
        self.ring_tt = np.zeros((N_LANES, cap), dtype=np.int64)
        tr_cap = N_LANES * cap
        self.tr = [np.zeros(tr_cap, dtype=np.int64) for _ in range(5)]  # route, hop, tt, lane, left
        self.tr_state = np.zeros(1, dtype=np.int64)
        self.tr_count = np.zeros(N_LANES, dtype=np.int64)
        self.head = np.zeros(N_LANES, dtype=np.int64)
        self.length = np.zeros(N_LANES, dtype=np.int64)
        self.epoch = 0
        self.totals = np.zeros(4, dtype=np.int64)  # arrived, dropped, exited, transferred
        self._xi_key = None
        self._xi = None

    def reset(self):
        self.head[:] = 0
        self.length[:] = 0
        self.tr_state[:] = 0
        self.tr_count[:] = 0
        self.epoch = 0
        self.totals[:] = 0
        # the warm-up precedes the arrival horizon; decision epochs are counted from zero
        for _ in range(self.net.warmup_epochs):
            self.epoch = 0
            self.step(np.zeros(4, dtype=np.int64))
        self.epoch = 0
        self.totals[:] = 0
        return self.observe()

    def _xi_of(self, obs):
        key = obs.tobytes()
        if key != self._xi_key:
            self._xi_key = key
            self._xi = state_features(obs, self.net.capacity)[0]
        return self._xi

    def policy_features(self, obs):
        return np.broadcast_to(policy_feature_block(self._xi_of(obs)), (4, 3, self.net.policy_dim))

    def state_features(self, obs):
        return np.concatenate([[1.0], self._xi_of(obs)])

    def reward_features(self, obs, actions):
        return reward_features(self._xi_of(obs), actions)

    def draw_events(self):
        """Arrival events for the coming epoch: (tick, route, link time) sorted by tick."""
        net = self.net
        tc = net.cycle_seconds
        start = self.epoch * tc
        if start + tc > net.horizon:
            raise ValueError(f"epoch {self.epoch} runs past the arrival horizon {net.horizon}")
        counts = self.rng.binomial(net.n_vehicles, net.pattern.vector() / net.horizon, size=(tc, 8))
        ticks = np.repeat(np.repeat(np.arange(tc), 8), counts.reshape(-1))
        srcs = np.repeat(np.tile(np.arange(8), tc), counts.reshape(-1))
        u = self.rng.random((ticks.size, 3))
        slot = np.minimum((u[:, 0] * 7).astype(np.int64), 6)
        n_opt = net.n_opts[srcs, slot]
        k = np.minimum((u[:, 1] * n_opt).astype(np.int64), n_opt - 1)
        routes = net.opts[srcs, slot, k]
        span = net.link_time_max - net.link_time_min + 1
        tt = net.link_time_min + np.minimum((u[:, 2] * span).astype(np.int64), span - 1)
        return ticks.astype(np.int64), routes.astype(np.int64), tt

    def observe(self):
        """Vehicles on each lane: queued plus those still driving toward the stop line."""
        return self.length + self.tr_count

    def in_network(self):
        return int(self.length.sum() + self.tr_state[0])

    def run_epoch(self, green_ns, ev_tick, ev_route, ev_tt):
        net = self.net
        occ = np.zeros((net.cycle_seconds, 4), dtype=np.int64)
        counters = np.zeros(4, dtype=np.int64)
        before = self.in_network()
        _kernels.simulate_epoch(self.ring_route, self.ring_hop, self.ring_tt, self.head, self.length,
                                *self.tr, self.tr_state, self.tr_count, net.routes, net.route_len,
                                ev_tick, ev_route, ev_tt, net.lane_light, net.lane_ns, green_ns,
                                net.cycle_seconds, net.capacity, net.service_rate, occ, counters)
        after = self.in_network()
        if counters[0] != counters[1] + counters[2] + (after - before):
            raise AssertionError("flow conservation violated")
        self.totals += counters
        self.epoch += 1
        return occ, counters

    def step(self, actions):
        green = self.net.green_table[np.asarray(actions, dtype=np.int64)]
        green_ns = np.repeat(green, 4)
        occ, _ = self.run_epoch(green_ns, *self.draw_events())
        rewards = -occ.mean(axis=0)
        return self.observe(), rewards

    def diagnostics(self):
        arrived, dropped, exited, _ = (int(x) for x in self.totals)
        return {"arrived": arrived, "dropped": dropped, "exited": exited}


def epoch_step(sim, joint_plan):
    """Advance one decision epoch with plans given as SignalPlan objects or 1-based ids."""
    ids = [p.plan_id if isinstance(p, SignalPlan) else int(p) for p in joint_plan]
    return sim.step(np.array(ids) - 1)
