"""Road networks, synthetic grid scenarios, flow generation and scenario files.

Node ids are shared between intersections and boundary nodes: intersections
occupy ``0..n-1`` and boundary (source/sink) nodes follow.  A route is a tuple
of lane ids that a vehicle drives in order.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_SPEED_LIMIT = 13.89  # m/s, 50 km/h
DEFAULT_DETECTOR_ZONE = 10.0

# approach order used for every grid intersection
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
_APPROACHES = ("N", "E", "S", "W")


class ScenarioError(ValueError):
    """Malformed or invalid scenario file."""


class ScenarioVersionError(ScenarioError):
    pass


@dataclass(frozen=True)
class Lane:
    id: int
    from_node: int
    to_node: int
    length: float
    speed_limit: float = DEFAULT_SPEED_LIMIT
    detector_zone: float = DEFAULT_DETECTOR_ZONE

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"lane {self.id}: length must be > 0, got {self.length}")
        if not self.speed_limit > 0:
            raise ValueError(f"lane {self.id}: speed_limit must be > 0")
        if self.detector_zone < 0 or self.detector_zone > self.length:
            raise ValueError(
                f"lane {self.id}: detector_zone {self.detector_zone} outside [0, {self.length}]"
            )


@dataclass(frozen=True)
class Intersection:
    id: int
    position: tuple[float, float]
    incoming_lane_ids: tuple[int, ...]
    phase_table: tuple[tuple[int, ...], ...]
    conflicts: tuple[tuple[int, int], ...] = ()

    @property
    def phase_count(self) -> int:
        return len(self.phase_table)

    def validate(self) -> None:
        if self.phase_count < 2:
            raise ValueError(f"intersection {self.id}: phase_count must be >= 2")
        incoming = set(self.incoming_lane_ids)
        covered = set()
        for p, lanes in enumerate(self.phase_table):
            if not set(lanes) <= incoming:
                raise ValueError(f"intersection {self.id}: phase {p} names a non-incoming lane")
            covered.update(lanes)
        if covered != incoming:
            missing = sorted(incoming - covered)
            raise ValueError(f"intersection {self.id}: lanes {missing} never green")
        bad = {frozenset(c) for c in self.conflicts}
        for p, lanes in enumerate(self.phase_table):
            for i, a in enumerate(lanes):
                for b in lanes[i + 1:]:
                    if frozenset((a, b)) in bad:
                        raise ValueError(
                            f"intersection {self.id}: phase {p} greens conflicting lanes {a}, {b}"
                        )


@dataclass(frozen=True)
class BoundaryNode:
    id: int
    kind: str  # "source" or "sink"
    position: tuple[float, float]


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    boundary: tuple[BoundaryNode, ...]
    lanes: tuple[Lane, ...]

    def __post_init__(self):
        for i, node in enumerate(self.intersections):
            if node.id != i:
                raise ValueError("intersection ids must be 0..n-1 in order")
        for i, lane in enumerate(self.lanes):
            if lane.id != i:
                raise ValueError("lane ids must be 0..L-1 in order")

    @property
    def n_intersections(self) -> int:
        return len(self.intersections)

    @property
    def max_phase_count(self) -> int:
        return max(x.phase_count for x in self.intersections)

    def is_intersection(self, node: int) -> bool:
        return 0 <= node < len(self.intersections)

    def node_kind(self, node: int) -> str:
        if self.is_intersection(node):
            return "intersection"
        return self.boundary[node - len(self.intersections)].kind

    def node_position(self, node: int) -> tuple[float, float]:
        if self.is_intersection(node):
            return self.intersections[node].position
        return self.boundary[node - len(self.intersections)].position

    def controlled_lanes(self) -> list[int]:
        """Lanes ending at a signal, in global lane order."""
        return [l.id for l in self.lanes if self.is_intersection(l.to_node)]

    def internal_lanes(self) -> list[int]:
        return [
            l.id for l in self.lanes
            if self.is_intersection(l.from_node) and self.is_intersection(l.to_node)
        ]

    def successors(self, lane_id: int) -> list[int]:
        """Lanes reachable from ``lane_id`` through its downstream intersection, U-turns excluded."""
        lane = self.lanes[lane_id]
        if not self.is_intersection(lane.to_node):
            return []
        back = self.node_position(lane.from_node)
        return [
            l.id for l in self.lanes
            if l.from_node == lane.to_node and self.node_position(l.to_node) != back
        ]

    def validate(self) -> None:
        n_nodes = len(self.intersections) + len(self.boundary)
        for lane in self.lanes:
            for end in (lane.from_node, lane.to_node):
                if not 0 <= end < n_nodes:
                    raise ValueError(f"lane {lane.id}: unknown node {end}")
        for node in self.intersections:
            node.validate()
            for lid in node.incoming_lane_ids:
                if self.lanes[lid].to_node != node.id:
                    raise ValueError(f"intersection {node.id}: lane {lid} does not end here")


@dataclass(frozen=True)
class FlowSpec:
    period: float
    horizon: int
    route_policy: str = "fringe-weighted"
    fringe_weight: float = 10.0
    max_route_attempts: int = 100
    min_intersections: int = 2

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be > 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.max_route_attempts < 1:
            raise ValueError("max_route_attempts must be >= 1")
        if self.route_policy != "fringe-weighted":
            raise ValueError(f"unknown route_policy {self.route_policy!r}")


@dataclass(frozen=True)
class SimParams:
    start_accel: float = 2.0
    stop_decel: float = 4.5
    reaction_time: float = 0.8
    vehicle_length: float = 4.5
    min_gap: float = 1.5
    speed_deviation: float = 0.2
    defaulted: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("start_accel", "stop_decel", "reaction_time", "vehicle_length", "min_gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"sim_params.{name} must be > 0")
        if not 0 <= self.speed_deviation < 1:
            raise ValueError("sim_params.speed_deviation must be in [0, 1)")


@dataclass(frozen=True)
class Scenario:
    network: RoadNetwork
    flows: tuple[FlowSpec, ...] = ()
    sim_params: SimParams = SimParams()
    seed: int = 0
    name: str = "scene"

    def with_horizon(self, horizon: int) -> "Scenario":
        """Same scenario with every flow schedule stretched to ``horizon`` steps."""
        return replace(self, flows=tuple(replace(f, horizon=horizon) for f in self.flows))


@dataclass(frozen=True)
class WeightedAdjacency:
    n: int
    entries: np.ndarray
    normalized: np.ndarray


# ---------------------------------------------------------------------------
# grid generator


def build_grid_map(
    rows: int,
    cols: int,
    lane_length_profile: Sequence[float] = (200.0,),
    phase_count: int = 4,
    speed_limit: float = DEFAULT_SPEED_LIMIT,
    detector_zone: float = DEFAULT_DETECTOR_ZONE,
) -> RoadNetwork:
    """Build a ``rows x cols`` grid of signalized intersections.

    Internal edges are enumerated horizontal-first (row-major) then vertical,
    and take their length from ``lane_length_profile`` cyclically; both lanes
    of an edge share it.  Boundary approaches use the first profile entry.
    Each perimeter approach gets a source and a sink node.

    Phase programs (approaches N, E, S, W):
      * 2 phases: {N, S}, {E, W}
      * 3 phases: {N, S}, {E}, {W}
      * 4 phases: {N}, {S}, {E}, {W}
    Opposing approaches are compatible; perpendicular ones conflict.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    profile = [float(x) for x in lane_length_profile]
    if not profile or min(profile) <= 0:
        raise ValueError("lane lengths must be > 0")
    if phase_count < 2:
        raise ValueError("phase_count < 2 cannot separate conflicting approaches")
    if phase_count > 4:
        raise ValueError("grid intersections support at most 4 phases")

    spacing = max(profile)
    n = rows * cols

    def nid(r, c):
        return r * cols + c

    positions = {nid(r, c): (c * spacing, -r * spacing) for r in range(rows) for c in range(cols)}

    lanes: list[Lane] = []
    # incoming[node][approach] -> lane id
    incoming = [[None] * 4 for _ in range(n)]

    def add_lane(a, b, length):
        lanes.append(Lane(len(lanes), a, b, length, speed_limit, min(detector_zone, length)))
        return lanes[-1].id

    k = 0
    for r in range(rows):
        for c in range(cols - 1):
            length = profile[k % len(profile)]
            k += 1
            a, b = nid(r, c), nid(r, c + 1)
            incoming[b][WEST] = add_lane(a, b, length)
            incoming[a][EAST] = add_lane(b, a, length)
    for r in range(rows - 1):
        for c in range(cols):
            length = profile[k % len(profile)]
            k += 1
            a, b = nid(r, c), nid(r + 1, c)
            incoming[b][NORTH] = add_lane(a, b, length)
            incoming[a][SOUTH] = add_lane(b, a, length)

    boundary: list[BoundaryNode] = []
    offsets = {NORTH: (0.0, spacing), EAST: (spacing, 0.0), SOUTH: (0.0, -spacing), WEST: (-spacing, 0.0)}
    for r in range(rows):
        for c in range(cols):
            node = nid(r, c)
            x, y = positions[node]
            for d in (NORTH, EAST, SOUTH, WEST):
                if incoming[node][d] is not None:
                    continue
                dx, dy = offsets[d]
                pos = (x + dx, y + dy)
                src = n + len(boundary)
                boundary.append(BoundaryNode(src, "source", pos))
                sink = n + len(boundary)
                boundary.append(BoundaryNode(sink, "sink", pos))
                incoming[node][d] = add_lane(src, node, profile[0])
                add_lane(node, sink, profile[0])

    intersections = []
    for node in range(n):
        inc = incoming[node]
        groups = {
            2: [(NORTH, SOUTH), (EAST, WEST)],
            3: [(NORTH, SOUTH), (EAST,), (WEST,)],
            4: [(NORTH,), (SOUTH,), (EAST,), (WEST,)],
        }[phase_count]
        table = tuple(tuple(inc[d] for d in g) for g in groups)
        conflicts = tuple(
            (inc[a], inc[b]) for a in range(4) for b in range(a + 1, 4) if (b - a) % 2 == 1
        )
        intersections.append(
            Intersection(node, positions[node], tuple(inc), table, conflicts)
        )

    net = RoadNetwork(tuple(intersections), tuple(boundary), tuple(lanes))
    net.validate()
    return net


# ---------------------------------------------------------------------------
# flows


class _Router:
    """Shortest lane paths by length; ties broken by lane id."""

    def __init__(self, network: RoadNetwork):
        self.network = network
        self.succ = [network.successors(l.id) for l in network.lanes]
        self._cache: dict[int, tuple[dict, dict]] = {}

    def route(self, origin: int, dest: int) -> tuple[int, ...] | None:
        if origin not in self._cache:
            self._cache[origin] = self._dijkstra(origin)
        dist, prev = self._cache[origin]
        if dest not in dist:
            return None
        path = [dest]
        while path[-1] != origin:
            path.append(prev[path[-1]])
        return tuple(reversed(path))

    def _dijkstra(self, origin):
        lengths = [l.length for l in self.network.lanes]
        dist = {origin: 0.0}
        prev = {}
        heap = [(0.0, origin)]
        while heap:
            d, lane = heapq.heappop(heap)
            if d > dist[lane]:
                continue
            for nxt in self.succ[lane]:
                nd = d + lengths[nxt]
                if nd < dist.get(nxt, math.inf):
                    dist[nxt] = nd
                    prev[nxt] = lane
                    heapq.heappush(heap, (nd, nxt))
        return dist, prev


def departure_steps(period: float, horizon: int, dt: float = 1.0) -> list[int]:
    """Steps of departures at 0, period, 2*period, ... <= horizon*dt."""
    count = int(math.floor(horizon * dt / period + 1e-9)) + 1
    return [int(math.ceil(k * period / dt - 1e-9)) for k in range(count)]


def generate_flows(
    network: RoadNetwork, spec: FlowSpec, rng_seed: int, dt: float = 1.0
) -> list[tuple[int, tuple[int, ...] | None]]:
    """Sample ``(depart_step, route)`` pairs for one flow.

    Origins are lanes ending at an intersection and destinations lanes starting
    at one; boundary lanes are weighted by ``spec.fringe_weight``, internal
    lanes by 1.  A route must cross at least ``spec.min_intersections``
    intersections (capped at 1 for single-intersection networks).  Vehicles
    with no admissible route after ``max_route_attempts`` draws get ``None``
    and are counted as skipped by the simulator.
    """
    origins = [l for l in network.lanes if network.is_intersection(l.to_node)]
    dests = [l for l in network.lanes if network.is_intersection(l.from_node)]
    if not origins or not dests:
        raise ValueError("network needs at least one source and one sink")
    w_o = np.array([spec.fringe_weight if not network.is_intersection(l.from_node) else 1.0 for l in origins])
    w_d = np.array([spec.fringe_weight if not network.is_intersection(l.to_node) else 1.0 for l in dests])
    w_o /= w_o.sum()
    w_d /= w_d.sum()
    min_cross = min(spec.min_intersections, network.n_intersections)

    router = _Router(network)
    rng = np.random.default_rng(rng_seed)
    out = []
    skipped = 0
    for step in departure_steps(spec.period, spec.horizon, dt):
        route = None
        for _ in range(spec.max_route_attempts):
            o = origins[rng.choice(len(origins), p=w_o)].id
            d = dests[rng.choice(len(dests), p=w_d)].id
            cand = router.route(o, d)
            if cand is not None and len(cand) - 1 >= min_cross:
                route = cand
                break
        if route is None:
            skipped += 1
        out.append((step, route))
    if skipped:
        log.warning("generate_flows: %d vehicles without a feasible route were skipped", skipped)
    return out


def scenario_departures(scenario: Scenario, dt: float = 1.0) -> list[tuple[int, tuple[int, ...] | None]]:
    """All flows of a scenario merged in departure order (stable by flow index)."""
    seqs = np.random.SeedSequence(scenario.seed).spawn(max(len(scenario.flows), 1))
    merged = []
    for k, spec in enumerate(scenario.flows):
        seed = int(seqs[k].generate_state(1)[0])
        merged.extend((step, k, i, route) for i, (step, route) in enumerate(generate_flows(scenario.network, spec, seed, dt)))
    merged.sort(key=lambda t: (t[0], t[1], t[2]))
    return [(step, route) for step, _, _, route in merged]


# ---------------------------------------------------------------------------
# adjacency


def compute_adjacency(
    network: RoadNetwork, normalization: str = "rownorm(A+I)", edge_weights: bool = True
) -> WeightedAdjacency:
    """Edge-weighted intersection adjacency.

    ``A[i, j] = max_len / len(i<->j)`` for the shortest lane joining i and j
    (either direction), with ``max_len`` the longest internal lane.  With
    ``edge_weights=False`` every connection weighs 1.

    normalization:
      ``"rownorm(A+I)"`` (default) or ``"rownorm(A)+I"``.
    """
    n = network.n_intersections
    if n < 1:
        raise ValueError("network has no intersections")
    internal = [network.lanes[i] for i in network.internal_lanes()]
    A = np.zeros((n, n))
    if internal:
        max_len = max(l.length for l in internal)
        shortest: dict[tuple[int, int], float] = {}
        for l in internal:
            key = (min(l.from_node, l.to_node), max(l.from_node, l.to_node))
            shortest[key] = min(shortest.get(key, math.inf), l.length)
        for (i, j), length in shortest.items():
            if i == j:
                continue
            A[i, j] = A[j, i] = max_len / length if edge_weights else 1.0
    eye = np.eye(n)
    if normalization == "rownorm(A+I)":
        A_hat = _rownorm(A + eye)
    elif normalization == "rownorm(A)+I":
        A_hat = _rownorm(A) + eye
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return WeightedAdjacency(n, A, A_hat)


def _rownorm(M: np.ndarray) -> np.ndarray:
    s = M.sum(axis=1, keepdims=True)
    # isolated rows stay zero
    return np.divide(M, s, out=np.zeros_like(M), where=s > 0)


# ---------------------------------------------------------------------------
# scenario files


def scenario_to_dict(scenario: Scenario) -> dict:
    net = scenario.network
    return {
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "seed": scenario.seed,
        "sim_params": {k: v for k, v in asdict(scenario.sim_params).items() if k != "defaulted"},
        "flows": [asdict(f) for f in scenario.flows],
        "network": {
            "intersections": [
                {
                    "id": x.id,
                    "position": list(x.position),
                    "incoming_lane_ids": list(x.incoming_lane_ids),
                    "phase_table": [list(p) for p in x.phase_table],
                    "conflicts": [list(c) for c in x.conflicts],
                }
                for x in net.intersections
            ],
            "boundary": [
                {"id": b.id, "kind": b.kind, "position": list(b.position)} for b in net.boundary
            ],
            "lanes": [asdict(l) for l in net.lanes],
        },
    }


def save_scenario(scenario: Scenario, path) -> None:
    text = json.dumps(scenario_to_dict(scenario), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _field(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return d[key]


def scenario_from_dict(doc: dict) -> Scenario:
    version = _field(doc, "schema_version", "scenario")
    if version != SCHEMA_VERSION:
        raise ScenarioVersionError(
            f"scenario schema_version {version} not supported (expected {SCHEMA_VERSION})"
        )
    net_doc = _field(doc, "network", "scenario")

    lanes = []
    for i, ld in enumerate(_field(net_doc, "lanes", "network")):
        where = f"network.lanes[{i}]"
        try:
            lanes.append(
                Lane(
                    int(_field(ld, "id", where)),
                    int(_field(ld, "from_node", where)),
                    int(_field(ld, "to_node", where)),
                    float(_field(ld, "length", where)),
                    float(ld.get("speed_limit", DEFAULT_SPEED_LIMIT)),
                    float(ld.get("detector_zone", DEFAULT_DETECTOR_ZONE)),
                )
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"{where}: {exc}") from exc

    intersections = []
    for i, xd in enumerate(_field(net_doc, "intersections", "network")):
        where = f"network.intersections[{i}]"
        intersections.append(
            Intersection(
                int(_field(xd, "id", where)),
                tuple(float(v) for v in _field(xd, "position", where)),
                tuple(int(v) for v in _field(xd, "incoming_lane_ids", where)),
                tuple(tuple(int(v) for v in p) for p in _field(xd, "phase_table", where)),
                tuple(tuple(int(v) for v in c) for c in xd.get("conflicts", [])),
            )
        )
    boundary = []
    for i, bd in enumerate(net_doc.get("boundary", [])):
        where = f"network.boundary[{i}]"
        kind = _field(bd, "kind", where)
        if kind not in ("source", "sink"):
            raise ScenarioError(f"{where}: kind must be 'source' or 'sink', got {kind!r}")
        boundary.append(
            BoundaryNode(int(_field(bd, "id", where)), kind, tuple(float(v) for v in _field(bd, "position", where)))
        )
    try:
        network = RoadNetwork(tuple(intersections), tuple(boundary), tuple(lanes))
        network.validate()
    except ValueError as exc:
        raise ScenarioError(f"network: {exc}") from exc

    flows = []
    for i, fd in enumerate(doc.get("flows", [])):
        try:
            flows.append(FlowSpec(**fd))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"flows[{i}]: {exc}") from exc

    if "sim_params" in doc:
        try:
            sim_params = SimParams(**doc["sim_params"])
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"sim_params: {exc}") from exc
    else:
        log.warning("scenario has no sim_params; using defaults")
        sim_params = SimParams(defaulted=True)

    return Scenario(
        network,
        tuple(flows),
        sim_params,
        int(doc.get("seed", 0)),
        str(doc.get("name", "scene")),
    )


def load_scenario(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def grid_scenario(
    rows: int,
    cols: int,
    period: float = 1.0,
    horizon: int = 1000,
    seed: int = 0,
    lane_length_profile: Sequence[float] = (200.0,),
    phase_count: int = 4,
    name: str | None = None,
) -> Scenario:
    net = build_grid_map(rows, cols, lane_length_profile, phase_count)
    return Scenario(
        net,
        (FlowSpec(period=period, horizon=horizon),),
        SimParams(),
        seed,
        name or f"grid{rows}x{cols}",
    )


def group_intersections(network: RoadNetwork, group_size: int) -> list[list[int]]:
    """Tile intersections into disjoint groups of neighbours.

    Intersections are ordered column by column (serpentine on y) and chunked,
    so a ``3 x k`` grid groups each column.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    xs = sorted({round(x.position[0], 6) for x in network.intersections})
    order = []
    for ci, cx in enumerate(xs):
        col = [x for x in network.intersections if round(x.position[0], 6) == cx]
        col.sort(key=lambda x: -x.position[1] if ci % 2 == 0 else x.position[1])
        order.extend(x.id for x in col)
    return [order[i:i + group_size] for i in range(0, len(order), group_size)]
