"""Road networks, synthetic maps, vehicle traffic, and mobility traces.

Maps are perturbed grids: junctions live at jittered grid points, a seeded
fraction of interior edges is removed (connectivity preserving), and long
straight roads are split by inserted segment nodes so spacing stays
comparable across the map. Coordinates are metres with the map origin at
(0, 0).
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ParameterError, TraceParseError, ValidationError

MAX_SEGMENT_LENGTH = 200.0       # metres; longer straight runs get split
POSITION_SNAP_TOLERANCE = 0.5    # metres; trace positions must sit on-network
SPEED_RANGE = (8.0, 15.0)        # m/s, constant per vehicle
MIN_TRIP_FRACTION = 0.35         # min trip road-distance as fraction of map diagonal


@dataclass(frozen=True)
class SegmentNode:
    id: int
    position: tuple  # (x, y) metres


@dataclass
class VehicleState:
    vehicle_id: int
    position: tuple
    speed: float
    planned_path: list  # segment node ids still ahead, destination last


@dataclass
class TraceFrame:
    time_step: int
    vehicles: list  # VehicleState, sorted by vehicle_id

    def by_id(self):
        return {v.vehicle_id: v for v in self.vehicles}


@dataclass
class RoadNetwork:
    segment_nodes: list          # SegmentNode
    segments: list               # (from_id, to_id) directed pairs, both ways per road
    junction_ids: list           # nodes where roads meet or end (pre-split nodes)
    bounds: tuple                # (width, height) metres

    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _adj: dict = field(default=None, init=False, repr=False, compare=False)
    _seg_arrays: tuple = field(default=None, init=False, repr=False, compare=False)
    _dijkstra_cache: dict = field(default=None, init=False, repr=False, compare=False)

    # -- basic accessors ----------------------------------------------------

    def node(self, node_id: int) -> SegmentNode:
        if self._index is None:
            self._index = {n.id: n for n in self.segment_nodes}
        return self._index[node_id]

    def neighbours(self, node_id: int) -> list:
        if self._adj is None:
            adj = {n.id: set() for n in self.segment_nodes}
            for a, b in self.segments:
                adj[a].add(b)
                adj[b].add(a)
            self._adj = {k: sorted(v) for k, v in adj.items()}
        return self._adj[node_id]

    def diagonal(self) -> float:
        return math.hypot(self.bounds[0], self.bounds[1])

    def segment_arrays(self):
        """(seg_a, seg_b) endpoint arrays aligned with self.segments order."""
        if self._seg_arrays is None:
            a = np.array([self.node(s).position for s, _ in self.segments], dtype=np.float64)
            b = np.array([self.node(t).position for _, t in self.segments], dtype=np.float64)
            self._seg_arrays = (a, b)
        return self._seg_arrays

    def segment_length(self, a: int, b: int) -> float:
        pa, pb = self.node(a).position, self.node(b).position
        return math.hypot(pb[0] - pa[0], pb[1] - pa[1])

    def mean_segment_length(self) -> float:
        total = sum(self.segment_length(a, b) for a, b in self.segments)
        return total / len(self.segments)

    # -- paths ---------------------------------------------------------------

    def shortest_node_path(self, src: int, dst: int) -> list | None:
        """Length-weighted shortest walk over segment nodes, or None."""
        dist, prev = self._dijkstra(src)
        if dst not in dist:
            return None
        path = [dst]
        while path[-1] != src:
            path.append(prev[path[-1]])
        path.reverse()
        return path

    def road_distance(self, src: int, dst: int) -> float:
        dist, _ = self._dijkstra(src)
        return dist.get(dst, math.inf)

    def _dijkstra(self, src: int):
        if self._dijkstra_cache is None:
            self._dijkstra_cache = {}
        if src in self._dijkstra_cache:
            return self._dijkstra_cache[src]
        dist = {src: 0.0}
        prev = {}
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, math.inf):
                continue
            for v in self.neighbours(u):
                nd = d + self.segment_length(u, v)
                if nd < dist.get(v, math.inf) - 1e-12:
                    dist[v] = nd
                    prev[v] = u
                    heapq.heappush(heap, (nd, v))
        self._dijkstra_cache[src] = (dist, prev)
        return dist, prev

    # -- validation ----------------------------------------------------------

    def validate(self):
        ids = [n.id for n in self.segment_nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError("segment node ids are not unique")
        for n in self.segment_nodes:
            if not (math.isfinite(n.position[0]) and math.isfinite(n.position[1])):
                raise ValidationError(f"node {n.id} has a non-finite position")
        known = set(ids)
        for a, b in self.segments:
            if a not in known or b not in known:
                raise ValidationError(f"segment ({a}, {b}) references an unknown node")
            length = self.segment_length(a, b)
            if not 0.0 < length <= MAX_SEGMENT_LENGTH + 1e-9:
                raise ValidationError(
                    f"segment ({a}, {b}) length {length:.2f} outside (0, {MAX_SEGMENT_LENGTH}]")
        if not _connected(ids, self.segments):
            raise ValidationError("segment graph is not connected")


def _connected(node_ids, segments) -> bool:
    """Union-find connectivity over the undirected segment graph."""
    parent = {i: i for i in node_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in segments:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    roots = {find(i) for i in node_ids}
    return len(roots) <= 1


# ---------------------------------------------------------------------------
# map generation
# ---------------------------------------------------------------------------

def generate_map(seed: int, grid_cols: int, grid_rows: int, cell_size: float,
                 perturbation: float) -> RoadNetwork:
    """Build a connected perturbed-grid road network.

    Junctions sit at grid points jittered by up to perturbation * cell/4;
    a perturbation-proportional share of edges is removed (keeping the graph
    connected) so different seeds give structurally distinct maps.
    """
    if grid_cols < 2 or grid_rows < 2:
        raise ParameterError("grid_cols and grid_rows must both be >= 2")
    if cell_size <= 0:
        raise ParameterError("cell_size must be positive")
    if not 0.0 <= perturbation <= 1.0:
        raise ParameterError("perturbation must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n_grid = grid_cols * grid_rows

    def gid(cx, cy):
        return cy * grid_cols + cx

    jitter = perturbation * cell_size / 4.0
    coords = np.empty((n_grid, 2))
    for cy in range(grid_rows):
        for cx in range(grid_cols):
            off = rng.uniform(-jitter, jitter, size=2) if jitter > 0 else (0.0, 0.0)
            coords[gid(cx, cy)] = (cx * cell_size + off[0], cy * cell_size + off[1])

    edges = []
    for cy in range(grid_rows):
        for cx in range(grid_cols):
            if cx + 1 < grid_cols:
                edges.append((gid(cx, cy), gid(cx + 1, cy)))
            if cy + 1 < grid_rows:
                edges.append((gid(cx, cy), gid(cx, cy + 1)))

    n_drop = int(round(perturbation * 0.25 * len(edges)))
    if n_drop > 0:
        order = rng.permutation(len(edges))
        kept = list(edges)
        dropped = 0
        for idx in order:
            if dropped == n_drop:
                break
            candidate = edges[idx]
            trial = [e for e in kept if e != candidate]
            if _connected(list(range(n_grid)), trial):
                kept = trial
                dropped += 1
        edges = kept

    coords -= coords.min(axis=0)

    nodes = [SegmentNode(i, (float(coords[i][0]), float(coords[i][1]))) for i in range(n_grid)]
    segments = []
    next_id = n_grid
    for a, b in edges:
        pa, pb = coords[a], coords[b]
        length = float(np.hypot(*(pb - pa)))
        pieces = max(1, math.ceil(length / MAX_SEGMENT_LENGTH))
        chain = [a]
        for k in range(1, pieces):
            t = k / pieces
            p = pa + t * (pb - pa)
            nodes.append(SegmentNode(next_id, (float(p[0]), float(p[1]))))
            chain.append(next_id)
            next_id += 1
        chain.append(b)
        for u, v in zip(chain, chain[1:]):
            segments.append((u, v))
            segments.append((v, u))

    net = RoadNetwork(
        segment_nodes=nodes,
        segments=segments,
        junction_ids=sorted(range(n_grid)),
        bounds=(float(coords[:, 0].max()), float(coords[:, 1].max())),
    )
    net.validate()
    return net


def save_map(network: RoadNetwork, path):
    payload = {
        "nodes": [{"id": n.id, "x": n.position[0], "y": n.position[1]}
                  for n in network.segment_nodes],
        "segments": [[a, b] for a, b in network.segments],
        "junctions": list(network.junction_ids),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_map(path) -> RoadNetwork:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    nodes = [SegmentNode(int(n["id"]), (float(n["x"]), float(n["y"])))
             for n in payload["nodes"]]
    xs = [n.position[0] for n in nodes]
    ys = [n.position[1] for n in nodes]
    if min(xs) < -1e-6 or min(ys) < -1e-6:
        raise ValidationError("map coordinates must be non-negative (origin at (0, 0))")
    net = RoadNetwork(
        segment_nodes=nodes,
        segments=[(int(a), int(b)) for a, b in payload["segments"]],
        junction_ids=sorted(int(j) for j in payload["junctions"]),
        bounds=(max(xs), max(ys)),
    )
    net.validate()
    return net


# ---------------------------------------------------------------------------
# traffic generation
# ---------------------------------------------------------------------------

class _ActiveVehicle:
    __slots__ = ("vehicle_id", "route", "cum", "dist", "speed")

    def __init__(self, vehicle_id, route, cum, speed):
        self.vehicle_id = vehicle_id
        self.route = route       # node ids, src junction .. dst junction
        self.cum = cum           # cumulative arclength per route node
        self.dist = 0.0
        self.speed = speed

    def position(self, network):
        return _point_on_route(network, self.route, self.cum, self.dist)

    def remaining_path(self):
        i = int(np.searchsorted(self.cum, self.dist + 1e-9))
        if i >= len(self.route):
            return [self.route[-1]]
        return list(self.route[i:])


def _route_cumlen(network, route):
    cum = [0.0]
    for a, b in zip(route, route[1:]):
        cum.append(cum[-1] + network.segment_length(a, b))
    return np.asarray(cum)


def _point_on_route(network, route, cum, dist):
    if dist <= 0:
        return network.node(route[0]).position
    if dist >= cum[-1]:
        return network.node(route[-1]).position
    i = int(np.searchsorted(cum, dist, side="right")) - 1
    a = np.asarray(network.node(route[i]).position)
    b = np.asarray(network.node(route[i + 1]).position)
    t = (dist - cum[i]) / (cum[i + 1] - cum[i])
    p = a + t * (b - a)
    return (float(p[0]), float(p[1]))


def _sample_trip(network, rng, min_dist):
    junctions = network.junction_ids
    best = None
    for _ in range(50):
        src = junctions[rng.integers(len(junctions))]
        dst = junctions[rng.integers(len(junctions))]
        if src == dst:
            continue
        d = network.road_distance(src, dst)
        if not math.isfinite(d):
            continue
        if best is None or d > best[2]:
            best = (src, dst, d)
        if d >= min_dist:
            return src, dst
    if best is None:
        raise ValidationError("could not sample a connected junction pair")
    return best[0], best[1]


def estimate_trip_seconds(network: RoadNetwork, seed: int = 0, samples: int = 100) -> float:
    """Mean trip duration for the trip-sampling rule on this map (seconds)."""
    rng = np.random.default_rng(seed)
    min_dist = MIN_TRIP_FRACTION * network.diagonal()
    mean_speed = 0.5 * (SPEED_RANGE[0] + SPEED_RANGE[1])
    total = 0.0
    for _ in range(samples):
        src, dst = _sample_trip(network, rng, min_dist)
        total += network.road_distance(src, dst) / mean_speed
    return total / samples


def generate_traffic(network: RoadNetwork, seed: int, duration: int,
                     density: float) -> list:
    """Simulate per-second vehicle motion and return one TraceFrame per second.

    `density` is the mean spawn rate in vehicles per second. Vehicles enter at
    a random junction, follow the shortest road route to a random destination
    junction at a constant per-vehicle speed, and despawn on arrival. A seeded
    burn-in period runs before frame 0 so counts start at steady state.
    """
    if duration < 1:
        raise ParameterError("duration must be >= 1 second")
    if density < 0:
        raise ParameterError("density must be non-negative")

    rng = np.random.default_rng(seed)
    frames = []
    if density == 0:
        return [TraceFrame(t, []) for t in range(duration)]

    burn_in = int(math.ceil(1.6 * estimate_trip_seconds(network, seed=seed)))
    min_dist = MIN_TRIP_FRACTION * network.diagonal()
    active = []
    next_vehicle_id = 0

    for t in range(-burn_in, duration):
        for _ in range(int(rng.poisson(density))):
            src, dst = _sample_trip(network, rng, min_dist)
            route = network.shortest_node_path(src, dst)
            speed = float(rng.uniform(*SPEED_RANGE))
            active.append(_ActiveVehicle(next_vehicle_id, route,
                                         _route_cumlen(network, route), speed))
            next_vehicle_id += 1
        if t >= 0:
            vehicles = [
                VehicleState(v.vehicle_id, v.position(network), v.speed, v.remaining_path())
                for v in active
            ]
            vehicles.sort(key=lambda s: s.vehicle_id)
            frames.append(TraceFrame(t, vehicles))
        for v in active:
            v.dist += v.speed
        active = [v for v in active if v.dist < v.cum[-1]]

    return frames


def calibrate_density(network: RoadNetwork, seed: int, band=(40, 70),
                      probe_duration: int = 150) -> float:
    """Find a spawn rate whose steady-state active count sits inside `band`."""
    target = 0.5 * (band[0] + band[1])
    trip_seconds = estimate_trip_seconds(network, seed=seed)
    density = target / trip_seconds
    for _ in range(4):
        frames = generate_traffic(network, seed, probe_duration, density)
        counts = [len(f.vehicles) for f in frames]
        mean = sum(counts) / len(counts)
        if band[0] <= mean <= band[1]:
            inside = sum(1 for c in counts if band[0] <= c <= band[1]) / len(counts)
            if inside >= 0.9:
                break
        density *= target / max(mean, 1.0)
    return density


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

def routes_path_for(trace_path) -> Path:
    p = Path(trace_path)
    return p.with_name(p.stem + ".routes.json")


def save_trace(frames: list, path):
    """Write the trace CSV plus its companion route file.

    Route records are recovered from each vehicle's first appearance, whose
    planned_path is the full remaining route.
    """
    path = Path(path)
    routes = {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "vehicle_id", "x", "y", "speed"])
        for frame in frames:
            for v in frame.vehicles:
                if v.vehicle_id not in routes:
                    routes[v.vehicle_id] = {
                        "vehicle_id": v.vehicle_id,
                        "depart_t": frame.time_step,
                        "node_ids": list(v.planned_path),
                    }
                writer.writerow([frame.time_step, v.vehicle_id,
                                 repr(v.position[0]), repr(v.position[1]), repr(v.speed)])
    with open(routes_path_for(path), "w", encoding="utf-8") as fh:
        json.dump([routes[k] for k in sorted(routes)], fh, sort_keys=True)


def load_trace(path, network: RoadNetwork) -> list:
    """Read a trace CSV (+ companion routes) back into TraceFrames.

    Planned paths are reconstructed by tracking each vehicle's monotone
    progress along its route polyline.
    """
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "vehicle_id", "x", "y", "speed"]:
            raise TraceParseError("missing or malformed header (want t,vehicle_id,x,y,speed)", 1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise TraceParseError(f"expected 5 fields, got {len(row)}", line_no)
            try:
                t = int(row[0])
                vid = int(row[1])
                x, y, speed = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise TraceParseError(str(exc), line_no) from exc
            rows.append((t, vid, x, y, speed, line_no))

    if not rows:
        return []

    rp = routes_path_for(path)
    if not rp.exists():
        raise ValidationError(f"companion route file not found: {rp}")
    with open(rp, "r", encoding="utf-8") as fh:
        route_records = json.load(fh)
    routes = {int(r["vehicle_id"]): [int(n) for n in r["node_ids"]] for r in route_records}

    by_time = {}
    for t, vid, x, y, speed, line_no in rows:
        frame = by_time.setdefault(t, {})
        if vid in frame:
            raise TraceParseError(f"duplicate vehicle {vid} at t={t}", line_no)
        frame[vid] = (x, y, speed, line_no)

    progress = {}
    cums = {}
    frames = []
    for t in sorted(by_time):
        vehicles = []
        for vid in sorted(by_time[t]):
            x, y, speed, line_no = by_time[t][vid]
            if vid not in routes:
                raise ValidationError(f"vehicle {vid} has no route record in {rp.name}")
            route = routes[vid]
            if vid not in cums:
                cums[vid] = _route_cumlen(network, route)
            cum = cums[vid]
            s, offset = _route_progress(network, route, cum, (x, y),
                                        progress.get(vid, 0.0))
            if offset > POSITION_SNAP_TOLERANCE and progress.get(vid, 0.0) <= 1e-9:
                # Route records start at the first node *ahead*; a vehicle may
                # still be on the segment leading into route[0].
                d = _approach_distance(network, route[0], (x, y))
                if d <= POSITION_SNAP_TOLERANCE:
                    s, offset = 0.0, d
            if offset > POSITION_SNAP_TOLERANCE:
                raise ValidationError(
                    f"vehicle {vid} at t={t} is {offset:.3f} m off its route "
                    f"(> {POSITION_SNAP_TOLERANCE} m)")
            progress[vid] = s
            node0 = np.asarray(network.node(route[0]).position)
            approaching = s <= 1e-9 and float(np.hypot(x - node0[0], y - node0[1])) > 1e-6
            if approaching:
                remaining = list(route)
            else:
                i = int(np.searchsorted(cum, s + 1e-9))
                remaining = list(route[i:]) if i < len(route) else [route[-1]]
            vehicles.append(VehicleState(vid, (x, y), speed, remaining))
        frames.append(TraceFrame(t, vehicles))
    return frames


def _approach_distance(network, node_id, pos):
    """Distance from pos to the nearest segment ending at node_id."""
    p = np.asarray(pos)
    target = np.asarray(network.node(node_id).position)
    best = float(np.hypot(*(p - target)))
    for nb in network.neighbours(node_id):
        a = np.asarray(network.node(nb).position)
        ab = target - a
        denom = float(ab @ ab)
        t = min(max(float((p - a) @ ab) / denom, 0.0), 1.0) if denom > 0 else 0.0
        foot = a + t * ab
        best = min(best, float(np.hypot(*(p - foot))))
    return best


def _route_progress(network, route, cum, pos, min_progress):
    """Nearest arclength >= min_progress of `pos` along the route polyline."""
    p = np.asarray(pos)
    best_s, best_d = None, math.inf
    for i in range(len(route) - 1):
        if cum[i + 1] < min_progress - 1e-9:
            continue
        a = np.asarray(network.node(route[i]).position)
        b = np.asarray(network.node(route[i + 1]).position)
        ab = b - a
        denom = float(ab @ ab)
        t = float((p - a) @ ab) / denom if denom > 0 else 0.0
        lo = 0.0
        if cum[i] < min_progress:
            lo = (min_progress - cum[i]) / (cum[i + 1] - cum[i])
        t = min(max(t, lo), 1.0)
        foot = a + t * ab
        d = float(np.hypot(*(p - foot)))
        if d < best_d - 1e-12:
            best_d = d
            best_s = cum[i] + t * (cum[i + 1] - cum[i])
    if best_s is None:   # single-node route
        best_s = 0.0
        best_d = float(np.hypot(*(p - np.asarray(network.node(route[0]).position))))
    return best_s, best_d


# ---------------------------------------------------------------------------
# path queries
# ---------------------------------------------------------------------------

def next_two_segment_nodes(network: RoadNetwork, v: VehicleState):
    """The two segment nodes the vehicle reaches next on its planned path.

    With a single node left the destination is repeated. Raises
    ConsistencyError when the vehicle sits > POSITION_SNAP_TOLERANCE from
    every segment touching its next node.
    """
    if not v.planned_path:
        raise ParameterError(f"vehicle {v.vehicle_id} has an empty planned_path")
    first = v.planned_path[0]
    second = v.planned_path[1] if len(v.planned_path) >= 2 else first
    _check_on_approach(network, v.position, first, v.vehicle_id)
    return network.node(first), network.node(second)


def _check_on_approach(network, pos, node_id, vehicle_id):
    p = np.asarray(pos)
    target = np.asarray(network.node(node_id).position)
    best = float(np.hypot(*(p - target)))
    for nb in network.neighbours(node_id):
        a = np.asarray(network.node(nb).position)
        ab = target - a
        denom = float(ab @ ab)
        t = min(max(float((p - a) @ ab) / denom, 0.0), 1.0) if denom > 0 else 0.0
        foot = a + t * ab
        best = min(best, float(np.hypot(*(p - foot))))
        if best <= POSITION_SNAP_TOLERANCE:
            return
    if best > POSITION_SNAP_TOLERANCE:
        raise ConsistencyError(
            f"vehicle {vehicle_id} is {best:.3f} m from any segment touching node {node_id}")
