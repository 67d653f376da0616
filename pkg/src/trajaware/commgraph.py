"""Per-step communication graphs over vehicles.

Two vehicles are linked iff their Euclidean distance is within the signal
range. Node features are destination- and holder-relative geometry plus role
flags and degree (see `FEATURE_DIM` layout below).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import GraphLookupError, ParameterError


class _Unreachable:
    __slots__ = ()

    def __repr__(self):
        return "UNREACHABLE"


#: Sentinel hop distance for nodes BFS cannot reach. Deliberately not an
#: integer so arithmetic on it fails loudly.
UNREACHABLE = _Unreachable()

#: Per-node feature layout:
#:   0, 1  (dx, dy) to destination, / map diagonal
#:   2, 3  (dx, dy) to current holder, / map diagonal
#:   4     is_destination flag
#:   5     is_holder flag
#:   6     degree / k_max
FEATURE_DIM = 7


@dataclass
class CommGraph:
    node_ids: list           # vehicle ids, ascending
    positions: np.ndarray    # (n, 2) metres, aligned with node_ids
    adjacency: np.ndarray    # (n, n) bool, symmetric, false diagonal
    features: np.ndarray     # (n, FEATURE_DIM)

    def index_of(self, vehicle_id: int) -> int:
        try:
            return self._idx[vehicle_id]
        except AttributeError:
            self._idx = {vid: i for i, vid in enumerate(self.node_ids)}
            try:
                return self._idx[vehicle_id]
            except KeyError:
                raise GraphLookupError(f"vehicle {vehicle_id} not in graph") from None
        except KeyError:
            raise GraphLookupError(f"vehicle {vehicle_id} not in graph") from None

    def __contains__(self, vehicle_id: int) -> bool:
        try:
            self.index_of(vehicle_id)
            return True
        except GraphLookupError:
            return False

    def neighbour_indices(self, vehicle_id: int) -> np.ndarray:
        return np.nonzero(self.adjacency[self.index_of(vehicle_id)])[0]

    def neighbour_ids(self, vehicle_id: int) -> list:
        return [self.node_ids[i] for i in self.neighbour_indices(vehicle_id)]

    def degree(self, vehicle_id: int) -> int:
        return int(self.adjacency[self.index_of(vehicle_id)].sum())


@dataclass
class HopDistances:
    source_id: int
    dist: dict  # vehicle id -> hop count, or UNREACHABLE

    def hops(self, vehicle_id: int):
        return self.dist[vehicle_id]

    def reachable(self, vehicle_id: int) -> bool:
        d = self.dist.get(vehicle_id, UNREACHABLE)
        return d is not UNREACHABLE


def build_comm_graph(positions_by_id: dict, comm_range: float, dest_id: int,
                     holder_id: int, map_diagonal: float, k_max: int = 8) -> CommGraph:
    """Build the range graph and feature matrix for one step.

    `positions_by_id` maps vehicle id -> (x, y). The map diagonal normalises
    relative positions into [-1, 1].
    """
    if comm_range <= 0:
        raise ParameterError("comm_range must be positive")
    if dest_id not in positions_by_id:
        raise GraphLookupError(f"destination {dest_id} not present")
    if holder_id not in positions_by_id:
        raise GraphLookupError(f"holder {holder_id} not present")

    node_ids = sorted(positions_by_id)
    pos = np.array([positions_by_id[v] for v in node_ids], dtype=np.float64)
    n = len(node_ids)

    diff = pos[:, None, :] - pos[None, :, :]
    dist2 = (diff * diff).sum(axis=2)
    adjacency = dist2 <= comm_range * comm_range
    np.fill_diagonal(adjacency, False)

    idx = {v: i for i, v in enumerate(node_ids)}
    d_i, h_i = idx[dest_id], idx[holder_id]
    features = np.zeros((n, FEATURE_DIM))
    features[:, 0:2] = (pos[d_i] - pos) / map_diagonal
    features[:, 2:4] = (pos[h_i] - pos) / map_diagonal
    features[d_i, 4] = 1.0
    features[h_i, 5] = 1.0
    features[:, 6] = adjacency.sum(axis=1) / k_max

    return CommGraph(node_ids=node_ids, positions=pos, adjacency=adjacency,
                     features=features)


def graph_from_frame(frame, comm_range: float, dest_id: int, holder_id: int,
                     map_diagonal: float, k_max: int = 8) -> CommGraph:
    positions = {v.vehicle_id: v.position for v in frame.vehicles}
    return build_comm_graph(positions, comm_range, dest_id, holder_id,
                            map_diagonal, k_max=k_max)


def bfs_hops(g: CommGraph, source: int) -> HopDistances:
    """Exact unweighted hop counts from `source`; unreachable -> UNREACHABLE."""
    src = g.index_of(source)
    n = len(g.node_ids)
    dist = np.full(n, -1, dtype=np.int64)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in np.nonzero(g.adjacency[u])[0]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(int(v))
    out = {}
    for i, vid in enumerate(g.node_ids):
        out[vid] = int(dist[i]) if dist[i] >= 0 else UNREACHABLE
    return HopDistances(source_id=source, dist=out)


def two_hop_set(g: CommGraph, node: int) -> set:
    """Vehicles at hop distance exactly 2 from `node`."""
    i = g.index_of(node)
    one_hop = g.adjacency[i]
    reach2 = g.adjacency[one_hop].any(axis=0)
    two = reach2 & ~one_hop
    two[i] = False
    return {g.node_ids[j] for j in np.nonzero(two)[0]}
