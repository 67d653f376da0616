"""Proactive knowledge exchange between vehicles.

Every vehicle keeps a knowledge base of timestamped positions, planned paths,
and short encoded histories of the vehicles it has heard about. Broadcasting
runs f times per simulated second as a synchronous sweep: every vehicle
merges each neighbour's entire base, freshest timestamp winning, and observes
its direct neighbours at the current time. Stale entries are brought forward
by the trajectory predictor when an estimated graph is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .commgraph import CommGraph, bfs_hops, build_comm_graph
from .roadworld import RoadNetwork, TraceFrame
from .trajpredict import PredictorParams, RolloutState, encode_input

HISTORY_LEN = 5          # recent observations kept per known vehicle
KNOWLEDGE_TTL = 20       # seconds before an entry is evicted


@dataclass(frozen=True)
class KnowledgeEntry:
    vehicle_id: int
    last_position: tuple
    last_seen_t: int
    planned_path: tuple
    history: tuple   # ((t, encoded 6-vector), ...) chronological, len <= HISTORY_LEN


@dataclass
class KnowledgeBase:
    owner: int
    entries: dict = field(default_factory=dict)  # vehicle_id -> KnowledgeEntry
    clock: int = 0

    def staleness(self, vehicle_id: int, t: int) -> int:
        return t - self.entries[vehicle_id].last_seen_t


def _observe(network: RoadNetwork, prev: KnowledgeEntry | None, v, t: int) -> KnowledgeEntry:
    """Fresh first-hand entry for vehicle state `v` at time t."""
    enc = encode_input(network, v)
    history = prev.history if prev is not None else ()
    if not history or history[-1][0] < t:
        history = (history + ((t, enc),))[-HISTORY_LEN:]
    return KnowledgeEntry(
        vehicle_id=v.vehicle_id,
        last_position=(v.position[0], v.position[1]),
        last_seen_t=t,
        planned_path=tuple(v.planned_path),
        history=history,
    )


def _merge_entry(a: KnowledgeEntry | None, b: KnowledgeEntry | None) -> KnowledgeEntry:
    """Freshest-wins merge; equal timestamps keep `a` (contents agree)."""
    if a is None:
        return b
    if b is None or b.last_seen_t <= a.last_seen_t:
        return a
    return b


def broadcast_round(frame: TraceFrame, bases: dict, comm_range: float, f: int,
                    t: int, network: RoadNetwork,
                    knowledge_ttl: int = KNOWLEDGE_TTL) -> dict:
    """One simulated second of broadcasting: f synchronous gossip sweeps.

    Returns the updated {vehicle_id: KnowledgeBase}. Within each sweep all
    reads go against the pre-sweep snapshot, so the result is independent of
    vehicle order.
    """
    states = frame.by_id()
    ids = sorted(states)
    pos = np.array([states[v].position for v in ids])
    n = len(ids)
    if n == 0:
        return dict(bases)
    diff = pos[:, None, :] - pos[None, :, :]
    adjacent = (diff * diff).sum(axis=2) <= comm_range * comm_range
    np.fill_diagonal(adjacent, False)
    neighbours = {vid: [ids[j] for j in np.nonzero(adjacent[i])[0]]
                  for i, vid in enumerate(ids)}

    current = {vid: bases.get(vid, KnowledgeBase(owner=vid)) for vid in ids}
    horizon = t - knowledge_ttl
    for _ in range(max(f, 1)):
        snapshot = current
        updated = {}
        for vid in ids:
            mine = dict(snapshot[vid].entries)
            mine[vid] = _observe(network, mine.get(vid), states[vid], t)
            for nb in neighbours[vid]:
                mine[nb] = _merge_entry(mine.get(nb),
                                        _observe(network, snapshot[nb].entries.get(nb),
                                                 states[nb], t))
                for other, entry in snapshot[nb].entries.items():
                    mine[other] = _merge_entry(mine.get(other), entry)
            mine = {k: e for k, e in mine.items() if e.last_seen_t >= horizon}
            updated[vid] = KnowledgeBase(owner=vid, entries=mine, clock=t)
        current = updated
    return current


class RolloutCache:
    """Shared incremental rollouts keyed by (vehicle, last_seen_t).

    Two bases holding the same (vehicle, timestamp) entry hold identical
    content, so predicted positions can be computed once and advanced one
    second at a time as the episode clock moves forward.
    """

    def __init__(self, network: RoadNetwork, params: PredictorParams | None):
        self.network = network
        self.params = params
        self._tracks = {}     # (vid, last_seen_t) -> (RolloutState, current_t)
        self._positions = {}  # (vid, last_seen_t, t) -> position

    def position_at(self, entry: KnowledgeEntry, t: int) -> tuple:
        if t <= entry.last_seen_t or self.params is None or not entry.history:
            return entry.last_position
        key = (entry.vehicle_id, entry.last_seen_t, t)
        if key in self._positions:
            return self._positions[key]
        track_key = (entry.vehicle_id, entry.last_seen_t)
        if track_key not in self._tracks:
            history = [vec for _, vec in entry.history]
            state = RolloutState(self.network, history, list(entry.planned_path),
                                 self.params)
            self._tracks[track_key] = [state, entry.last_seen_t]
        state, now = self._tracks[track_key]
        while now < t:
            pos = state.advance(self.network, self.params)
            now += 1
            self._positions[(entry.vehicle_id, entry.last_seen_t, now)] = pos
        self._tracks[track_key][1] = now
        return self._positions[key]


def predicted_positions(base: KnowledgeBase, predictor: PredictorParams | None,
                        network: RoadNetwork, t: int,
                        cache: RolloutCache | None = None) -> dict:
    """Current-time position estimate for every entry in the base."""
    if cache is None:
        cache = RolloutCache(network, predictor)
    return {vid: cache.position_at(entry, t) for vid, entry in base.entries.items()}


def estimated_graph(base: KnowledgeBase, predictor: PredictorParams | None,
                    network: RoadNetwork, comm_range: float, t: int,
                    dest_id: int | None = None, k_max: int = 8,
                    cache: RolloutCache | None = None) -> CommGraph:
    """Communication graph over predicted positions of known vehicles.

    Entries with zero staleness use their observed position; stale entries
    are rolled forward one prediction step per second of staleness. Features
    are computed relative to `dest_id` (default: the owner).
    """
    positions = predicted_positions(base, predictor, network, t, cache=cache)
    ref = dest_id if dest_id is not None and dest_id in positions else base.owner
    return build_comm_graph(positions, comm_range, ref, base.owner,
                            network.diagonal(), k_max=k_max)


def reachability_check(g: CommGraph, holder: int, destination: int) -> bool:
    """True iff the destination is known and BFS-reachable from the holder."""
    if destination not in g:
        return False
    hops = bfs_hops(g, holder)
    d = hops.dist.get(destination)
    return isinstance(d, int)
