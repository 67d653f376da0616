"""Greedy action-space pruning that preserves two-hop reachability.

Neighbours are ranked by how many two-hop nodes they link to; the greedy
pass keeps the ones adding uncovered two-hop nodes, then tops the set back
up to k_max with the highest-ranked removed neighbours. Holders with at
most k_max neighbours are never pruned.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .commgraph import CommGraph, two_hop_set
from .errors import ParameterError


@dataclass
class PrunedActionSet:
    holder_id: int
    retained: list        # <= k_max neighbour ids, pruning order
    covered_two_hop: set  # two-hop nodes adjacent to some retained neighbour
    coverage_lost: bool = False  # greedy cover alone exceeded k_max


def _ranked_neighbours(g: CommGraph, holder: int, two_hop: set):
    """Neighbour ids sorted by descending two-hop link count, tie by id."""
    ranked = []
    for nb in g.neighbour_ids(holder):
        links = sum(1 for x in g.neighbour_ids(nb) if x in two_hop)
        ranked.append((-links, nb))
    ranked.sort()
    return [nb for _, nb in ranked]


def prune_actions(g: CommGraph, holder: int, k_max: int, seed: int = 0) -> PrunedActionSet:
    """Retain min(degree, k_max) neighbours, preferring two-hop coverage.

    Deterministic given (graph, holder, k_max); `seed` is accepted for
    signature compatibility with the capped no-pruning selection but the
    pruning path itself never draws randomness.
    """
    if k_max < 1:
        raise ParameterError("k_max must be >= 1")
    two_hop = two_hop_set(g, holder)
    neighbours = g.neighbour_ids(holder)

    if len(neighbours) <= k_max:
        order = _ranked_neighbours(g, holder, two_hop)
        covered = _coverage(g, order, two_hop)
        return PrunedActionSet(holder, order, covered)

    order = _ranked_neighbours(g, holder, two_hop)
    kept = []
    removed = []
    covered = set()
    for nb in order:
        gain = {x for x in g.neighbour_ids(nb) if x in two_hop} - covered
        if gain:
            kept.append(nb)
            covered |= gain
        else:
            removed.append(nb)

    coverage_lost = False
    if len(kept) > k_max:
        kept = kept[:k_max]
        covered = _coverage(g, kept, two_hop)
        coverage_lost = covered != two_hop
    elif len(kept) < k_max:
        kept = kept + removed[:k_max - len(kept)]

    return PrunedActionSet(holder, kept, covered, coverage_lost)


def capped_action_set(g: CommGraph, holder: int, cap: int, seed: int = 0) -> PrunedActionSet:
    """No-pruning action set: every neighbour, randomly thinned to `cap`.

    Used by the pruning ablation; the random overflow selection mirrors the
    unmodified rule and is seeded for reproducibility.
    """
    if cap < 1:
        raise ParameterError("cap must be >= 1")
    neighbours = g.neighbour_ids(holder)
    if len(neighbours) > cap:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(neighbours), size=cap, replace=False)
        neighbours = [neighbours[i] for i in sorted(pick)]
    two_hop = two_hop_set(g, holder)
    return PrunedActionSet(holder, list(neighbours), _coverage(g, neighbours, two_hop))


def _coverage(g: CommGraph, retained, two_hop: set) -> set:
    covered = set()
    for nb in retained:
        covered.update(x for x in g.neighbour_ids(nb) if x in two_hop)
    return covered


def degree_histogram(traces: list, comm_range: float, k_max: int,
                     map_diagonal: float) -> tuple:
    """Per-node-per-frame degree counts before and after pruning."""
    if not traces:
        raise ParameterError("traces must be non-empty")
    before = Counter()
    after = Counter()
    for frame in traces:
        if not frame.vehicles:
            continue
        positions = {v.vehicle_id: v.position for v in frame.vehicles}
        ref = frame.vehicles[0].vehicle_id
        from .commgraph import build_comm_graph
        g = build_comm_graph(positions, comm_range, ref, ref, map_diagonal, k_max=k_max)
        for vid in g.node_ids:
            deg = g.degree(vid)
            before[deg] += 1
            if deg == 0:
                after[0] += 1
            else:
                after[len(prune_actions(g, vid, k_max).retained)] += 1
    return dict(sorted(before.items())), dict(sorted(after.items()))
