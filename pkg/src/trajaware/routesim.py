"""Hop-by-hop routing episodes on the dynamic vehicle network.

One hop (relay, wait, or final delivery) consumes one simulation second and
one TTL unit. Under complete observation decisions use the true graph (at
the configured recomputation cadence); under partial observation each holder
decides on the graph estimated from its own knowledge base, with direct
neighbours observed live and everything else rolled forward by the
trajectory predictor.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import obstore
from .commgraph import bfs_hops, graph_from_frame, UNREACHABLE
from .dqntrain import Experience, HopOutcome, RewardConfig, compute_reward
from .errors import EvaluationError, ParameterError
from .policy import PolicyState
from .pruning import capped_action_set, prune_actions
from .roadworld import RoadNetwork

NO_CONGESTION = "no_congestion"
CONGESTION = "congestion"

# Episode outcomes beyond the reward-bearing hop outcomes.
DROPPED_HOLDER_LOST = "dropped_holder_lost"
DROPPED_DEST_LOST = "dropped_dest_lost"


@dataclass(frozen=True)
class Observation:
    kind: str                 # "complete" or "partial"
    f: int = 4                # broadcasts per second (partial)
    warmup_rounds: int = 10   # broadcast seconds before routing starts

    @staticmethod
    def complete():
        return Observation(kind="complete")

    @staticmethod
    def partial(f: int = 4, warmup_rounds: int = 10):
        return Observation(kind="partial", f=f, warmup_rounds=warmup_rounds)


@dataclass
class EpisodeConfig:
    ttl: int = 20
    rewards: RewardConfig = field(default_factory=RewardConfig)
    gamma: float = 0.95            # used to fold the forced delivery step
    background_packets: int = 8    # circulating load in congestion mode
    knowledge_ttl: int = 20


@dataclass
class Packet:
    packet_id: int
    source: int
    destination: int
    holder: int
    ttl: int
    size: float = 1.0
    hops_used: int = 0
    created_t: int = 0
    shortest_at_send: int = 0


class LinkLoad:
    """Per-step capacity ledger over undirected vehicle pairs."""

    def __init__(self, capacity: float = 1.0):
        self.capacity = capacity
        self.loads = {}

    def reset(self):
        self.loads = {}

    def residual(self, a: int, b: int) -> float:
        return self.capacity - self.loads.get((min(a, b), max(a, b)), 0.0)

    def book(self, a: int, b: int, size: float) -> bool:
        key = (min(a, b), max(a, b))
        used = self.loads.get(key, 0.0)
        if used + size > self.capacity + 1e-12:
            return False
        self.loads[key] = used + size
        return True


@dataclass
class EpisodeResult:
    delivered: bool
    hops_used: int
    shortest_at_send: int
    spr: float | None
    pspr: float
    outcome: str
    src: int
    dst: int
    created_t: int
    waits: int = 0
    warmup_rounds: int | None = None


@dataclass
class MetricsSummary:
    avg_spr: float
    avg_pspr: float
    rr: float
    episodes: int

    def to_dict(self):
        return {"avg_spr": self.avg_spr, "avg_pspr": self.avg_pspr,
                "rr": self.rr, "episodes": self.episodes}


class EpisodeContext:
    """A trace plus everything needed to run episodes on it."""

    def __init__(self, network: RoadNetwork, frames: list, comm_range: float,
                 graph_every: int = 1, k_max: int = 8, use_pruning: bool = True,
                 no_prune_cap: int = 16, predictor=None):
        self.network = network
        self.frames = frames
        self.comm_range = comm_range
        self.graph_every = max(graph_every, 1)
        self.k_max = k_max
        self.use_pruning = use_pruning
        self.no_prune_cap = no_prune_cap
        self.predictor = predictor
        self._frame_index = {f.time_step: i for i, f in enumerate(frames)}

    def frame(self, t: int):
        return self.frames[self._frame_index[t]]

    def has_frame(self, t: int) -> bool:
        return t in self._frame_index

    def view_time(self, t: int) -> int:
        return (t // self.graph_every) * self.graph_every

    def action_set(self, graph, holder, seed):
        if self.use_pruning:
            return prune_actions(graph, holder, self.k_max, seed)
        return capped_action_set(graph, holder, self.no_prune_cap, seed)

    def action_slots(self) -> int:
        return self.k_max if self.use_pruning else self.no_prune_cap


@dataclass
class StepWorld:
    """Everything one packet step needs to decide and move."""

    graph: object                  # CommGraph used for the decision
    action_set: object             # PrunedActionSet (may be empty)
    dest_adjacent: bool            # physically within range this second


def step_packet(packet: Packet, world: StepWorld, policy, loads: LinkLoad,
                mode: str, rng=None):
    """Advance the packet by one hop/wait. Returns (outcome, state, slot).

    `state` and `slot` describe the policy decision when one was made
    (None for the delivery shortcut and for stalls with no neighbours).
    """
    if world.dest_adjacent:
        if mode == CONGESTION and not loads.book(packet.holder, packet.destination,
                                                 packet.size):
            packet.hops_used += 1
            outcome = (HopOutcome.DROPPED_TTL if packet.hops_used >= packet.ttl
                       else HopOutcome.CONGESTION_WAIT)
            return outcome, None, None
        packet.hops_used += 1
        packet.holder = packet.destination
        return HopOutcome.DELIVERED, None, None

    retained = world.action_set.retained if world.action_set is not None else []
    if not retained:
        packet.hops_used += 1
        outcome = (HopOutcome.DROPPED_TTL if packet.hops_used >= packet.ttl
                   else HopOutcome.CONGESTION_WAIT)
        return outcome, None, None

    state = PolicyState(graph=world.graph, holder=packet.holder,
                        destination=packet.destination, pruned=world.action_set)
    target = policy.decide(state)
    slot = retained.index(target)

    if mode == CONGESTION and not loads.book(packet.holder, target, packet.size):
        packet.hops_used += 1
        outcome = (HopOutcome.DROPPED_TTL if packet.hops_used >= packet.ttl
                   else HopOutcome.CONGESTION_WAIT)
        return outcome, state, slot

    packet.hops_used += 1
    packet.holder = target
    outcome = (HopOutcome.DROPPED_TTL if packet.hops_used >= packet.ttl
               else HopOutcome.RELAYED)
    return outcome, state, slot


def _true_adjacent(frame_by_id, a: int, b: int, comm_range: float) -> bool:
    pa, pb = frame_by_id[a].position, frame_by_id[b].position
    return math.hypot(pa[0] - pb[0], pa[1] - pb[1]) <= comm_range


def _refresh_direct(base, frame, t, comm_range, network):
    """First-hand observation of the holder itself and its true neighbours."""
    by_id = frame.by_id()
    holder_pos = by_id[base.owner].position
    entries = dict(base.entries)
    for vid, v in by_id.items():
        if vid == base.owner or _true_adjacent(by_id, base.owner, vid, comm_range):
            entries[vid] = obstore._merge_entry(
                entries.get(vid), obstore._observe(network, entries.get(vid), v, t))
    return obstore.KnowledgeBase(owner=base.owner, entries=entries, clock=t)


def run_episode(ctx: EpisodeContext, src: int, dst: int, t0: int, policy,
                observation: Observation, mode: str, cfg: EpisodeConfig,
                rng=None, collect: bool = False, bases_at=None,
                rollout_cache=None, size: float = 1.0):
    """Route one packet from src to dst starting at time t0.

    Returns (EpisodeResult, experiences). Experiences are recorded only when
    `collect` is set (training runs under complete observation).
    """
    if src == dst:
        raise ParameterError("source and destination must differ")
    rng = np.random.default_rng(0) if rng is None else rng

    frame0 = ctx.frame(t0)
    g0 = graph_from_frame(frame0, ctx.comm_range, dst, src, ctx.network.diagonal(),
                          k_max=ctx.k_max)
    d0 = bfs_hops(g0, src).dist[dst]
    if d0 is UNREACHABLE:
        raise ParameterError("destination unreachable at send time; episode invalid")
    shortest = int(d0)

    partial = observation.kind == "partial"
    warmup = None
    bases = None
    cache = rollout_cache
    if partial:
        warmup = observation.warmup_rounds
        if bases_at is not None:
            bases = bases_at(t0)
        else:
            bases = build_bases(ctx, t0, observation, cfg.knowledge_ttl)
        bases = dict(bases)
        if cache is None:
            cache = obstore.RolloutCache(ctx.network, ctx.predictor)

    packet = Packet(packet_id=0, source=src, destination=dst, holder=src,
                    ttl=cfg.ttl, size=size, created_t=t0, shortest_at_send=shortest)
    background = []
    loads = LinkLoad()
    if mode == CONGESTION:
        background = _spawn_background(ctx, t0, cfg, rng)

    experiences = []
    pending = None   # last decision Experience awaiting its next_state
    waits = 0
    outcome_label = None
    t = t0

    while True:
        if not ctx.has_frame(t):
            outcome_label = DROPPED_DEST_LOST
            break
        frame_now = ctx.frame(t)
        by_id = frame_now.by_id()
        if packet.destination not in by_id:
            outcome_label = DROPPED_DEST_LOST
            break
        if packet.holder not in by_id:
            outcome_label = DROPPED_HOLDER_LOST
            break

        loads.reset()
        if mode == CONGESTION:
            _step_background(ctx, background, frame_now, t, policy, loads, cfg, rng)

        if partial:
            base = bases.get(packet.holder)
            if base is None:
                base = obstore.KnowledgeBase(owner=packet.holder)
            base = _refresh_direct(base, frame_now, t, ctx.comm_range, ctx.network)
            bases[packet.holder] = base
            if packet.destination not in base.entries:
                outcome_label = HopOutcome.DROPPED_UNREACHABLE.value
                break
            graph = obstore.estimated_graph(base, ctx.predictor, ctx.network,
                                            ctx.comm_range, t, dest_id=packet.destination,
                                            k_max=ctx.k_max, cache=cache)
            _override_holder_edges(graph, packet.holder, by_id, ctx.comm_range)
            if not obstore.reachability_check(graph, packet.holder, packet.destination):
                outcome_label = HopOutcome.DROPPED_UNREACHABLE.value
                break
            dest_adjacent = _true_adjacent(by_id, packet.holder, packet.destination,
                                           ctx.comm_range)
        else:
            t_view = ctx.view_time(t)
            view = ctx.frame(t_view) if ctx.has_frame(t_view) else frame_now
            view_ids = view.by_id()
            if packet.holder not in view_ids or packet.destination not in view_ids:
                view, view_ids = frame_now, by_id
            graph = graph_from_frame(view, ctx.comm_range, packet.destination,
                                     packet.holder, ctx.network.diagonal(),
                                     k_max=ctx.k_max)
            dest_adjacent = bool(
                graph.adjacency[graph.index_of(packet.holder),
                                graph.index_of(packet.destination)])

        action_set = None
        if not dest_adjacent:
            action_set = ctx.action_set(graph, packet.holder, int(rng.integers(2**31)))
        world = StepWorld(graph=graph, action_set=action_set, dest_adjacent=dest_adjacent)
        outcome, state, slot = step_packet(packet, world, policy, loads, mode, rng)

        if outcome in (HopOutcome.CONGESTION_WAIT,):
            waits += 1
        if collect:
            pending = _record(experiences, pending, state, slot, outcome, cfg)

        if outcome == HopOutcome.DELIVERED:
            outcome_label = HopOutcome.DELIVERED.value
            break
        if outcome == HopOutcome.DROPPED_TTL:
            outcome_label = HopOutcome.DROPPED_TTL.value
            break
        t += 1

    if collect and pending is not None and not pending.done:
        # Exogenous terminations (holder/destination lost, unreachable).
        pending.done = True
        pending.next_state = None

    delivered = outcome_label == HopOutcome.DELIVERED.value
    spr = packet.hops_used / shortest if delivered else None
    pspr = spr if delivered else cfg.ttl / shortest
    result = EpisodeResult(delivered=delivered, hops_used=packet.hops_used,
                           shortest_at_send=shortest, spr=spr, pspr=pspr,
                           outcome=outcome_label, src=src, dst=dst, created_t=t0,
                           waits=waits, warmup_rounds=warmup)
    return result, experiences


def _record(experiences, pending, state, slot, outcome, cfg: EpisodeConfig):
    """Chain experiences; fold the forced delivery step into its predecessor."""
    if state is None:
        if outcome == HopOutcome.DELIVERED and pending is not None and not pending.done:
            # The relay that reached this holder leads to a forced delivery:
            # exact one-step Bellman fold of the action-less transition.
            pending.reward += cfg.gamma * compute_reward(HopOutcome.DELIVERED, cfg.rewards)
            pending.done = True
            pending.next_state = None
        return pending
    exp = Experience(state=state, action_index=slot,
                     reward=compute_reward(outcome, cfg.rewards),
                     next_state=None,
                     done=outcome in (HopOutcome.DELIVERED, HopOutcome.DROPPED_TTL))
    if pending is not None and not pending.done:
        pending.next_state = state
    experiences.append(exp)
    return exp


def _override_holder_edges(graph, holder, by_id, comm_range):
    """Direct observation overrides prediction for the holder's own links."""
    h = graph.index_of(holder)
    for j, vid in enumerate(graph.node_ids):
        if vid == holder:
            continue
        truly = vid in by_id and _true_adjacent(by_id, holder, vid, comm_range)
        graph.adjacency[h, j] = truly
        graph.adjacency[j, h] = truly


def build_bases(ctx: EpisodeContext, t0: int, observation: Observation,
                knowledge_ttl: int):
    """Warm-up knowledge exchange over the seconds leading up to t0."""
    bases = {}
    start = t0 - observation.warmup_rounds + 1
    for s in range(start, t0 + 1):
        if not ctx.has_frame(s):
            continue
        bases = obstore.broadcast_round(ctx.frame(s), bases, ctx.comm_range,
                                        observation.f, s, ctx.network,
                                        knowledge_ttl=knowledge_ttl)
    return bases


def _spawn_background(ctx, t0, cfg: EpisodeConfig, rng):
    packets = []
    frame = ctx.frame(t0)
    ids = [v.vehicle_id for v in frame.vehicles]
    for i in range(cfg.background_packets):
        if len(ids) < 2:
            break
        src, dst = rng.choice(len(ids), size=2, replace=False)
        packets.append(Packet(packet_id=i + 1, source=ids[src], destination=ids[dst],
                              holder=ids[src], ttl=cfg.ttl,
                              size=float(rng.uniform(0.0, 1.0)) or 0.5,
                              created_t=t0))
    return packets


def _step_background(ctx, background, frame_now, t, policy, loads, cfg, rng):
    by_id = frame_now.by_id()
    ids = sorted(by_id)
    for pkt in background:
        if pkt.holder not in by_id or pkt.destination not in by_id:
            _respawn(pkt, ids, cfg, rng)
            continue
        graph = graph_from_frame(frame_now, ctx.comm_range, pkt.destination,
                                 pkt.holder, ctx.network.diagonal(), k_max=ctx.k_max)
        dest_adjacent = bool(graph.adjacency[graph.index_of(pkt.holder),
                                             graph.index_of(pkt.destination)])
        action_set = None
        if not dest_adjacent:
            action_set = ctx.action_set(graph, pkt.holder, int(rng.integers(2**31)))
        world = StepWorld(graph=graph, action_set=action_set, dest_adjacent=dest_adjacent)
        outcome, _, _ = step_packet(pkt, world, policy, loads, CONGESTION, rng)
        if outcome in (HopOutcome.DELIVERED, HopOutcome.DROPPED_TTL):
            _respawn(pkt, ids, cfg, rng)


def _respawn(pkt: Packet, ids, cfg, rng):
    if len(ids) < 2:
        return
    src, dst = rng.choice(len(ids), size=2, replace=False)
    pkt.source = pkt.holder = ids[src]
    pkt.destination = ids[dst]
    pkt.hops_used = 0
    pkt.size = float(rng.uniform(0.0, 1.0)) or 0.5


# ---------------------------------------------------------------------------
# episode sampling and evaluation
# ---------------------------------------------------------------------------

def sample_episode_pair(ctx: EpisodeContext, ttl: int, rng,
                        min_dest_lifetime: int = 25, min_t0: int = 12,
                        tries: int = 40):
    """Pick (src, dst, t0): both alive, finite shortest path, durable dest."""
    times = [f.time_step for f in ctx.frames]
    lo = times[0] + min_t0
    hi = times[-1] - ttl - 2
    if hi <= lo:
        return None
    for _ in range(tries):
        t0 = int(rng.integers(lo, hi + 1))
        frame = ctx.frame(t0)
        if len(frame.vehicles) < 2:
            continue
        ids = [v.vehicle_id for v in frame.vehicles]
        i, j = rng.choice(len(ids), size=2, replace=False)
        src, dst = ids[i], ids[j]
        horizon = min(t0 + min_dest_lifetime, times[-1])
        if dst not in ctx.frame(horizon).by_id():
            continue
        g = graph_from_frame(frame, ctx.comm_range, dst, src,
                             ctx.network.diagonal(), k_max=ctx.k_max)
        if bfs_hops(g, src).dist[dst] is UNREACHABLE:
            continue
        return src, dst, t0
    return None


def evaluate(contexts, policy, n_episodes: int, observation: Observation,
             mode: str, seed: int, cfg: EpisodeConfig,
             min_dest_lifetime: int = 25, pairs=None):
    """Run seeded episodes and aggregate SPR / PSPR / RR.

    `contexts` is one EpisodeContext or a list (sampled round-robin). Pair
    sampling uses its own generator, so two policies evaluated with the same
    seed route identical (src, dst, t0) episodes. Episodes may run in
    parallel under TRAJAWARE_THREADS; results are order-independent.
    """
    if n_episodes < 1:
        raise ParameterError("n_episodes must be >= 1")
    if not isinstance(contexts, (list, tuple)):
        contexts = [contexts]

    if pairs is None:
        pairs = sample_pairs(contexts, n_episodes, seed, cfg,
                             min_dest_lifetime=min_dest_lifetime,
                             warmup=observation.warmup_rounds if observation.kind == "partial" else 0)
    if not pairs:
        raise EvaluationError("no valid episodes could be sampled")

    base_cache = {}
    rollout_caches = {}
    if observation.kind == "partial":
        for ci in {p[0] for p in pairs}:
            rollout_caches[ci] = obstore.RolloutCache(contexts[ci].network,
                                                      contexts[ci].predictor)

    def bases_for(ci):
        def fetch(t0):
            key = (ci, t0)
            if key not in base_cache:
                base_cache[key] = build_bases(contexts[ci], t0, observation,
                                              cfg.knowledge_ttl)
            return base_cache[key]
        return fetch

    def run_one(item):
        idx, (ci, src, dst, t0, ep_seed) = item
        ctx = contexts[ci]
        result, _ = run_episode(
            ctx, src, dst, t0, policy, observation, mode, cfg,
            rng=np.random.default_rng(ep_seed),
            bases_at=bases_for(ci) if observation.kind == "partial" else None,
            rollout_cache=rollout_caches.get(ci))
        return idx, result

    threads = max(int(os.environ.get("TRAJAWARE_THREADS", "1")), 1)
    items = list(enumerate(pairs))
    results = [None] * len(items)
    if threads > 1 and observation.kind != "partial":
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, result in pool.map(run_one, items):
                results[idx] = result
    else:
        for item in items:
            idx, result = run_one(item)
            results[idx] = result

    return summarise(results), results


def sample_pairs(contexts, n_episodes, seed, cfg: EpisodeConfig,
                 min_dest_lifetime: int = 25, warmup: int = 0):
    """Deterministic episode specs: (ctx_index, src, dst, t0, episode_seed)."""
    pair_rng = np.random.default_rng(seed)
    pairs = []
    attempts = 0
    while len(pairs) < n_episodes and attempts < n_episodes * 50:
        attempts += 1
        ci = len(pairs) % len(contexts)
        got = sample_episode_pair(contexts[ci], cfg.ttl, pair_rng,
                                  min_dest_lifetime=min_dest_lifetime,
                                  min_t0=max(12, warmup + 6))
        if got is None:
            continue
        src, dst, t0 = got
        pairs.append((ci, src, dst, t0, int(pair_rng.integers(2**31))))
    return pairs


def summarise(results) -> MetricsSummary:
    delivered = [r for r in results if r.delivered]
    sprs = [r.spr for r in delivered]
    psprs = [r.pspr for r in results]
    return MetricsSummary(
        avg_spr=float(np.mean(sprs)) if sprs else float("nan"),
        avg_pspr=float(np.mean(psprs)),
        rr=len(delivered) / len(results),
        episodes=len(results),
    )
