"""Trajectory prediction: 6-dim route encoding, GRU recurrence, link projection.

The GRU consumes a short history of (position, next two segment nodes)
vectors, all normalised by the map bounds, and predicts a per-second
displacement. Every predicted point is projected back onto the road network,
and the planned path advances as segment nodes are passed, so multi-step
rollouts stay on plausible routes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .errors import ParameterError, TrainingDivergence
from .roadworld import RoadNetwork, VehicleState, next_two_segment_nodes

HISTORY_WINDOW = 5     # observed steps fed to the GRU
DISP_UNIT = 15.0       # metres of displacement per unit of head output


def missing_steps(n_hop: int, f: int) -> int:
    """Recurrent prediction steps needed for information n_hop hops away
    under broadcasting f times per second: ceil(n_hop / f) - 1."""
    if n_hop < 1 or f < 1:
        raise ParameterError("n_hop and f must both be >= 1")
    return math.ceil(n_hop / f) - 1


@dataclass
class PredictorParams:
    gru: L.GruParams
    head: L.DenseParams     # hidden state -> 2 displacement components
    window: int = HISTORY_WINDOW
    disp_unit: float = DISP_UNIT

    @staticmethod
    def init(seed: int, hidden: int = 32, window: int = HISTORY_WINDOW,
             disp_unit: float = DISP_UNIT) -> "PredictorParams":
        rng = np.random.default_rng(seed)
        return PredictorParams(
            gru=L.GruParams.init(rng, 6, hidden),
            head=L.DenseParams.init(rng, hidden, 2),
            window=window,
            disp_unit=disp_unit,
        )

    def arch(self):
        return {"kind": "gru-predictor", "hidden": self.gru.hidden_size,
                "window": self.window, "disp_unit": self.disp_unit}


# ---------------------------------------------------------------------------
# input encoding
# ---------------------------------------------------------------------------

def encode_from_path(network: RoadNetwork, position, remaining_path) -> np.ndarray:
    """6-vector: current position and next two segment nodes, in map units."""
    w, h = network.bounds
    first = remaining_path[0]
    second = remaining_path[1] if len(remaining_path) >= 2 else first
    p1 = network.node(first).position
    p2 = network.node(second).position
    return np.array([position[0] / w, position[1] / h,
                     p1[0] / w, p1[1] / h,
                     p2[0] / w, p2[1] / h])


def encode_input(network: RoadNetwork, v: VehicleState) -> np.ndarray:
    n1, n2 = next_two_segment_nodes(network, v)
    w, h = network.bounds
    return np.array([v.position[0] / w, v.position[1] / h,
                     n1.position[0] / w, n1.position[1] / h,
                     n2.position[0] / w, n2.position[1] / h])


# ---------------------------------------------------------------------------
# link projection
# ---------------------------------------------------------------------------

def project_to_road(point, network: RoadNetwork):
    """Closest point on any road segment; ties pick the lowest segment index."""
    pos, _ = project_with_segment(point, network)
    return pos


def project_with_segment(point, network: RoadNetwork):
    if not network.segments:
        raise ParameterError("network has no segments to project onto")
    seg_a, seg_b = network.segment_arrays()
    p = np.asarray(point, dtype=np.float64)
    d = seg_b - seg_a
    len2 = (d * d).sum(axis=1)
    t = ((p - seg_a) * d).sum(axis=1) / len2
    t = np.clip(t, 0.0, 1.0)
    feet = seg_a + t[:, None] * d
    dist2 = ((p - feet) ** 2).sum(axis=1)
    best = int(dist2.argmin())
    return (float(feet[best][0]), float(feet[best][1])), best


def _advance_path(network: RoadNetwork, point, path):
    """Drop path nodes the point has passed, judged by its projected segment."""
    if len(path) < 2:
        return list(path)
    _, seg_idx = project_with_segment(point, network)
    a, b = network.segments[seg_idx]
    for k in range(len(path) - 1):
        if (path[k], path[k + 1]) in ((a, b), (b, a)):
            return list(path[k + 1:]) if k + 1 < len(path) else [path[-1]]
    return list(path)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

class RolloutState:
    """Incremental rollout: hidden state, current position, remaining path.

    `advance` performs exactly one prediction step, so stale entries can be
    brought forward one second at a time without recomputing the history.
    """

    __slots__ = ("hidden", "position", "path")

    def __init__(self, network: RoadNetwork, history, remaining_path,
                 params: PredictorParams):
        if not history:
            raise ParameterError("history must contain at least one input")
        with ad.no_grad():
            h = Tensor(np.zeros((1, params.gru.hidden_size)))
            for vec in history:
                h = L.gru_step(Tensor(np.asarray(vec).reshape(1, 6)), h, params.gru)
        self.hidden = h.data
        w, hh = network.bounds
        last = np.asarray(history[-1])
        self.position = (float(last[0] * w), float(last[1] * hh))
        self.path = list(remaining_path)

    def advance(self, network: RoadNetwork, params: PredictorParams):
        with ad.no_grad():
            disp = L.dense(Tensor(self.hidden), params.head.w, params.head.b)
        raw = (self.position[0] + float(disp.data[0, 0]) * params.disp_unit,
               self.position[1] + float(disp.data[0, 1]) * params.disp_unit)
        self.position = project_to_road(raw, network)
        self.path = _advance_path(network, self.position, self.path)
        vec = encode_from_path(network, self.position, self.path)
        with ad.no_grad():
            h = L.gru_step(Tensor(vec.reshape(1, 6)), Tensor(self.hidden), params.gru)
        self.hidden = h.data
        return self.position


def rollout(history, params: PredictorParams, steps: int, network: RoadNetwork,
            remaining_path) -> tuple:
    """Predict `steps` seconds ahead of the last observed input.

    `history` is a chronological list of 6-vectors; `remaining_path` is the
    planned path as of the last observation. steps=0 returns the last
    observed position unchanged.
    """
    if steps < 0:
        raise ParameterError("steps must be >= 0")
    state = RolloutState(network, history, remaining_path, params)
    if steps == 0:
        return state.position
    for _ in range(steps):
        pos = state.advance(network, params)
    return pos


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------

def build_samples(frames, network: RoadNetwork, window: int = HISTORY_WINDOW):
    """(history array (w, 6), last position, target position) per vehicle-step."""
    series = {}
    for frame in frames:
        for v in frame.vehicles:
            series.setdefault(v.vehicle_id, []).append((frame.time_step, v))
    samples = []
    for vid in sorted(series):
        entries = series[vid]
        encs = [encode_from_path(network, v.position, v.planned_path) for _, v in entries]
        for i in range(window - 1, len(entries) - 1):
            if entries[i][0] - entries[i - window + 1][0] != window - 1:
                continue  # non-consecutive frames
            if entries[i + 1][0] != entries[i][0] + 1:
                continue
            hist = np.stack(encs[i - window + 1:i + 1])
            samples.append((hist, np.asarray(entries[i][1].position),
                            np.asarray(entries[i + 1][1].position)))
    return samples


def train_predictor(traces_by_map: list, networks: list, seed: int = 0,
                    hidden: int = 32, window: int = HISTORY_WINDOW,
                    epochs: int = 10, batch_size: int = 64, lr: float = 3e-3,
                    max_samples_per_map: int = 8000, log=None) -> PredictorParams:
    """Train the displacement GRU on (history -> next position) pairs.

    Loss is the mean squared Euclidean error, in metres, after projecting the
    predicted point onto the road network. Returns the trained parameters.
    """
    from .dqntrain import Adam  # local import; optimiser lives with training code

    params = PredictorParams.init(seed, hidden=hidden, window=window)
    if epochs == 0:
        return params
    rng = np.random.default_rng(seed)

    per_map = []
    for frames, network in zip(traces_by_map, networks):
        samples = build_samples(frames, network, window=window)
        if len(samples) > max_samples_per_map:
            pick = rng.choice(len(samples), size=max_samples_per_map, replace=False)
            samples = [samples[i] for i in sorted(pick)]
        per_map.append(samples)

    named = L.collect_named(params)
    opt = Adam(named, lr=lr)
    history_log = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for mi, samples in enumerate(per_map):
            network = networks[mi]
            seg_a, seg_b = network.segment_arrays()
            order = rng.permutation(len(samples))
            for start in range(0, len(samples), batch_size):
                batch = [samples[i] for i in order[start:start + batch_size]]
                loss = _batch_loss(batch, params, seg_a, seg_b)
                value = float(loss.data)
                if not math.isfinite(value) or value > 1e9:
                    raise TrainingDivergence(f"predictor loss diverged: {value}")
                for t in named.values():
                    t.zero_grad()
                loss.backward()
                opt.step()
                total += value * len(batch)
                count += len(batch)
        mean = total / max(count, 1)
        history_log.append(mean)
        if log is not None:
            log.append({"epoch": epoch, "loss": mean})
    return params


def _batch_loss(batch, params: PredictorParams, seg_a, seg_b):
    hist = np.stack([b[0] for b in batch])          # (B, w, 6)
    last_pos = np.stack([b[1] for b in batch])      # (B, 2)
    target = np.stack([b[2] for b in batch])        # (B, 2)
    h = Tensor(np.zeros((len(batch), params.gru.hidden_size)))
    for t in range(hist.shape[1]):
        h = L.gru_step(Tensor(hist[:, t, :]), h, params.gru)
    disp = L.dense(h, params.head.w, params.head.b)
    raw = ad.add(ad.scale(disp, params.disp_unit), Tensor(last_pos))
    proj = ad.project_to_segments(raw, seg_a, seg_b)
    diff = ad.add(proj, Tensor(-target))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / len(batch))


def evaluate_by_missing_steps(frames, network: RoadNetwork, params: PredictorParams,
                              max_steps: int = 5, samples_per_bucket: int = 1000,
                              seed: int = 0):
    """Mean rollout error (metres) per missing-steps bucket on one trace.

    Returns {bucket: (count, mean_error_m)} for buckets 1..max_steps.
    """
    window = params.window
    series = {}
    for frame in frames:
        for v in frame.vehicles:
            series.setdefault(v.vehicle_id, []).append((frame.time_step, v))
    candidates = []
    for vid in sorted(series):
        entries = series[vid]
        for i in range(window - 1, len(entries) - max_steps - 1):
            if entries[i + max_steps][0] - entries[i - window + 1][0] != window - 1 + max_steps:
                continue
            candidates.append((vid, i))
    rng = np.random.default_rng(seed)
    if len(candidates) > samples_per_bucket:
        pick = rng.choice(len(candidates), size=samples_per_bucket, replace=False)
        candidates = [candidates[i] for i in sorted(pick)]

    sums = {k: 0.0 for k in range(1, max_steps + 1)}
    counts = {k: 0 for k in range(1, max_steps + 1)}
    for vid, i in candidates:
        entries = series[vid]
        hist = [encode_from_path(network, v.position, v.planned_path)
                for _, v in entries[i - window + 1:i + 1]]
        state = RolloutState(network, hist, entries[i][1].planned_path, params)
        for k in range(1, max_steps + 1):
            pred = state.advance(network, params)
            truth = entries[i + k][1].position
            sums[k] += math.hypot(pred[0] - truth[0], pred[1] - truth[1])
            counts[k] += 1
    return {k: (counts[k], sums[k] / counts[k] if counts[k] else math.nan)
            for k in sums}
