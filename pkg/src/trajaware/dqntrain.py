"""DQN training: replay buffer, rewards, TD targets, Adam, and the run loop.

Rewards follow a hop-cost shape: every relay or wait costs 1, delivery pays
+10, drops pay -10, so with gamma near 1 maximising return approximates
minimising hop count, which is what the shortest-path-ratio metric measures.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ParameterError, TrainingDivergence
from .policy import QNet, QNetArch


class HopOutcome(Enum):
    RELAYED = "relayed"
    DELIVERED = "delivered"
    DROPPED_TTL = "dropped_ttl"
    DROPPED_UNREACHABLE = "dropped_unreachable"
    CONGESTION_WAIT = "congestion_wait"


@dataclass(frozen=True)
class RewardConfig:
    relayed: float = -1.0
    delivered: float = 10.0
    dropped_ttl: float = -10.0
    dropped_unreachable: float = -10.0
    congestion_wait: float = -1.0  # a wait consumes a hop


def compute_reward(outcome: HopOutcome, rewards: RewardConfig = RewardConfig()) -> float:
    return {
        HopOutcome.RELAYED: rewards.relayed,
        HopOutcome.DELIVERED: rewards.delivered,
        HopOutcome.DROPPED_TTL: rewards.dropped_ttl,
        HopOutcome.DROPPED_UNREACHABLE: rewards.dropped_unreachable,
        HopOutcome.CONGESTION_WAIT: rewards.congestion_wait,
    }[outcome]


@dataclass
class Experience:
    state: object           # PolicyState snapshot
    action_index: int       # slot in the Q output
    reward: float
    next_state: object      # PolicyState or None when terminal
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("capacity must be >= 1")
        self.capacity = capacity
        self._items = []
        self._pos = 0

    def append(self, exp: Experience):
        if len(self._items) < self.capacity:
            self._items.append(exp)
        else:
            self._items[self._pos] = exp
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


@dataclass
class TrainConfig:
    # core DQN knobs
    gamma: float = 0.95
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    target_sync_every: int = 500
    batch_size: int = 64
    buffer_capacity: int = 50_000
    k_max: int = 8
    rewards: RewardConfig = field(default_factory=RewardConfig)
    # episode / environment knobs
    episodes: int = 2000
    train_freq: int = 1            # gradient updates per collected experience
    learning_starts: int = 500     # buffer size before updates begin
    comm_range: float = 800.0
    ttl: int = 20
    use_pruning: bool = True
    use_attention: bool = True
    no_prune_cap: int = 16         # action head size when pruning is off
    graph_every: int = 5           # graph recomputation cadence while collecting
    traffic_duration: int = 400
    traffic_density: float | None = None   # None -> calibrate per map
    active_band: tuple = (40, 70)
    min_dest_lifetime: int = 25
    # network architecture
    sage_hidden: tuple = (32, 32)
    d_h: int = 32
    concat_layers: bool = False
    max_nodes: int = 80
    mlp_hidden: int = 128
    # safety / logging
    divergence_threshold: float = 1e6
    checkpoint_every: int = 500    # episodes between checkpoints

    def action_slots(self) -> int:
        return self.k_max if self.use_pruning else self.no_prune_cap

    def arch(self) -> QNetArch:
        return QNetArch(
            sage_hidden=tuple(self.sage_hidden),
            d_h=self.d_h,
            k_max=self.action_slots(),
            use_attention=self.use_attention,
            concat_layers=self.concat_layers,
            max_nodes=self.max_nodes,
            mlp_hidden=self.mlp_hidden,
        )

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError("gamma must lie in (0, 1)")
        for name in ("learning_rate", "eps_decay_steps", "target_sync_every",
                     "batch_size", "buffer_capacity", "k_max", "ttl"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")


def epsilon_at(cfg: TrainConfig, step: int) -> float:
    frac = min(max(step, 0) / cfg.eps_decay_steps, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


class Adam:
    """Per-parameter adaptive steps with standard defaults."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# TD learning
# ---------------------------------------------------------------------------

def td_target(batch, target_net: QNet, gamma: float) -> np.ndarray:
    """y_i = r_i, or r_i + gamma * max over valid actions of the target Q."""
    if not batch:
        raise ParameterError("batch must be non-empty")
    y = np.empty(len(batch))
    for i, exp in enumerate(batch):
        if exp.done or exp.next_state is None:
            y[i] = exp.reward
        else:
            q = target_net.q_output(exp.next_state)
            best = np.max(np.where(q.valid_mask, q.q_values, -np.inf))
            y[i] = exp.reward + gamma * best
    return y


def train_step(buffer: ReplayBuffer, qnet: QNet, target_net: QNet,
               cfg: TrainConfig, rng: np.random.Generator, opt: Adam | None = None):
    """One uniform batch, MSE on the taken actions, one Adam step.

    Returns the pre-step loss, or None when the buffer is not ready.
    """
    if len(buffer) < cfg.batch_size:
        return None
    from . import autodiff as ad
    from .autodiff import Tensor

    batch = buffer.sample(cfg.batch_size, rng)
    y = td_target(batch, target_net, cfg.gamma)
    if opt is None:
        opt = Adam(qnet.named_parameters(), lr=cfg.learning_rate)

    total = None
    for exp, target in zip(batch, y):
        q, _, _ = qnet.forward_tensor(exp.state)
        pick = np.zeros((1, qnet.arch.k_max))
        pick[0, exp.action_index] = 1.0
        qa = ad.sum_all(ad.mul(q, Tensor(pick)))
        diff = qa - float(target)
        sq = ad.mul(diff, diff)
        total = sq if total is None else ad.add(total, sq)
    loss = ad.scale(total, 1.0 / len(batch))

    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.data)


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

def run_training(maps: list, cfg: TrainConfig, seed: int, out_dir=None,
                 traces: list | None = None, progress=None):
    """Train the Q-network over episodes drawn round-robin from the maps.

    Returns (qnet, log_rows). `traces` may carry pre-generated traffic
    aligned with `maps`; otherwise traffic is generated (and calibrated)
    here, deterministically from `seed`.
    """
    from . import roadworld as rw
    from . import routesim

    cfg.validate()
    if len(maps) < 2:
        raise ParameterError("need at least 2 training maps")

    if traces is None:
        traces = []
        for i, network in enumerate(maps):
            density = cfg.traffic_density
            if density is None:
                density = rw.calibrate_density(network, seed + i, band=cfg.active_band)
            traces.append(rw.generate_traffic(network, seed + i, cfg.traffic_duration, density))

    rng = np.random.default_rng(seed)
    qnet = QNet.init(cfg.arch(), seed)
    target = qnet.clone()
    opt = Adam(qnet.named_parameters(), lr=cfg.learning_rate)
    buffer = ReplayBuffer(cfg.buffer_capacity)

    contexts = [routesim.EpisodeContext(network, frames, cfg.comm_range,
                                        graph_every=cfg.graph_every,
                                        k_max=cfg.k_max,
                                        use_pruning=cfg.use_pruning,
                                        no_prune_cap=cfg.no_prune_cap)
                for network, frames in zip(maps, traces)]

    env_steps = 0
    updates = 0
    log_rows = []
    recent_delivered = []
    last_checkpoint = None

    for episode in range(cfg.episodes):
        ctx = contexts[episode % len(contexts)]
        pair = routesim.sample_episode_pair(ctx, cfg.ttl, rng,
                                            min_dest_lifetime=cfg.min_dest_lifetime)
        if pair is None:
            continue
        src, dst, t0 = pair
        eps = epsilon_at(cfg, env_steps)
        policy = _ExplorationPolicy(qnet, cfg, env_steps, rng)
        result, experiences = routesim.run_episode(
            ctx, src, dst, t0, policy,
            observation=routesim.Observation.complete(),
            mode=routesim.NO_CONGESTION,
            cfg=routesim.EpisodeConfig(ttl=cfg.ttl, rewards=cfg.rewards,
                                       gamma=cfg.gamma),
            rng=rng, collect=True)

        losses = []
        for exp in experiences:
            buffer.append(exp)
            env_steps += 1
            policy.step = env_steps
            if len(buffer) >= max(cfg.learning_starts, cfg.batch_size):
                for _ in range(cfg.train_freq):
                    loss = train_step(buffer, qnet, target, cfg, rng, opt=opt)
                    if loss is None:
                        break
                    losses.append(loss)
                    updates += 1
                    if loss > cfg.divergence_threshold or not math.isfinite(loss):
                        raise TrainingDivergence(
                            f"loss {loss} exceeded {cfg.divergence_threshold} "
                            f"at update {updates}", checkpoint_path=last_checkpoint)
                    if updates % cfg.target_sync_every == 0:
                        target.copy_from(qnet)

        recent_delivered.append(1.0 if result.delivered else 0.0)
        if len(recent_delivered) > 100:
            recent_delivered.pop(0)
        log_rows.append({
            "episode": episode,
            "steps": env_steps,
            "epsilon": round(epsilon_at(cfg, env_steps), 6),
            "loss": round(float(np.mean(losses)), 6) if losses else "",
            "spr": round(result.spr, 6) if result.spr is not None else "",
            "pspr": round(result.pspr, 6),
            "rr": round(float(np.mean(recent_delivered)), 6),
        })
        if progress is not None:
            progress(episode, log_rows[-1])
        if out_dir is not None and cfg.checkpoint_every > 0 \
                and (episode + 1) % cfg.checkpoint_every == 0:
            last_checkpoint = Path(out_dir) / f"policy_ep{episode + 1}.json"
            save_policy_checkpoint(last_checkpoint, qnet)

    if out_dir is not None:
        final = Path(out_dir) / "policy.json"
        save_policy_checkpoint(final, qnet)
    return qnet, log_rows


class _ExplorationPolicy:
    """Epsilon-greedy over the online network, epsilon by global env step."""

    def __init__(self, qnet: QNet, cfg: TrainConfig, step: int, rng):
        self.qnet = qnet
        self.cfg = cfg
        self.step = step
        self.rng = rng

    def decide(self, state) -> int:
        from .policy import select_action
        q = self.qnet.q_output(state)
        return select_action(q, epsilon_at(self.cfg, self.step), self.rng)


def save_policy_checkpoint(path, qnet: QNet):
    L.save_checkpoint(path, qnet.params, {"kind": "q-policy", **qnet.arch.to_dict()})


def load_policy_checkpoint(path, arch: QNetArch) -> QNet:
    qnet = QNet.init(arch, seed=0)
    L.load_checkpoint(path, qnet.params, {"kind": "q-policy", **arch.to_dict()})
    return qnet


def write_training_log(path, log_rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["episode", "steps", "epsilon",
                                                "loss", "spr", "pspr", "rr"])
        writer.writeheader()
        for row in log_rows:
            writer.writerow(row)
