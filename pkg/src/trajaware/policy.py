"""The routing Q-network and next-hop selection policies.

The full network runs GraphSAGE over the pruned local graph, extracts the
retained neighbours' embedding rows, cross-attends them against every node,
and maps the flattened result to one Q-value per action slot. The
no-attention variant instead flattens all node embeddings (padded to a fixed
node budget) through an MLP, which is the long-tail-prone baseline shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .commgraph import CommGraph, bfs_hops, UNREACHABLE
from .errors import NoActionError, ShapeError
from .pruning import PrunedActionSet


@dataclass
class QNetArch:
    feature_dim: int = 7
    sage_hidden: tuple = (32, 32)
    d_h: int = 32
    k_max: int = 8
    use_attention: bool = True
    concat_layers: bool = False
    max_nodes: int = 80     # node budget for the no-attention flatten
    mlp_hidden: int = 128   # hidden width of the no-attention head

    def sage_dims(self):
        return [self.feature_dim, *self.sage_hidden]

    def embed_dim(self):
        return sum(self.sage_hidden) if self.concat_layers else self.sage_hidden[-1]

    def to_dict(self):
        d = self.__dict__.copy()
        d["sage_hidden"] = list(self.sage_hidden)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["sage_hidden"] = tuple(d["sage_hidden"])
        return QNetArch(**d)


@dataclass
class QNetParams:
    sage: L.GraphSageParams
    attention: object = None     # CrossAttentionParams when use_attention
    head_hidden: object = None   # DenseParams for the no-attention MLP
    head: object = None          # DenseParams to k_max Q-values


@dataclass
class PolicyState:
    graph: CommGraph
    holder: int
    destination: int
    pruned: PrunedActionSet


@dataclass
class QOutput:
    q_values: np.ndarray   # (k_max,)
    valid_mask: np.ndarray  # (k_max,) bool, true for real actions
    action_ids: list        # vehicle ids per slot, -1 for padding


class QNet:
    """Parameter bundle plus forward passes for one architecture."""

    def __init__(self, arch: QNetArch, params: QNetParams):
        self.arch = arch
        self.params = params

    @staticmethod
    def init(arch: QNetArch, seed: int) -> "QNet":
        rng = np.random.default_rng(seed)
        sage = L.GraphSageParams.init(rng, arch.sage_dims())
        d = arch.embed_dim()
        if arch.use_attention:
            attention = L.CrossAttentionParams.init(rng, d, arch.d_h)
            head = L.DenseParams.init(rng, arch.k_max * arch.d_h, arch.k_max)
            params = QNetParams(sage=sage, attention=attention, head=head)
        else:
            head_hidden = L.DenseParams.init(rng, arch.max_nodes * d, arch.mlp_hidden)
            head = L.DenseParams.init(rng, arch.mlp_hidden, arch.k_max)
            params = QNetParams(sage=sage, head_hidden=head_hidden, head=head)
        return QNet(arch, params)

    def named_parameters(self) -> dict:
        return L.collect_named(self.params)

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()

    def copy_from(self, other: "QNet"):
        mine, theirs = self.named_parameters(), other.named_parameters()
        for name, t in mine.items():
            t.data = theirs[name].data.copy()

    def clone(self) -> "QNet":
        twin = QNet.init(self.arch, seed=0)
        twin.copy_from(self)
        return twin

    # -- forward -------------------------------------------------------------

    def forward_tensor(self, state: PolicyState):
        """Q-values as a (1, k_max) tensor on the gradient graph.

        Returns (q, valid_mask, action_ids).
        """
        g = state.graph
        retained = state.pruned.retained
        k = len(retained)
        if k < 1:
            raise NoActionError(f"holder {state.holder} has no retained neighbours")
        if k > self.arch.k_max:
            raise ShapeError(f"{k} retained actions exceed head size {self.arch.k_max}")

        h_idx = g.index_of(state.holder)
        retained_idx = [g.index_of(v) for v in retained]
        adjacency = g.adjacency.copy()
        keep = np.zeros(len(g.node_ids), dtype=bool)
        keep[retained_idx] = True
        pruned_away = g.adjacency[h_idx] & ~keep
        adjacency[h_idx, pruned_away] = False
        adjacency[pruned_away, h_idx] = False

        feats = Tensor(g.features)
        embed = L.graphsage_forward(feats, adjacency, self.params.sage,
                                    concat_layers=self.arch.concat_layers)
        d = self.arch.embed_dim()

        if self.arch.use_attention:
            s = ad.gather_rows(embed, retained_idx)
            out = L.cross_attention(s, embed, self.params.attention)
            if k < self.arch.k_max:
                pad = Tensor(np.zeros((self.arch.k_max - k, self.arch.d_h)))
                out = ad.concat_rows([out, pad])
            flat = ad.reshape(out, (1, self.arch.k_max * self.arch.d_h))
            q = L.dense(flat, self.params.head.w, self.params.head.b)
        else:
            n = len(g.node_ids)
            m = self.arch.max_nodes
            if n >= m:
                trimmed = ad.gather_rows(embed, list(range(m)))
            else:
                pad = Tensor(np.zeros((m - n, d)))
                trimmed = ad.concat_rows([embed, pad])
            flat = ad.reshape(trimmed, (1, m * d))
            hidden = ad.relu(L.dense(flat, self.params.head_hidden.w, self.params.head_hidden.b))
            q = L.dense(hidden, self.params.head.w, self.params.head.b)

        mask = np.zeros(self.arch.k_max, dtype=bool)
        mask[:k] = True
        action_ids = list(retained) + [-1] * (self.arch.k_max - k)
        return q, mask, action_ids

    def q_output(self, state: PolicyState) -> QOutput:
        with ad.no_grad():
            q, mask, ids = self.forward_tensor(state)
        return QOutput(q_values=q.data.ravel().copy(), valid_mask=mask, action_ids=ids)


def q_forward(state: PolicyState, qnet: QNet) -> QOutput:
    """Inference-mode Q-values for one routing decision."""
    return qnet.q_output(state)


def select_action(q: QOutput, epsilon: float, rng) -> int:
    """Epsilon-greedy over valid slots; greedy ties go to the lowest index.

    `rng` is an integer seed or a numpy Generator.
    """
    valid = np.nonzero(q.valid_mask)[0]
    if len(valid) == 0:
        raise NoActionError("no valid actions to select from")
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    if epsilon > 0.0 and gen.random() < epsilon:
        slot = int(valid[gen.integers(len(valid))])
    else:
        masked = np.where(q.valid_mask, q.q_values, -np.inf)
        slot = int(np.argmax(masked))
    return q.action_ids[slot]


# ---------------------------------------------------------------------------
# decision policies used by the episode simulator
# ---------------------------------------------------------------------------

class QPolicy:
    """Greedy (or epsilon-greedy) next-hop selection from a QNet."""

    def __init__(self, qnet: QNet, epsilon: float = 0.0, rng=None):
        self.qnet = qnet
        self.epsilon = epsilon
        self.rng = np.random.default_rng(0) if rng is None else rng

    def decide(self, state: PolicyState) -> int:
        return select_action(self.qnet.q_output(state), self.epsilon, self.rng)


class BfsOraclePolicy:
    """Pick the retained neighbour with the smallest hop distance to the
    destination on the current graph; ties go to the lowest vehicle id."""

    def decide(self, state: PolicyState) -> int:
        hops = bfs_hops(state.graph, state.destination)
        best_id, best_d = None, None
        for vid in state.pruned.retained:
            d = hops.dist[vid]
            key = np.inf if d is UNREACHABLE else d
            if best_d is None or key < best_d:
                best_d, best_id = key, vid
        return best_id


class RandomPolicy:
    def __init__(self, rng=None):
        self.rng = np.random.default_rng(0) if rng is None else rng

    def decide(self, state: PolicyState) -> int:
        retained = state.pruned.retained
        return retained[int(self.rng.integers(len(retained)))]
