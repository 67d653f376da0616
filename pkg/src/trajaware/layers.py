"""Network layers: dense, GraphSAGE, cross-attention, GRU, and checkpoint IO.

All layers are plain functions over `Tensor` values plus small parameter
dataclasses, so the same code path serves training and inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError

CHECKPOINT_FORMAT = "trajaware-params"
CHECKPOINT_VERSION = 1


@dataclass
class DenseParams:
    w: Tensor
    b: Tensor

    @staticmethod
    def init(rng, d_in, d_out):
        return DenseParams(
            w=Tensor(ad.glorot_uniform(rng, d_in, d_out), requires_grad=True),
            b=Tensor(np.zeros(d_out), requires_grad=True),
        )


@dataclass
class SageLayerParams:
    w_self: Tensor
    w_neigh: Tensor
    b: Tensor

    @staticmethod
    def init(rng, d_in, d_out):
        return SageLayerParams(
            w_self=Tensor(ad.glorot_uniform(rng, d_in, d_out), requires_grad=True),
            w_neigh=Tensor(ad.glorot_uniform(rng, d_in, d_out), requires_grad=True),
            b=Tensor(np.zeros(d_out), requires_grad=True),
        )


@dataclass
class GraphSageParams:
    """Stack of SAGE layers; adjacent dimensions must compose."""

    layers: list = field(default_factory=list)

    @staticmethod
    def init(rng, dims):
        # dims = [d_in, h1, h2, ...]
        layers = [SageLayerParams.init(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        return GraphSageParams(layers=layers)


@dataclass
class CrossAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    d_h: int

    @staticmethod
    def init(rng, d_in, d_h):
        return CrossAttentionParams(
            w_q=Tensor(ad.glorot_uniform(rng, d_in, d_h), requires_grad=True),
            w_k=Tensor(ad.glorot_uniform(rng, d_in, d_h), requires_grad=True),
            w_v=Tensor(ad.glorot_uniform(rng, d_in, d_h), requires_grad=True),
            d_h=d_h,
        )


@dataclass
class GruParams:
    """Update (z), reset (r) and candidate (n) gate weights for one GRU cell."""

    w_xz: Tensor
    w_hz: Tensor
    b_z: Tensor
    w_xr: Tensor
    w_hr: Tensor
    b_r: Tensor
    w_xn: Tensor
    w_hn: Tensor
    b_n: Tensor
    hidden_size: int

    @staticmethod
    def init(rng, d_in, hidden):
        def mat(a, b):
            return Tensor(ad.glorot_uniform(rng, a, b), requires_grad=True)

        def vec(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return GruParams(
            w_xz=mat(d_in, hidden), w_hz=mat(hidden, hidden), b_z=vec(hidden),
            w_xr=mat(d_in, hidden), w_hr=mat(hidden, hidden), b_r=vec(hidden),
            w_xn=mat(d_in, hidden), w_hn=mat(hidden, hidden), b_n=vec(hidden),
            hidden_size=hidden,
        )


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x (n, d_in), w (d_in, d_out), b (d_out,)."""
    return ad.add(ad.matmul(x, w), b)


def graphsage_layer(features: Tensor, adjacency: np.ndarray, params: SageLayerParams,
                    activation=ad.relu) -> Tensor:
    """One mean-aggregator SAGE layer with separate self/neighbour weights.

    Isolated nodes aggregate a zero neighbour mean, so the layer is total.
    """
    agg = ad.neighbour_mean(features, adjacency)
    pre = ad.add(ad.add(ad.matmul(features, params.w_self),
                        ad.matmul(agg, params.w_neigh)), params.b)
    return activation(pre) if activation is not None else pre


def graphsage_forward(features: Tensor, adjacency: np.ndarray, params: GraphSageParams,
                      concat_layers: bool = False) -> Tensor:
    """Run the full SAGE stack; optionally concatenate every layer's output."""
    outs = []
    h = features
    for layer in params.layers:
        h = graphsage_layer(h, adjacency, layer)
        outs.append(h)
    if concat_layers and len(outs) > 1:
        cols = [ad.transpose(o) for o in outs]
        return ad.transpose(ad.concat_rows(cols))
    return h


def cross_attention(s: Tensor, s_ctx: Tensor, params: CrossAttentionParams) -> Tensor:
    """Scaled dot-product attention with queries from `s`, keys/values from `s_ctx`.

    Row-permutation equivariant in `s` and permutation invariant in `s_ctx`
    (up to float summation order).
    """
    if s.data.shape[1] != s_ctx.data.shape[1]:
        raise ShapeError("query and context feature dimensions differ")
    q = ad.matmul(s, params.w_q)
    k = ad.matmul(s_ctx, params.w_k)
    v = ad.matmul(s_ctx, params.w_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(params.d_h))
    attn = ad.softmax_rows(scores)
    return ad.matmul(attn, v)


def gru_step(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One GRU update: returns the new hidden state (row vectors)."""
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.w_xz), ad.matmul(h, params.w_hz)), params.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.w_xr), ad.matmul(h, params.w_hr)), params.b_r))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, params.w_xn),
                              ad.mul(r, ad.matmul(h, params.w_hn))), params.b_n))
    one_minus_z = 1.0 - z
    return ad.add(ad.mul(z, h), ad.mul(one_minus_z, n))


# ---------------------------------------------------------------------------
# named-tensor checkpoint container
# ---------------------------------------------------------------------------

def collect_named(obj, prefix=""):
    """Flatten nested parameter dataclasses/lists into {name: Tensor}."""
    named = {}
    if isinstance(obj, Tensor):
        named[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            named.update(collect_named(item, f"{prefix}.{i}" if prefix else str(i)))
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            value = getattr(obj, name)
            if isinstance(value, (Tensor, list, tuple)) or hasattr(value, "__dataclass_fields__"):
                key = f"{prefix}.{name}" if prefix else name
                named.update(collect_named(value, key))
    return named


def save_checkpoint(path, params_obj, arch: dict):
    named = collect_named(params_obj)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": arch,
        "tensors": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in sorted(named.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path, params_obj, expected_arch: dict | None = None):
    """Load named tensors into an existing parameter object, validating shapes."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"not a parameter checkpoint: {path}")
    if expected_arch is not None:
        for key, want in expected_arch.items():
            got = payload.get("arch", {}).get(key)
            if got != want:
                raise ValidationError(
                    f"checkpoint architecture mismatch for '{key}': checkpoint has {got!r}, "
                    f"config expects {want!r}")
    named = collect_named(params_obj)
    tensors = payload["tensors"]
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise ValidationError(f"checkpoint missing tensors: {missing}")
    for name, t in named.items():
        entry = tensors[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise ValidationError(
                f"checkpoint tensor '{name}' has shape {shape}, expected {t.data.shape}")
        t.data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return payload.get("arch", {})
