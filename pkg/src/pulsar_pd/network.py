"""Spatio-temporal graph convolution blocks and the per-stream classifier.

Parameters live in a flat ``name -> Tensor`` dict so they map one-to-one
onto checkpoint entries. A block aggregates vertex features through each
adjacency subset, mixes channels with a 1x1 map per subset, and then runs
BN -> ReLU -> dropout -> temporal conv -> BN -> (+ residual) -> ReLU.

Baseline blocks aggregate with ``A_k * M_k`` (a learnable mask over the fixed
adjacency). Adaptive blocks aggregate with ``A_k + B_k + C_k`` where ``B_k``
is a free matrix and ``C_k`` a per-sample vertex similarity.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor
from .graph import PartitionedAdjacency, build_hand_graph, partition_adjacency

MODES = ("baseline", "adaptive")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    frames: int = 80
    vertices: int = 21
    num_subsets: int = 3
    temporal_kernel: int = 9
    channels: tuple = (16, 32)
    dropout: float = 0.5
    adaptive: bool = True
    embed_channels: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        plan = (self.in_channels,) + self.channels
        if any(b <= a for a, b in zip(plan, plan[1:])):
            raise ValueError(f"channel plan must be strictly increasing, got {plan}")
        if self.temporal_kernel % 2 != 1 or self.temporal_kernel < 1:
            raise ValueError(f"temporal kernel must be odd, got {self.temporal_kernel}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def mode(self):
        return "adaptive" if self.adaptive else "baseline"

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetworkParams:
    """Learnable arrays plus the batch-norm running statistics."""

    params: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, seed=0) -> NetworkParams:
    """Deterministic initialization: scaled-uniform weights, zero biases,
    ``B_k = 0`` and ``M_k = 1``, unit BN scale."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    p: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    v, kv, kt, ce = config.vertices, config.num_subsets, config.temporal_kernel, config.embed_channels

    def param(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

    def norm(name, shape):
        param(f"{name}.gamma", np.ones(shape))
        param(f"{name}.beta", np.zeros(shape))
        bn[name] = BatchNormState(shape, dtype=dt)

    norm("input_bn", (config.in_channels, v))
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels, start=1):
        pre = f"block{i}"
        for k in range(kv):
            param(f"{pre}.gcn.W{k}", _uniform(rng, (c_out, c_in), c_in, dt))
            param(f"{pre}.gcn.b{k}", np.zeros(c_out))
            if config.adaptive:
                param(f"{pre}.gcn.B{k}", np.zeros((v, v)))
                param(f"{pre}.gcn.theta{k}.w", _uniform(rng, (ce, c_in), c_in, dt))
                param(f"{pre}.gcn.theta{k}.b", np.zeros(ce))
                param(f"{pre}.gcn.phi{k}.w", _uniform(rng, (ce, c_in), c_in, dt))
                param(f"{pre}.gcn.phi{k}.b", np.zeros(ce))
            else:
                param(f"{pre}.gcn.M{k}", np.ones((v, v)))
        norm(f"{pre}.gcn_bn", (c_out,))
        param(f"{pre}.tcn.w", _uniform(rng, (c_out, c_out, kt), c_out * kt, dt))
        param(f"{pre}.tcn.b", np.zeros(c_out))
        norm(f"{pre}.tcn_bn", (c_out,))
        if c_in != c_out:
            param(f"{pre}.res.w", _uniform(rng, (c_out, c_in), c_in, dt))
            param(f"{pre}.res.b", np.zeros(c_out))
        c_in = c_out
    param("fc.w", _uniform(rng, (1, c_in), c_in, dt))
    param("fc.b", np.zeros(1))
    return NetworkParams(p, bn)


def compute_Ck(f_in: Tensor, theta_w, theta_b, phi_w, phi_b) -> Tensor:
    """Data-dependent adjacency: softmax over vertices of embedded similarity.

    Returns an N x V x V tensor whose rows sum to one. The similarity is
    divided by the flattened embedding length to keep the softmax from
    saturating on long clips.
    """
    if f_in.ndim != 4:
        raise ShapeError(f"compute_Ck: expected N x C x T x V, got {f_in.shape}")
    n, _, t, v = f_in.shape
    ce = theta_w.shape[0]
    th = ad.conv1x1(f_in, theta_w, theta_b)
    ph = ad.conv1x1(f_in, phi_w, phi_b)
    th = ad.reshape(ad.transpose(th, (0, 3, 1, 2)), (n, v, ce * t))
    ph = ad.reshape(ph, (n, ce * t, v))
    sim = ad.scale(ad.matmul(th, ph), 1.0 / (ce * t))
    return ad.softmax(sim, axis=-1)


def _aggregate(x: Tensor, adj: Tensor) -> Tensor:
    """out[..., v] = sum_w adj[v, w] * x[..., w]; ``adj`` is V x V or N x V x V."""
    if adj.ndim == 2:
        return ad.matmul(x, ad.transpose(adj, (1, 0)))
    n, c, t, v = x.shape
    flat = ad.reshape(x, (n, c * t, v))
    return ad.reshape(ad.matmul(flat, ad.transpose(adj, (0, 2, 1))), (n, c, t, v))


def block_forward(f_in: Tensor, params: dict, prefix: str, bn: dict,
                  adjacency: PartitionedAdjacency, mode="adaptive", train=False,
                  dropout=0.5, rng=None) -> Tensor:
    if mode not in MODES:
        raise ValueError(f"unknown block mode {mode!r}; expected one of {MODES}")
    if f_in.ndim != 4 or f_in.shape[3] != adjacency.matrices.shape[1]:
        raise ShapeError(f"block_forward: input {f_in.shape} does not match "
                         f"{adjacency.matrices.shape[1]}-vertex adjacency")
    pre = prefix
    w0 = params[f"{pre}.gcn.W0"]
    if w0.shape[1] != f_in.shape[1]:
        raise ShapeError(f"block_forward: input has {f_in.shape[1]} channels, "
                         f"{pre} expects {w0.shape[1]}")
    dt = f_in.dtype
    y = None
    for k in range(adjacency.num_subsets):
        a_k = Tensor(adjacency.matrices[k].astype(dt))
        if mode == "baseline":
            adj = ad.mul(a_k, params[f"{pre}.gcn.M{k}"])
            agg = _aggregate(f_in, adj)
        else:
            c_k = compute_Ck(f_in, params[f"{pre}.gcn.theta{k}.w"], params[f"{pre}.gcn.theta{k}.b"],
                             params[f"{pre}.gcn.phi{k}.w"], params[f"{pre}.gcn.phi{k}.b"])
            static = ad.add(a_k, params[f"{pre}.gcn.B{k}"])
            agg = _aggregate(f_in, ad.add(static, c_k))
        y_k = ad.conv1x1(agg, params[f"{pre}.gcn.W{k}"], params[f"{pre}.gcn.b{k}"])
        y = y_k if y is None else ad.add(y, y_k)

    y = ad.batch_norm(y, params[f"{pre}.gcn_bn.gamma"], params[f"{pre}.gcn_bn.beta"],
                      bn[f"{pre}.gcn_bn"], feature_axes=(1,), train=train)
    y = ad.relu(y)
    y = ad.dropout(y, dropout, rng=rng, train=train)
    y = ad.temporal_conv(y, params[f"{pre}.tcn.w"], params[f"{pre}.tcn.b"])
    y = ad.batch_norm(y, params[f"{pre}.tcn_bn.gamma"], params[f"{pre}.tcn_bn.beta"],
                      bn[f"{pre}.tcn_bn"], feature_axes=(1,), train=train)
    if f"{pre}.res.w" in params:
        res = ad.conv1x1(f_in, params[f"{pre}.res.w"], params[f"{pre}.res.b"])
    else:
        res = f_in
    return ad.relu(ad.add(y, res))


_ADJACENCY_CACHE: dict = {}


def default_adjacency() -> PartitionedAdjacency:
    if "spatial" not in _ADJACENCY_CACHE:
        _ADJACENCY_CACHE["spatial"] = partition_adjacency(build_hand_graph(), "spatial")
    return _ADJACENCY_CACHE["spatial"]


def network_forward(clips, net: NetworkParams, config: ModelConfig, train=False,
                    rng=None, adjacency: PartitionedAdjacency | None = None) -> Tensor:
    """Map an N x C x T x V batch to N x 1 logits."""
    x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=config.dtype))
    expected = (config.in_channels, config.frames, config.vertices)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"network_forward: expected N x {expected[0]} x {expected[1]} x "
                         f"{expected[2]}, got {x.shape}")
    if x.dtype != np.dtype(config.dtype):
        x = Tensor(x.data.astype(config.dtype), requires_grad=x.requires_grad)
    adjacency = adjacency or default_adjacency()
    p = net.params
    h = ad.batch_norm(x, p["input_bn.gamma"], p["input_bn.beta"], net.bn["input_bn"],
                      feature_axes=(1, 3), train=train)
    for i in range(1, len(config.channels) + 1):
        h = block_forward(h, p, f"block{i}", net.bn, adjacency, mode=config.mode,
                          train=train, dropout=config.dropout, rng=rng)
    pooled = ad.global_avg_pool(h)
    return ad.affine(pooled, p["fc.w"], p["fc.b"])
