"""Variable-size refinement policies: per-element net, hypernetwork, graphnet.

All three share the same convolutional front-end (6 filters, 5x5, stride 2,
valid padding, ReLU) that turns each 24x24x2 element observation into a
600-dimensional feature row; parameter counts never depend on the element
count, so one checkpoint runs on any mesh size.

* IPN scores every element with one shared dense head and softmaxes the
  scalar logits; by construction the distribution is permutation-equivariant.
* The hypernetwork sums feature rows into a state summary that generates the
  weight matrix and bias of the scoring layer, so every element's logit
  depends on the whole state.
* The graphnet encodes elements as nodes and face-adjacency as edges (one-hot
  depth difference), runs two weight-shared interaction passes plus an output
  pass with its own weights, and reads each node out to a scalar; the
  do-nothing action has a dedicated trainable logit since it has no node.

Distributions come from a masked log-softmax: invalid actions have
probability exactly zero.  Behavior sampling mixes the policy with a uniform
distribution over valid actions, with a linearly decaying mixture weight.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .env import Observation


class GraphMismatch(Exception):
    """Adjacency node count disagrees with the observation stack."""


class NoValidAction(Exception):
    pass


ARCHS = ("ipn", "hypernet", "graphnet")


@dataclass
class PolicyConfig:
    arch: str = "ipn"
    d_max: int = 3
    obs_size: int = 24
    channels: int = 2
    conv_filters: int = 6
    conv_kernel: int = 5
    conv_stride: int = 2
    ipn_h1: int = 128
    ipn_h2: int = 64
    hyper_h1: int = 128
    hyper_h: int = 64
    graph_dim_v: int = 64
    graph_dim_e: int = 16

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")

    @property
    def conv_out(self) -> int:
        side = (self.obs_size - self.conv_kernel) // self.conv_stride + 1
        return side * side * self.conv_filters

    def to_dict(self) -> dict:
        return asdict(self)


def table_defaults(arch: str, mode: str) -> dict:
    """Published width/learning-rate presets per architecture and mode."""
    widths = {
        ("ipn", "static"): {"ipn_h1": 128, "ipn_h2": 64, "alpha": 1e-4},
        ("ipn", "advection"): {"ipn_h1": 256, "ipn_h2": 256, "alpha": 1e-4},
        ("graphnet", "static"): {"graph_dim_v": 64, "graph_dim_e": 16, "alpha": 1e-4},
        ("graphnet", "advection"): {"graph_dim_v": 256, "graph_dim_e": 16, "alpha": 1e-4},
        ("hypernet", "static"): {"hyper_h1": 128, "hyper_h": 64, "alpha": 5e-5},
        ("hypernet", "advection"): {"hyper_h1": 32, "hyper_h": 64, "alpha": 1e-4},
    }
    try:
        return dict(widths[(arch, mode)])
    except KeyError:
        raise ValueError(f"no defaults for ({arch!r}, {mode!r})") from None


class ConvFrontEnd(nn.Module):
    def __init__(self, cfg: PolicyConfig, ss: np.random.SeedSequence):
        k, c, f = cfg.conv_kernel, cfg.channels, cfg.conv_filters
        self.conv = nn.Conv2d(k, k, c, f, ss, stride=cfg.conv_stride)
        self.out_dim = cfg.conv_out

    def __call__(self, x: nn.Tensor) -> nn.Tensor:
        h = nn.relu(self.conv(x))
        return nn.reshape(h, (x.shape[0], self.out_dim))


class Policy(nn.Module):
    """Shared plumbing: encoding, ragged batching, distributions."""

    arch = "?"

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg

    def encode(self, tensors: np.ndarray) -> nn.Tensor:
        return self.front(nn.Tensor(tensors))

    def head(self, feats: nn.Tensor, obs: Observation) -> nn.Tensor:
        """Per-state logits (N+1,) from that state's feature rows."""
        raise NotImplementedError

    def logits(self, obs: Observation) -> nn.Tensor:
        return self.head(self.encode(obs.tensors), obs)

    def log_probs(self, obs: Observation) -> nn.Tensor:
        return nn.masked_log_softmax(self.logits(obs), obs.mask)

    def probs(self, obs: Observation) -> np.ndarray:
        lp = self.log_probs(obs).value
        p = np.zeros_like(lp)
        ok = np.isfinite(lp)
        p[ok] = np.exp(lp[ok])
        return p

    def batch_log_probs(self, obs_list: list[Observation]) -> list[nn.Tensor]:
        """One conv pass over all states, then per-state heads and softmax."""
        tensors = np.concatenate([o.tensors for o in obs_list], axis=0)
        feats = self.encode(tensors)
        out = []
        off = 0
        for obs in obs_list:
            rows = obs.n_actions
            lp = nn.masked_log_softmax(self.head(nn.narrow(feats, off, rows), obs),
                                       obs.mask)
            out.append(lp)
            off += rows
        return out


class IPNPolicy(Policy):
    arch = "ipn"

    def __init__(self, cfg: PolicyConfig, ss: np.random.SeedSequence):
        super().__init__(cfg)
        s1, s2, s3, s4 = ss.spawn(4)
        self.front = ConvFrontEnd(cfg, s1)
        self.fc1 = nn.Dense(cfg.conv_out, cfg.ipn_h1, s2)
        self.fc2 = nn.Dense(cfg.ipn_h1, cfg.ipn_h2, s3)
        self.out = nn.Dense(cfg.ipn_h2, 1, s4)

    def head(self, feats: nn.Tensor, obs: Observation) -> nn.Tensor:
        h = nn.relu(self.fc1(feats))
        h = nn.relu(self.fc2(h))
        return nn.reshape(self.out(h), (feats.shape[0],))


class HyperPolicy(Policy):
    """Scoring-layer weights generated from a sum over encoded observations.

    With s the (N+1) x d matrix of encoded rows (dummy included):
        W = reshape((sum_i (s U)_i) V, (d, h));  b = sum_i (s Y)_i
        logit_i = ReLU(s_i W + b) . H_out
    """

    arch = "hypernet"

    def __init__(self, cfg: PolicyConfig, ss: np.random.SeedSequence):
        super().__init__(cfg)
        d, h1, h = cfg.conv_out, cfg.hyper_h1, cfg.hyper_h
        s1, s2, s3, s4, s5 = ss.spawn(5)
        self.front = ConvFrontEnd(cfg, s1)
        rng = np.random.Generator(np.random.Philox(s2))
        self.U = nn.Parameter(nn.truncated_normal(rng, (d, h1)))
        rng = np.random.Generator(np.random.Philox(s3))
        self.V = nn.Parameter(nn.truncated_normal(rng, (h1, d * h)))
        rng = np.random.Generator(np.random.Philox(s4))
        self.Y = nn.Parameter(nn.truncated_normal(rng, (d, h)))
        self.out = nn.Dense(h, 1, s5)

    def head(self, feats: nn.Tensor, obs: Observation) -> nn.Tensor:
        cfg = self.cfg
        u_sum = nn.tsum(nn.matmul(feats, self.U), axis=0)          # (h1,)
        W = nn.reshape(nn.matmul(u_sum, self.V), (cfg.conv_out, cfg.hyper_h))
        b = nn.tsum(nn.matmul(feats, self.Y), axis=0)              # (h,)
        hidden = nn.relu(nn.add(nn.matmul(feats, W), b))
        return nn.reshape(self.out(hidden), (feats.shape[0],))


class _EdgeNet(nn.Module):
    """phi_e: (e, v_receiver, v_sender) -> updated edge attribute."""

    def __init__(self, dim_e: int, dim_v: int, ss):
        s1, s2 = ss.spawn(2)
        self.h = nn.Dense(dim_e + 2 * dim_v, dim_v, s1)
        self.o = nn.Dense(dim_v, dim_e, s2)

    def __call__(self, e, vr, vs):
        x = nn.concat([e, vr, vs], axis=1)
        return self.o(nn.relu(self.h(x)))


class _NodeNet(nn.Module):
    """phi_v: (aggregated incoming edges, v) -> updated node attribute."""

    def __init__(self, dim_e: int, dim_v: int, ss):
        s1, s2 = ss.spawn(2)
        self.h = nn.Dense(dim_e + dim_v, dim_v, s1)
        self.o = nn.Dense(dim_v, dim_v, s2)

    def __call__(self, agg, v):
        x = nn.concat([agg, v], axis=1)
        return self.o(nn.relu(self.h(x)))


class GraphPolicy(Policy):
    arch = "graphnet"

    def __init__(self, cfg: PolicyConfig, ss: np.random.SeedSequence):
        super().__init__(cfg)
        dv, de = cfg.graph_dim_v, cfg.graph_dim_e
        s1, s2, s3, s4, s5, s6, s7, s8 = ss.spawn(8)
        self.front = ConvFrontEnd(cfg, s1)
        self.node_enc = nn.Dense(cfg.conv_out, dv, s2)
        self.edge_enc = nn.Dense(2 * cfg.d_max + 1, de, s3)
        self.core_edge = _EdgeNet(de, dv, s4)      # shared across the two passes
        self.core_node = _NodeNet(de, dv, s5)
        self.out_edge = _EdgeNet(de, dv, s6)       # output block, own weights
        self.out_node = _NodeNet(de, dv, s7)
        self.readout = nn.Dense(dv, 1, s8)
        self.dummy_logit = nn.Parameter(np.zeros(1))

    def _interact(self, edge_net, node_net, e, v, send, recv, n):
        if len(send):
            e_hat = edge_net(e, nn.gather(v, recv), nn.gather(v, send))
            agg = nn.segment_sum(e_hat, recv, n)
        else:
            e_hat = e
            agg = nn.Tensor(np.zeros((n, self.cfg.graph_dim_e)))
        return e_hat, node_net(agg, v)

    def head(self, feats: nn.Tensor, obs: Observation) -> nn.Tensor:
        g = obs.graph
        n = feats.shape[0] - 1
        if len(g.node_ids) != n:
            raise GraphMismatch(f"{len(g.node_ids)} graph nodes vs {n} observations")
        v = self.node_enc(nn.narrow(feats, 1, n))
        send, recv = g.senders, g.receivers
        if len(send):
            e = self.edge_enc(nn.Tensor(g.edge_onehot))
        else:
            e = nn.Tensor(np.zeros((0, self.cfg.graph_dim_e)))
        for _ in range(2):
            e, v = self._interact(self.core_edge, self.core_node, e, v, send, recv, n)
        e, v = self._interact(self.out_edge, self.out_node, e, v, send, recv, n)
        node_logits = nn.reshape(self.readout(v), (n,))
        return nn.concat([self.dummy_logit, node_logits], axis=0)


def make_policy(cfg: PolicyConfig, seed) -> Policy:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cls = {"ipn": IPNPolicy, "hypernet": HyperPolicy, "graphnet": GraphPolicy}[cfg.arch]
    return cls(cfg, ss)


def behavior_probs(probs: np.ndarray, valid: np.ndarray, eps: float) -> np.ndarray:
    """(1 - eps) * policy + eps * uniform over currently valid actions."""
    valid = np.asarray(valid, dtype=bool)
    k = int(valid.sum())
    if k == 0:
        raise NoValidAction("no valid actions to sample")
    mixed = (1.0 - eps) * probs
    mixed[valid] += eps / k
    return mixed


def sample_action(probs: np.ndarray, valid: np.ndarray, eps: float,
                  rng: np.random.Generator) -> tuple[int, float]:
    """Sample from the eps-mixed behavior distribution.

    Returns the action and its behavior probability.
    """
    mixed = behavior_probs(probs.copy(), valid, eps)
    total = mixed.sum()
    a = int(rng.choice(len(mixed), p=mixed / total))
    return a, float(mixed[a])
