"""Order-sensitive message passing on edge graphs.

Two views of the same update live here:

* per-node numpy functions (``psi_k``, ``chienn_update`` and the generic
  aggregators) that follow the update rule literally, one node at a time;
* a batched, tape-recorded :class:`LayerStack` used for training, which
  packs every k-window of every node into one matrix.

The update for node (j, k) with cyclic neighbor order (x_0, ..., x_{d-1}) is

    x'_jk = W1 x_jk + W2 x_kj + sum_p W3 elu(W4 (x_p | ... | x_{p+k-1}))

with indices taken modulo d. When d < k, each window is the whole order
rotated by p, padded with k - d zero vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autonn as nn
from .edgegraph import EdgeGraph, Key, initial_inputs
from .ordering import NeighborOrder, all_orders

SCHEMA_VERSION = 1


def _elu(x):
    return np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)


# -- generic aggregators ---------------------------------------------------------


def vanilla_aggregate(x, neighbors, phi: Callable, rho: Callable):
    """rho(x; sum_i phi(x; x_i)); permutation invariant by construction."""
    x = np.asarray(x, dtype=np.float64)
    acc = None
    for nb in neighbors:
        nb = np.asarray(nb, dtype=np.float64)
        if nb.shape != x.shape:
            raise ValueError(f"neighbor shape {nb.shape} does not match {x.shape}")
        m = np.asarray(phi(x, nb), dtype=np.float64)
        acc = m if acc is None else acc + m
    if acc is None:
        probe = np.asarray(phi(x, np.zeros_like(x)), dtype=np.float64)
        acc = np.zeros_like(probe)
    return rho(x, acc)


def shift_invariant_aggregate(g: Callable, order):
    """sum_p g(x_p, ..., x_{p+d-1}) over all d cyclic shifts."""
    order = [np.asarray(v, dtype=np.float64) for v in order]
    d = len(order)
    if d < 1:
        raise ValueError("order must be non-empty")
    return sum(g(*(order[(p + t) % d] for t in range(d))) for p in range(d))


def zero_pad_order(order, k: int, width: int | None = None) -> list:
    """Append k - d zero vectors when the order is shorter than k."""
    order = [np.asarray(v, dtype=np.float64) for v in order]
    if width is None:
        if not order:
            raise ValueError("width is required for an empty order")
        width = order[0].shape[0]
    return order + [np.zeros(width) for _ in range(k - len(order))]


def window_positions(d: int, k: int) -> list[list[int]]:
    """Neighbor positions of each of the d windows; -1 marks a zero pad."""
    if d >= k:
        return [[(p + t) % d for t in range(k)] for p in range(d)]
    return [[(p + t) % d for t in range(d)] + [-1] * (k - d) for p in range(d)]


# -- per-node ChiENN -----------------------------------------------------------


@dataclass
class ChiENNParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray  # (H, H_mid)
    b3: np.ndarray
    W4: np.ndarray  # (H_mid, k*H)
    b4: np.ndarray
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("arity k must be >= 1")
        H = self.W1.shape[0]
        H_mid = self.W4.shape[0]
        shapes = {
            "W1": (H, H), "b1": (H,), "W2": (H, H), "b2": (H,),
            "W3": (H, H_mid), "b3": (H,), "W4": (H_mid, self.k * H), "b4": (H_mid,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def H(self) -> int:
        return self.W1.shape[0]

    @property
    def H_mid(self) -> int:
        return self.W4.shape[0]

    @classmethod
    def init(cls, H: int, H_mid: int, k: int, rng: np.random.Generator) -> "ChiENNParams":
        return cls(**_layer_arrays(H, H_mid, k, rng), k=k)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")}


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layer_arrays(H, H_mid, k, rng) -> dict[str, np.ndarray]:
    return {
        "W1": _uniform(rng, (H, H), H),
        "b1": _uniform(rng, (H,), H),
        "W2": _uniform(rng, (H, H), H),
        "b2": _uniform(rng, (H,), H),
        "W3": _uniform(rng, (H, H_mid), H_mid),
        "b3": _uniform(rng, (H,), H_mid),
        "W4": _uniform(rng, (H_mid, k * H), k * H),
        "b4": _uniform(rng, (H_mid,), k * H),
    }


def psi_k(params: ChiENNParams, window) -> np.ndarray:
    """Two-layer ELU MLP on the concatenation of exactly k vectors."""
    if len(window) != params.k:
        raise ValueError(f"window has {len(window)} vectors, arity is {params.k}")
    z = np.concatenate([np.asarray(v, dtype=np.float64) for v in window])
    return params.W3 @ _elu(params.W4 @ z + params.b4) + params.b3


def chienn_update(params: ChiENNParams, x_jk, x_kj, order) -> np.ndarray:
    """New state of node (j, k) from its own, its parallel node's and its ordered neighbors' states."""
    x_jk = np.asarray(x_jk, dtype=np.float64)
    x_kj = np.asarray(x_kj, dtype=np.float64)
    if x_jk.shape != (params.H,) or x_kj.shape != (params.H,):
        raise ValueError("state width does not match the layer")
    order = [np.asarray(v, dtype=np.float64) for v in order]
    for v in order:
        if v.shape != (params.H,):
            raise ValueError("neighbor state width does not match the layer")
    out = params.W1 @ x_jk + params.b1 + params.W2 @ x_kj + params.b2
    zero = np.zeros(params.H)
    for pos in window_positions(len(order), params.k):
        out = out + psi_k(params, [order[i] if i >= 0 else zero for i in pos])
    return out


def layer_forward(params: ChiENNParams, eg: EdgeGraph, orders: Mapping[Key, NeighborOrder]) -> np.ndarray:
    """Jacobi-style update of every node from the snapshot in ``eg.states``."""
    if eg.states is None:
        raise ValueError("edge graph has no states")
    old = np.array(eg.states)
    new = np.empty_like(old)
    for key in eg.keys:
        if key not in orders:
            raise KeyError(f"missing neighbor order for node {key}")
        i = eg.index[key]
        nbrs = [old[eg.index[nb]] for nb in orders[key].sequence]
        new[i] = chienn_update(params, old[i], old[eg.index[(key[1], key[0])]], nbrs)
    eg.states = new
    return new


def readout(states, head: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean-pool node states, then a two-layer ELU MLP head."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("readout needs a non-empty state table")
    pooled = states.mean(axis=0)
    return head["Wo"] @ _elu(head["Wh"] @ pooled + head["bh"]) + head["bo"]


# -- batched model ---------------------------------------------------------------


@dataclass
class GraphTensors:
    """Index arrays for one graph or a collated batch, at a fixed arity k."""

    inputs: np.ndarray  # (n_nodes, M + 2N)
    parallel: np.ndarray  # (n_nodes,)
    windows: np.ndarray  # (n_windows, k), -1 = zero pad
    owner: np.ndarray  # (n_windows,)
    graph: np.ndarray  # (n_nodes,)
    n_graphs: int

    @property
    def n_nodes(self) -> int:
        return len(self.inputs)


def prepare(eg: EdgeGraph, orders: Mapping[Key, NeighborOrder], k: int) -> GraphTensors:
    if eg.n_nodes == 0:
        raise ValueError("graph has no bonds")
    windows, owner = [], []
    for key in eg.keys:
        seq = [eg.index[nb] for nb in orders[key].sequence]
        for pos in window_positions(len(seq), k):
            windows.append([seq[i] if i >= 0 else -1 for i in pos])
            owner.append(eg.index[key])
    return GraphTensors(
        inputs=initial_inputs(eg),
        parallel=np.array([eg.index[(b, a)] for a, b in eg.keys], dtype=np.int64),
        windows=np.array(windows, dtype=np.int64).reshape(-1, k),
        owner=np.array(owner, dtype=np.int64),
        graph=np.zeros(eg.n_nodes, dtype=np.int64),
        n_graphs=1,
    )


def collate(items: Sequence[GraphTensors]) -> GraphTensors:
    offsets = np.cumsum([0] + [it.n_nodes for it in items[:-1]])
    windows = []
    for it, off in zip(items, offsets):
        windows.append(np.where(it.windows >= 0, it.windows + off, -1))
    return GraphTensors(
        inputs=np.concatenate([it.inputs for it in items]),
        parallel=np.concatenate([it.parallel + off for it, off in zip(items, offsets)]),
        windows=np.concatenate(windows),
        owner=np.concatenate([it.owner + off for it, off in zip(items, offsets)]),
        graph=np.concatenate([np.full(it.n_nodes, g) for g, it in enumerate(items)]),
        n_graphs=len(items),
    )


@dataclass
class StackConfig:
    in_dim: int
    out_dim: int
    H: int = 64
    H_mid: int = 64
    k: int = 3
    layers: int = 3
    head_hidden: int = 64
    activation: bool = True
    residual: bool = False
    layer_norm: bool = False


class LayerStack:
    """Embedding, stacked ChiENN layers, mean pooling and an MLP head.

    Parameters live in ``self.params`` as a flat name -> array dict, which is
    what the optimizer and the checkpoint format operate on.
    """

    def __init__(self, config: StackConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: StackConfig, rng: np.random.Generator) -> "LayerStack":
        c = config
        p = {
            "embed.A": _uniform(rng, (c.H, c.in_dim), c.in_dim),
            "embed.b": _uniform(rng, (c.H,), c.in_dim),
        }
        for l in range(c.layers):
            for name, arr in _layer_arrays(c.H, c.H_mid, c.k, rng).items():
                p[f"layer{l}.{name}"] = arr
        p["head.Wh"] = _uniform(rng, (c.head_hidden, c.H), c.H)
        p["head.bh"] = _uniform(rng, (c.head_hidden,), c.H)
        p["head.Wo"] = _uniform(rng, (c.out_dim, c.head_hidden), c.head_hidden)
        p["head.bo"] = _uniform(rng, (c.out_dim,), c.head_hidden)
        return cls(config, p)

    def layer(self, l: int) -> ChiENNParams:
        pre = f"layer{l}."
        return ChiENNParams(
            **{n[len(pre):]: v for n, v in self.params.items() if n.startswith(pre)}, k=self.config.k
        )

    def head(self) -> dict[str, np.ndarray]:
        return {n[5:]: v for n, v in self.params.items() if n.startswith("head.")}

    # tape path

    def node_states(self, P: Mapping[str, nn.Tensor], batch: GraphTensors) -> nn.Tensor:
        c = self.config
        tape = P["embed.A"].tape
        h = nn.linear(P["embed.A"], P["embed.b"], tape.constant(batch.inputs))
        n = batch.n_nodes
        for l in range(c.layers):
            q = lambda name: P[f"layer{l}.{name}"]
            win = nn.gather_rows(h, batch.windows)  # (n_windows, k, H)
            win = nn.reshape(win, (len(batch.windows), c.k * c.H))
            msg = nn.linear(q("W3"), q("b3"), nn.elu(nn.linear(q("W4"), q("b4"), win)))
            agg = nn.segment_sum(msg, batch.owner, n)
            par = nn.gather_rows(h, batch.parallel)
            new = nn.linear(q("W1"), q("b1"), h) + nn.linear(q("W2"), q("b2"), par) + agg
            if c.layer_norm:
                new = _layer_norm(new)
            if c.activation:
                new = nn.elu(new)
            h = h + new if c.residual else new
        return h

    def forward(self, P: Mapping[str, nn.Tensor], batch: GraphTensors) -> nn.Tensor:
        h = self.node_states(P, batch)
        pooled = nn.segment_mean(h, batch.graph, batch.n_graphs)
        hid = nn.elu(nn.linear(P["head.Wh"], P["head.bh"], pooled))
        return nn.linear(P["head.Wo"], P["head.bo"], hid)

    def predict(self, batch: GraphTensors) -> np.ndarray:
        tape = nn.Tape()
        return self.forward(tape.params(self.params), batch).data

    def embed(self, batch: GraphTensors) -> np.ndarray:
        """Mean-pooled node states per graph."""
        tape = nn.Tape()
        h = self.node_states(tape.params(self.params), batch)
        return nn.segment_mean(h, batch.graph, batch.n_graphs).data

    # per-node reference path, used to cross-check the batched one

    def reference_forward(self, eg: EdgeGraph, orders: Mapping[Key, NeighborOrder]) -> np.ndarray:
        c = self.config
        if c.layer_norm:
            raise NotImplementedError("reference path covers the bare update only")
        eg.states = initial_inputs(eg) @ self.params["embed.A"].T + self.params["embed.b"]
        for l in range(c.layers):
            old = eg.states
            new = layer_forward(self.layer(l), eg, orders)
            if c.activation:
                new = _elu(new)
            eg.states = old + new if c.residual else new
        return readout(eg.states, self.head())

    # serialization

    def to_dict(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}

        c = self.config
        return {
            "schema_version": SCHEMA_VERSION,
            "k": c.k,
            "H": c.H,
            "config": c.__dict__,
            "embed": {n[6:]: enc(v) for n, v in self.params.items() if n.startswith("embed.")},
            "layers": [
                {n: enc(v) for n, v in self.layer(l).arrays().items()} for l in range(c.layers)
            ],
            "head": {n: enc(v) for n, v in self.head().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerStack":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"checkpoint schema version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}"
            )

        def dec(e):
            return np.array(e["data"], dtype=np.float64).reshape(e["shape"])

        config = StackConfig(**d["config"])
        p = {f"embed.{n}": dec(e) for n, e in d["embed"].items()}
        for l, layer in enumerate(d["layers"]):
            p.update({f"layer{l}.{n}": dec(e) for n, e in layer.items()})
        p.update({f"head.{n}": dec(e) for n, e in d["head"].items()})
        stack = cls(config, p)
        for l in range(config.layers):
            stack.layer(l)  # shape validation
        return stack

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LayerStack":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _layer_norm(x: nn.Tensor, eps: float = 1e-5) -> nn.Tensor:
    H = x.shape[1]
    avg = x.tape.constant(np.full((H, H), 1.0 / H))
    centered = x - nn.matmul(x, avg)
    var = nn.matmul(nn.square(centered), avg)
    return centered * nn.rsqrt(var + eps)


def graph_tensors(eg: EdgeGraph, k: int, permissive: bool = False) -> GraphTensors:
    return prepare(eg, all_orders(eg, permissive), k)
