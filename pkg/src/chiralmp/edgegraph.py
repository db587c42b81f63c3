"""Edge (dual) graph of a directed molecular graph.

Each directed bond (i, j) becomes a node carrying the bond features and the
6D coordinate c_i | c_j. Two nodes (i, j) and (j, k) are joined through their
shared atom j, with edge feature e_ij | x_j | e_jk. The parallel pair
((k, j), (j, k)) is stored like any other edge and dropped only when
incoming neighbors are queried.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .molgraph import MolecularGraph

Key = tuple[int, int]


def key_str(key: Key) -> str:
    return f"{key[0]}->{key[1]}"


@dataclass(eq=False)
class EdgeGraph:
    keys: tuple[Key, ...]
    index: dict[Key, int]
    features: np.ndarray  # (E, M)
    coords: np.ndarray  # (E, 6)
    edges: tuple[tuple[Key, Key], ...]
    edge_features: np.ndarray  # (|E'|, 2M + N)
    incoming: dict[Key, tuple[Key, ...]]  # every incoming edge source, parallel included
    source: MolecularGraph
    states: np.ndarray | None = field(default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.keys)

    def parallel(self, key: Key) -> Key:
        return (key[1], key[0])

    def to_dict(self) -> dict:
        adjacency: dict[str, list[str]] = {key_str(k): [] for k in sorted(self.keys)}
        for a, b in sorted(self.edges):
            adjacency[key_str(a)].append(key_str(b))
        return {
            "name": self.source.name,
            "nodes": {
                key_str(k): {
                    "feature": self.features[self.index[k]].tolist(),
                    "coord": self.coords[self.index[k]].tolist(),
                }
                for k in sorted(self.keys)
            },
            "adjacency": adjacency,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def to_edge_graph(g: MolecularGraph) -> EdgeGraph:
    keys = tuple((int(i), int(j)) for i, j in g.bonds)
    index = {k: n for n, k in enumerate(keys)}
    into: dict[int, list[Key]] = {a: [] for a in range(g.n_atoms)}
    out_of: dict[int, list[Key]] = {a: [] for a in range(g.n_atoms)}
    for k in keys:
        into[k[1]].append(k)
        out_of[k[0]].append(k)
    edges, efeats = [], []
    incoming: dict[Key, list[Key]] = {k: [] for k in keys}
    for j in range(g.n_atoms):
        for a in into[j]:
            for b in out_of[j]:
                edges.append((a, b))
                efeats.append(
                    np.concatenate([g.bond_features[index[a]], g.atom_features[j], g.bond_features[index[b]]])
                )
                incoming[b].append(a)
    M, N = g.bond_features.shape[1], g.atom_features.shape[1]
    coords = np.concatenate([g.coords[g.bonds[:, 0]], g.coords[g.bonds[:, 1]]], axis=1) if keys else np.zeros((0, 6))
    return EdgeGraph(
        keys=keys,
        index=index,
        features=np.array(g.bond_features),
        coords=coords,
        edges=tuple(edges),
        edge_features=np.array(efeats).reshape(len(edges), 2 * M + N),
        incoming={k: tuple(v) for k, v in incoming.items()},
        source=g,
    )


def incoming_neighbors(eg: EdgeGraph, node: Key) -> list[Key]:
    """Nodes (i, j) with an edge into (j, k), the parallel node (k, j) excluded."""
    node = (int(node[0]), int(node[1]))
    if node not in eg.index:
        raise KeyError(f"unknown edge-graph node {key_str(node)}")
    par = eg.parallel(node)
    return [a for a in eg.incoming[node] if a != par]


def initial_inputs(eg: EdgeGraph) -> np.ndarray:
    """Rows e_ij | x_i | x_j that the learned embedding maps to initial states."""
    g = eg.source
    if not eg.keys:
        return np.zeros((0, g.bond_features.shape[1] + 2 * g.atom_features.shape[1]))
    src = np.array([k[0] for k in eg.keys])
    dst = np.array([k[1] for k in eg.keys])
    return np.concatenate([eg.features, g.atom_features[src], g.atom_features[dst]], axis=1)
