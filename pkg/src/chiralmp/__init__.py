"""Chirality-aware message passing on molecular edge graphs."""

from .edgegraph import EdgeGraph, incoming_neighbors, to_edge_graph
from .geometry import RigidTransform
from .model import ChiENNParams, LayerStack, StackConfig, chienn_update
from .molgraph import MolecularGraph, apply_rigid, featurize, mirror, parse_sdf, read_sdf
from .ordering import NeighborOrder, all_orders, canonical_transform, cyclic_equivalent, neighbor_order

__version__ = "0.1.0"
