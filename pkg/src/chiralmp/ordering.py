"""Chirality-sensitive cyclic order of incoming neighbors.

For an edge-graph node (j, k) the molecule is moved so that atom j sits at
the origin and the bond j->k points along +x. The source atoms i of the
incoming neighbors (i, j) are then projected onto the yz-plane and sorted by
their full-circle angle from +y toward +z.

A reflection reverses the resulting cyclic order; rigid motions and bond
torsions only shift it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .edgegraph import EdgeGraph, Key, incoming_neighbors, key_str
from .geometry import RigidTransform, rot_x, rot_y

__all__ = [
    "RigidTransform",
    "NeighborOrder",
    "OrderingError",
    "DegenerateBondError",
    "ParallelNeighborError",
    "canonical_transform",
    "projection_angle",
    "neighbor_order",
    "all_orders",
    "cyclic_equivalent",
    "is_cyclic_shift",
    "format_orders",
]

BOND_TOL = 1e-9
PROJ_TOL = 1e-9
TIE_TOL = 1e-9
TWO_PI = 2.0 * np.pi


class OrderingError(ValueError):
    pass


class DegenerateBondError(OrderingError):
    pass


class ParallelNeighborError(OrderingError):
    def __init__(self, message: str, node: Key | None = None, neighbor: Key | None = None):
        self.node = node
        self.neighbor = neighbor
        super().__init__(message)


@dataclass(frozen=True)
class NeighborOrder:
    node: Key
    sequence: tuple[Key, ...]
    angles: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.sequence)

    def reversed(self) -> "NeighborOrder":
        return NeighborOrder(self.node, self.sequence[::-1], self.angles[::-1])


def canonical_transform(c_j, c_k) -> RigidTransform:
    """Rigid motion taking c_j to the origin and c_k onto the +x axis."""
    c_j = np.asarray(c_j, dtype=np.float64)
    v = np.asarray(c_k, dtype=np.float64) - c_j
    length = float(np.linalg.norm(v))
    if length <= BOND_TOL:
        raise DegenerateBondError("zero-length bond")
    # about x: (vy, vz) -> (0, r)
    Rx = rot_x(np.arctan2(v[1], v[2]))
    u = Rx @ v
    # about y: (ux, r) -> (|v|, 0)
    Ry = rot_y(np.arctan2(u[2], u[0]))
    R = Ry @ Rx
    return RigidTransform(R, -R @ c_j)


def projection_angle(p) -> float:
    """Angle of the yz-projection of ``p`` from +y toward +z, in [0, 2*pi)."""
    y, z = float(p[1]), float(p[2])
    if np.hypot(y, z) <= PROJ_TOL:
        raise ParallelNeighborError("neighbor parallel to reference bond")
    a = np.arctan2(z, y)
    if a < 0:
        a += TWO_PI
    if a >= TWO_PI:
        a = 0.0
    return float(a)


def neighbor_order(eg: EdgeGraph, node: Key, permissive: bool = False) -> NeighborOrder:
    """Sorted cyclic order of the incoming neighbors of ``node``.

    Angles equal within 1e-9 are ordered by source-atom index. In permissive
    mode, neighbors collinear with the reference bond are appended at the end
    (by atom index) with a NaN angle instead of raising.
    """
    node = (int(node[0]), int(node[1]))
    nbrs = incoming_neighbors(eg, node)
    if not nbrs:
        return NeighborOrder(node, (), ())
    row = eg.coords[eg.index[node]]
    try:
        T = canonical_transform(row[:3], row[3:])
    except DegenerateBondError as e:
        raise DegenerateBondError(f"{e} at node {key_str(node)}") from None
    placed, parallel = [], []
    for nb in nbrs:
        p = T.apply(eg.coords[eg.index[nb]][:3])
        try:
            placed.append((projection_angle(p), nb[0], nb))
        except ParallelNeighborError:
            if not permissive:
                raise ParallelNeighborError(
                    f"neighbor {key_str(nb)} parallel to reference bond at node {key_str(node)}",
                    node,
                    nb,
                ) from None
            parallel.append(nb)
    placed.sort()
    placed = _break_ties(placed)
    seq = [nb for _, _, nb in placed] + sorted(parallel)
    angles = [a for a, _, _ in placed] + [float("nan")] * len(parallel)
    return NeighborOrder(node, tuple(seq), tuple(angles))


def _break_ties(placed):
    out, group = [], []
    for item in placed:
        if group and item[0] - group[0][0] > TIE_TOL:
            out += sorted(group, key=lambda t: t[1])
            group = []
        group.append(item)
    out += sorted(group, key=lambda t: t[1])
    return out


def all_orders(eg: EdgeGraph, permissive: bool = False) -> dict[Key, NeighborOrder]:
    return {k: neighbor_order(eg, k, permissive) for k in eg.keys}


def is_cyclic_shift(a: Sequence, b: Sequence) -> bool:
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    if not a:
        return True
    return any(a[p:] + a[:p] == b for p in range(len(a)))


def cyclic_equivalent(a: NeighborOrder | Sequence, b: NeighborOrder | Sequence) -> bool:
    sa = list(a.sequence) if isinstance(a, NeighborOrder) else list(a)
    sb = list(b.sequence) if isinstance(b, NeighborOrder) else list(b)
    if sorted(sa) != sorted(sb):
        raise ValueError("orders are over different neighbor sets")
    return is_cyclic_shift(sa, sb)


def format_orders(orders: Iterable[NeighborOrder]) -> str:
    lines = []
    for o in sorted(orders, key=lambda o: o.node):
        seq = ", ".join(key_str(k) for k in o.sequence)
        ang = ", ".join(f"{a:.6f}" for a in o.angles)
        lines.append(f"{key_str(o.node)}: [{seq}] angles=[{ang}]")
    return "\n".join(lines)
