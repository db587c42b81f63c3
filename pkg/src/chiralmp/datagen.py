"""Synthetic chiral molecules with labels from a determinant-sign oracle.

Each tetrahedral sample is a central carbon carrying four branches whose
first atoms are distinct elements. Priority follows the position of that
element in :data:`~chiralmp.molgraph.VOCABULARY` (later = higher), which is
a stand-in for CIP ranking.

Label convention: with substituent positions v1..v4 sorted from highest to
lowest priority, det[v1 - v4, v2 - v4, v3 - v4] < 0 is ``R`` (class 0) and
> 0 is ``S`` (class 1). This matches the usual picture: looking with v4
pointing away from the viewer, R means 1 -> 2 -> 3 runs clockwise.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .edgegraph import to_edge_graph
from .geometry import axis_angle, random_rigid, random_rotation
from .molgraph import VOCABULARY, MolecularGraph, apply_rigid, mirror
from .ordering import neighbor_order

SCHEMA_VERSION = 1
LABELS = ("R", "S")
DEFAULT_DELTA = 0.5
MAX_JITTER_DEG = 15.0

BRANCH_ELEMENTS = ("H", "C", "N", "O", "F", "Cl", "Br", "I")
BRANCH_HYDROGENS = {"C": 3, "N": 2, "O": 1}
BOND_LENGTH = {"H": 1.09, "C": 1.54, "N": 1.47, "O": 1.43, "F": 1.35, "Cl": 1.77, "Br": 1.94, "I": 2.14}
XH_LENGTH = {"C": 1.09, "N": 1.01, "O": 0.96}
# per-element contribution to the achiral part of the regression target
ACHIRAL_WEIGHT = {"H": -0.6, "C": -0.25, "N": 0.1, "O": 0.35, "F": 0.55, "Cl": -0.4, "Br": 0.2, "I": 0.7}

TETRAHEDRON = np.array([[1, 1, 1], [-1, -1, 1], [-1, 1, -1], [1, -1, -1]], dtype=np.float64) / np.sqrt(3)


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class SyntheticSample:
    graph: MolecularGraph
    label: int | float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "graph": self.graph.to_dict(),
            "label": self.label,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSample":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"dataset schema version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        return cls(MolecularGraph.from_dict(d["graph"]), d["label"], d.get("meta", {}))


def priority_key(element: str) -> int:
    return VOCABULARY.index(element) if element in VOCABULARY else VOCABULARY.index("other")


# -- oracle ----------------------------------------------------------------------


def signed_volume(center, substituents: Sequence[tuple[int, Sequence[float]]]) -> float:
    """det[v1 - v4, v2 - v4, v3 - v4] with v_r the rank-r position (1 = highest)."""
    if len(substituents) != 4:
        raise ValueError("exactly four substituents expected")
    ranks = [r for r, _ in substituents]
    if sorted(ranks) != [1, 2, 3, 4]:
        raise ValueError(f"substituent ranks must be 1..4, got {ranks}")
    c = np.asarray(center, dtype=np.float64)
    pos = {r: np.asarray(p, dtype=np.float64) - c for r, p in substituents}
    v4 = pos[4]
    return float(np.linalg.det(np.stack([pos[1] - v4, pos[2] - v4, pos[3] - v4])))


def chirality_oracle(center, substituents: Sequence[tuple[int, Sequence[float]]], tol: float = 1e-9) -> str:
    vol = signed_volume(center, substituents)
    if abs(vol) <= tol:
        raise DegenerateGeometryError("coplanar substituents")
    return "S" if vol > 0 else "R"


def center_substituents(g: MolecularGraph, center: int) -> list[tuple[int, int]]:
    """(rank, atom) for the neighbors of ``center``, rank 1 = highest priority."""
    nbrs = g.neighbors(center)
    keys = [priority_key(g.elements[a]) for a in nbrs]
    if len(nbrs) != 4 or len(set(keys)) != 4:
        raise ValueError("center needs four neighbors of distinct priority")
    ranked = sorted(nbrs, key=lambda a: -priority_key(g.elements[a]))
    return [(r + 1, a) for r, a in enumerate(ranked)]


def label_of(g: MolecularGraph, center: int = 0) -> str:
    subs = center_substituents(g, center)
    return chirality_oracle(g.coords[center], [(r, g.coords[a]) for r, a in subs])


def order_chirality(g: MolecularGraph, center: int = 0) -> str:
    """R/S read off the cyclic neighbor order at the bond center -> lowest-priority atom.

    Sorting the three higher-priority neighbors by their yz-angle (from +y
    toward +z) with the lowest-priority bond along +x lists them clockwise as
    seen from -x, so 1 -> 2 -> 3 appearing in that cyclic order is ``R``.
    """
    subs = center_substituents(g, center)
    rank_of = {a: r for r, a in subs}
    lowest = subs[-1][1]
    order = neighbor_order(to_edge_graph(g), (center, lowest))
    ranks = [rank_of[i] for i, _ in order.sequence]
    if sorted(ranks) != [1, 2, 3]:
        raise ValueError("unexpected neighbor set at the chiral center")
    p = ranks.index(1)
    return "R" if ranks[p:] + ranks[:p] == [1, 2, 3] else "S"


# -- generators --------------------------------------------------------------------


def _jittered_directions(rng: np.random.Generator) -> np.ndarray:
    dirs = []
    for d in TETRAHEDRON:
        axis = np.cross(d, rng.normal(size=3))
        theta = np.deg2rad(rng.uniform(0.0, MAX_JITTER_DEG))
        dirs.append(axis_angle(axis, theta) @ d)
    return np.array(dirs)


def _branch_hydrogens(rng, anchor, heavy, bond_dir, count, length):
    """Place ``count`` hydrogens on ``heavy`` roughly tetrahedrally, away from ``anchor``."""
    u = bond_dir / np.linalg.norm(bond_dir)
    perp = np.cross(u, rng.normal(size=3))
    perp /= np.linalg.norm(perp)
    tilt = np.deg2rad(180.0 - 109.5)
    torsion = rng.uniform(0, 2 * np.pi)
    out = []
    for h in range(count):
        spin = axis_angle(u, torsion + 2 * np.pi * h / 3)
        direction = np.cos(tilt) * u + np.sin(tilt) * (spin @ perp)
        out.append(heavy + length * direction)
    return out


def tetrahedral_molecule(rng: np.random.Generator, elements: Sequence[str] | None = None, name: str = "") -> MolecularGraph:
    """Central carbon (atom 0) with four distinct branches in a jittered tetrahedron."""
    if elements is None:
        elements = list(rng.choice(BRANCH_ELEMENTS, size=4, replace=False))
    elements = [str(e) for e in elements]
    if len(set(elements)) != 4:
        raise ValueError("four distinct branch elements expected")
    dirs = _jittered_directions(rng)
    syms, coords, bonds = ["C"], [np.zeros(3)], []
    for e, d in zip(elements, dirs):
        heavy = BOND_LENGTH[e] * d
        idx = len(syms)
        syms.append(e)
        coords.append(heavy)
        bonds.append((0, idx, 1))
        for hpos in _branch_hydrogens(rng, np.zeros(3), heavy, d, BRANCH_HYDROGENS.get(e, 0), XH_LENGTH.get(e, 1.0)):
            syms.append("H")
            coords.append(hpos)
            bonds.append((idx, len(syms) - 1, 1))
    return MolecularGraph.build(syms, np.array(coords), bonds, name)


def _pair(seed: int, pair_id: int):
    rng = np.random.default_rng([seed, pair_id])
    base = tetrahedral_molecule(rng, name=f"tetra-{seed}-{pair_id}")
    a = apply_rigid(base, random_rigid(rng))
    b = apply_rigid(mirror(base), random_rigid(rng))
    return a, b


def gen_tetrahedral(seed: int, count: int) -> list[SyntheticSample]:
    """R/S classification samples; consecutive samples form enantiomer pairs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if count % 2:
        warnings.warn("odd sample count: the last sample has no mirror partner", stacklevel=2)
    out = []
    for p in range((count + 1) // 2):
        a, b = _pair(seed, p)
        for g, is_mirror in ((a, False), (b, True))[: min(2, count - 2 * p)]:
            out.append(
                SyntheticSample(
                    g,
                    LABELS.index(label_of(g)),
                    {"seed": seed, "is_mirror": is_mirror, "pair_id": p, "task": "classification"},
                )
            )
    return out


def achiral_target(g: MolecularGraph) -> float:
    """Smooth function of composition and mean bond length, of order one."""
    heavy = [e for e in g.elements[1:] if e != "H"]
    u = sum(ACHIRAL_WEIGHT.get(g.elements[a], 0.0) for a in g.neighbors(0))
    lengths = np.linalg.norm(g.coords[g.bonds[:, 0]] - g.coords[g.bonds[:, 1]], axis=1)
    return float(np.sin(1.2 * u) + 0.05 * len(heavy) + (lengths.mean() - 1.3))


def chirality_sign(g: MolecularGraph) -> int:
    return 1 if label_of(g) == "S" else -1


def gen_ranking_pairs(seed: int, count: int, delta: float = DEFAULT_DELTA):
    """Enantiomer pairs with targets f_achiral + sign * delta; label names the smaller one."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for p in range(count):
        a, b = _pair(seed, p)
        samples = []
        for g, is_mirror in ((a, False), (b, True)):
            s = chirality_sign(g)
            y = achiral_target(g) + s * delta
            samples.append(
                SyntheticSample(
                    g, y, {"seed": seed, "is_mirror": is_mirror, "pair_id": p, "task": "ranking", "sign": s}
                )
            )
        label = "a" if samples[0].label < samples[1].label else "b"
        out.append((samples[0], samples[1], label))
    return out


def flatten_pairs(pairs) -> list[SyntheticSample]:
    return [s for a, b, _ in pairs for s in (a, b)]


# -- conformers ------------------------------------------------------------------


def _component(g: MolecularGraph, start: int, blocked: tuple[int, int]) -> set[int]:
    adj = {a: [] for a in range(g.n_atoms)}
    for i, j in g.bonds.tolist():
        if {i, j} != set(blocked):
            adj[i].append(j)
    seen, stack = {start}, [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen


def perturb_conformer(g: MolecularGraph, bond: tuple[int, int], angle: float) -> MolecularGraph:
    """Rotate the smaller side of a bridge bond about the bond axis."""
    a, b = int(bond[0]), int(bond[1])
    if b not in g.neighbors(a):
        raise ValueError(f"no bond between atoms {a} and {b}")
    side_b = _component(g, b, (a, b))
    if a in side_b:
        raise ValueError("not a rotatable bond")
    side_a = set(range(g.n_atoms)) - side_b
    moving = side_b if len(side_b) <= len(side_a) else side_a
    if angle == 0.0:
        return g
    R = axis_angle(g.coords[b] - g.coords[a], angle)
    c = np.array(g.coords)
    idx = sorted(moving)
    c[idx] = (c[idx] - c[a]) @ R.T + c[a]
    return g.with_coords(c)


def bridges(g: MolecularGraph) -> list[tuple[int, int]]:
    return [(i, j) for i, j, _ in g.undirected_bonds() if i not in _component(g, j, (i, j))]


# -- random molecules for property checks ------------------------------------------


def random_molecule(rng: np.random.Generator, n_atoms: int | None = None, max_atoms: int = 12, ring_bonds: int = 0) -> MolecularGraph:
    """Random tree (plus optional ring closures) with atoms in generic position."""
    n = int(n_atoms if n_atoms is not None else rng.integers(2, max_atoms + 1))
    syms = list(rng.choice(VOCABULARY[:-1], size=n))
    bonds = set()
    for a in range(1, n):
        bonds.add((int(rng.integers(0, a)), a))
    for _ in range(ring_bonds):
        i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        bonds.add((i, j))
    coords = rng.uniform(-3.0, 3.0, size=(n, 3))
    orders = [(i, j, int(rng.integers(1, 5))) for i, j in sorted(bonds)]
    return MolecularGraph.build(syms, coords, orders, "random")


# -- dataset files -------------------------------------------------------------------


def write_jsonl(samples: Iterable[SyntheticSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")


def read_jsonl(path) -> list[SyntheticSample]:
    with open(path) as fh:
        return [SyntheticSample.from_dict(json.loads(line)) for line in fh if line.strip()]
