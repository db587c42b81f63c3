"""Directed molecular graphs with 3D coordinates.

A :class:`MolecularGraph` stores every chemical bond twice, once per
direction, with identical features. Graphs are read from V2000 MOL/SDF
blocks or built directly from element symbols, bond lists and coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .geometry import RigidTransform

VOCABULARY = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "other")
BOND_ORDERS = (1, 2, 3, 4)  # 4 = aromatic

# fmt: off
ELEMENTS = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn
Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La
Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po
At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg
Cn Nh Fl Mc Lv Ts Og D T
""".split())
# fmt: on


class SDFParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class UnknownElementError(ValueError):
    pass


def featurize(
    element_symbols: Sequence[str],
    bond_orders: Sequence[int],
    vocabulary: Sequence[str] = VOCABULARY,
) -> tuple[np.ndarray, np.ndarray]:
    """One-hot atom features over ``vocabulary`` and one-hot bond-order features.

    Real elements outside the vocabulary fall into the ``"other"`` bucket when
    the vocabulary has one; anything else raises :class:`UnknownElementError`.
    """
    vocab = {s: i for i, s in enumerate(vocabulary)}
    other = vocab.get("other")
    X = np.zeros((len(element_symbols), len(vocabulary)))
    for row, sym in enumerate(element_symbols):
        col = vocab.get(sym)
        if col is None and other is not None and sym in ELEMENTS:
            col = other
        if col is None:
            raise UnknownElementError(f"unknown element {sym!r}")
        X[row, col] = 1.0
    B = np.zeros((len(bond_orders), len(BOND_ORDERS)))
    for row, order in enumerate(bond_orders):
        if order not in BOND_ORDERS:
            raise ValueError(f"unsupported bond order {order!r}")
        B[row, order - 1] = 1.0
    return X, B


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MolecularGraph:
    """Atoms with features and coordinates plus paired directed bonds.

    ``bonds`` is an (E, 2) array of (src, dst); ``bond_orders`` and
    ``bond_features`` are aligned with it.
    """

    elements: tuple[str, ...]
    coords: np.ndarray
    atom_features: np.ndarray
    bonds: np.ndarray
    bond_orders: tuple[int, ...]
    bond_features: np.ndarray
    name: str = ""

    @classmethod
    def build(
        cls,
        elements: Sequence[str],
        coords,
        undirected_bonds: Sequence[tuple[int, int, int]],
        name: str = "",
        vocabulary: Sequence[str] = VOCABULARY,
    ) -> "MolecularGraph":
        """Build from atoms and (a, b, order) records; each record yields two directed bonds."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        if len(coords) != len(elements):
            raise ValueError("one coordinate row per atom expected")
        n = len(elements)
        pairs, orders = [], []
        for a, b, order in undirected_bonds:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError("bond index out of range")
            pairs += [(a, b), (b, a)]
            orders += [order, order]
        X, B = featurize(list(elements), orders, vocabulary)
        g = cls(
            tuple(elements),
            _frozen(coords),
            _frozen(X),
            _frozen(np.array(pairs, dtype=np.int64).reshape(-1, 2), np.int64),
            tuple(orders),
            _frozen(B),
            name,
        )
        g.validate()
        return g

    @property
    def n_atoms(self) -> int:
        return len(self.elements)

    @property
    def n_bonds(self) -> int:
        """Number of directed bonds."""
        return len(self.bonds)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite coordinates")
        seen = {}
        for (i, j), f in zip(self.bonds.tolist(), self.bond_features):
            if i == j:
                raise ValueError(f"self-loop on atom {i}")
            if (i, j) in seen:
                raise ValueError(f"duplicate bond {i}->{j}")
            seen[(i, j)] = f
        for (i, j), f in seen.items():
            back = seen.get((j, i))
            if back is None or not np.array_equal(back, f):
                raise ValueError(f"bond {i}->{j} lacks a matching reverse bond")

    def neighbors(self, atom: int) -> list[int]:
        return sorted(int(j) for i, j in self.bonds if i == atom)

    def with_coords(self, coords) -> "MolecularGraph":
        coords = _frozen(coords)
        if coords.shape != self.coords.shape:
            raise ValueError("coordinate shape mismatch")
        return MolecularGraph(
            self.elements,
            coords,
            self.atom_features,
            self.bonds,
            self.bond_orders,
            self.bond_features,
            self.name,
        )

    def undirected_bonds(self) -> list[tuple[int, int, int]]:
        return [
            (int(i), int(j), o)
            for (i, j), o in zip(self.bonds.tolist(), self.bond_orders)
            if i < j
        ]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "atoms": [
                {"element": e, "xyz": [float(v) for v in c]}
                for e, c in zip(self.elements, self.coords)
            ],
            "bonds": [{"src": i, "dst": j, "order": o} for i, j, o in self.undirected_bonds()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MolecularGraph":
        return cls.build(
            [a["element"] for a in d["atoms"]],
            [a["xyz"] for a in d["atoms"]],
            [(b["src"], b["dst"], b["order"]) for b in d["bonds"]],
            d.get("name", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def mirror(g: MolecularGraph) -> MolecularGraph:
    """Reflect through the yz-plane: (x, y, z) -> (-x, y, z)."""
    c = np.array(g.coords)
    c[:, 0] = -c[:, 0]
    return g.with_coords(c)


def apply_rigid(g: MolecularGraph, T: RigidTransform) -> MolecularGraph:
    return g.with_coords(T.apply(g.coords))


def relabel(g: MolecularGraph, perm: Sequence[int]) -> MolecularGraph:
    """Renumber atoms so that old atom ``a`` becomes ``perm[a]``."""
    perm = list(perm)
    n = g.n_atoms
    inv = [0] * n
    for old, new in enumerate(perm):
        inv[new] = old
    return MolecularGraph.build(
        [g.elements[inv[k]] for k in range(n)],
        g.coords[inv],
        [(perm[a], perm[b], o) for a, b, o in g.undirected_bonds()],
        g.name,
    )


# -- V2000 parsing -------------------------------------------------------------


def _field(line: str, lo: int, hi: int, lineno: int, what: str, conv):
    text = line[lo:hi].strip()
    if not text:
        raise SDFParseError(f"missing {what}", lineno)
    try:
        return conv(text)
    except ValueError:
        raise SDFParseError(f"bad {what} {text!r}", lineno) from None


def parse_sdf(text: str, first_lineno: int = 1) -> MolecularGraph:
    """Parse a single V2000 MOL block (an SDF record without its ``$$$$``)."""
    lines = text.splitlines()
    name = lines[0].strip() if lines else ""
    if len(lines) < 4:
        raise SDFParseError("truncated header: counts line missing", first_lineno + len(lines))
    counts = lines[3]
    ln = first_lineno + 3
    if "V3000" in counts:
        raise SDFParseError("V3000 blocks are not supported", ln)
    n_atoms = _field(counts, 0, 3, ln, "atom count in counts line", int)
    n_bonds = _field(counts, 3, 6, ln, "bond count in counts line", int)
    if n_atoms < 0 or n_bonds < 0:
        raise SDFParseError("negative count in counts line", ln)
    elements, coords = [], []
    for a in range(n_atoms):
        idx = 4 + a
        ln = first_lineno + idx
        if idx >= len(lines):
            raise SDFParseError(f"missing atom record {a + 1} of {n_atoms}", ln)
        line = lines[idx]
        xyz = [_field(line, lo, lo + 10, ln, f"{ax} coordinate", float) for lo, ax in ((0, "x"), (10, "y"), (20, "z"))]
        sym = line[31:34].strip()
        if not sym:
            raise SDFParseError("missing element symbol", ln)
        elements.append(sym)
        coords.append(xyz)
    bonds = []
    for b in range(n_bonds):
        idx = 4 + n_atoms + b
        ln = first_lineno + idx
        if idx >= len(lines):
            raise SDFParseError(f"missing bond record {b + 1} of {n_bonds}", ln)
        line = lines[idx]
        i = _field(line, 0, 3, ln, "first bond atom", int)
        j = _field(line, 3, 6, ln, "second bond atom", int)
        order = _field(line, 6, 9, ln, "bond type", int)
        if not (1 <= i <= n_atoms and 1 <= j <= n_atoms):
            raise SDFParseError(f"bond index out of range ({i}, {j}) for {n_atoms} atoms", ln)
        if i == j:
            raise SDFParseError(f"bond from atom {i} to itself", ln)
        if order not in BOND_ORDERS:
            raise SDFParseError(f"unsupported bond type {order}", ln)
        bonds.append((i - 1, j - 1, order))
    try:
        return MolecularGraph.build(elements, coords, bonds, name)
    except UnknownElementError as e:
        raise SDFParseError(str(e), first_lineno) from None
    except ValueError as e:
        raise SDFParseError(str(e), first_lineno + 3) from None


def iter_sdf(text: str) -> Iterator[tuple[int, MolecularGraph | SDFParseError]]:
    """Yield (record index, graph or error) for every record of a multi-record SDF."""
    block: list[str] = []
    start = 1
    rec = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip() == "$$$$":
            yield rec, _try_parse(block, start)
            rec += 1
            block, start = [], lineno + 1
        else:
            block.append(line)
    if any(l.strip() for l in block):
        yield rec, _try_parse(block, start)


def _try_parse(block: list[str], start: int):
    # properties after "M  END" are not needed
    for k, line in enumerate(block):
        if line.startswith("M  END"):
            block = block[:k]
            break
    try:
        return parse_sdf("\n".join(block), start)
    except SDFParseError as e:
        return e


def read_sdf(text: str) -> list[MolecularGraph]:
    """Parse every record; the first failure is raised."""
    out = []
    for _, item in iter_sdf(text):
        if isinstance(item, SDFParseError):
            raise item
        out.append(item)
    return out


def write_mol_block(g: MolecularGraph) -> str:
    """Minimal V2000 block; round-trips through :func:`parse_sdf`."""
    bonds = g.undirected_bonds()
    lines = [g.name, "  chiralmp", "", f"{g.n_atoms:3d}{len(bonds):3d}  0  0  0  0  0  0  0  0999 V2000"]
    for e, (x, y, z) in zip(g.elements, g.coords):
        lines.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {e:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    for i, j, o in bonds:
        lines.append(f"{i + 1:3d}{j + 1:3d}{o:3d}  0")
    lines.append("M  END")
    return "\n".join(lines)
