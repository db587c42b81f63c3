from pathlib import Path

import numpy as np
import pytest

from chiralmp.molgraph import MolecularGraph, read_sdf

DATA = Path(__file__).parent / "data"

TETRA = np.array([[1, 1, 1], [-1, -1, 1], [-1, 1, -1], [1, -1, -1]], dtype=float) / np.sqrt(3)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def methane():
    return read_sdf((DATA / "methane.sdf").read_text())[0]


@pytest.fixture
def path3():
    """A-B-C path with a kink so no neighbor is collinear."""
    return MolecularGraph.build(["C", "C", "O"], [[0, 0, 0], [1.5, 0, 0], [2.2, 1.2, 0.3]], [(0, 1, 1), (1, 2, 1)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
