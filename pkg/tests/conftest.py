import numpy as np
import pytest
import torch

from bevkd.grid import GridConfig, LabelTable, VoxelGrid
from bevkd.synthetic import WorldConfig, generate_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def table():
    return LabelTable()


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig()


@pytest.fixture(scope="session")
def scenes(small_world):
    return [generate_scene(s, small_world) for s in range(4)]


def random_labels(rng, dims, p_occ=0.3, n_labels=7):
    """Random label volume with a controllable occupied fraction."""
    occ = rng.random(dims) < p_occ
    lab = rng.integers(1, n_labels, size=dims)
    return np.where(occ, lab, 0).astype(np.uint8)


def random_grid(rng, grid=None, table=None, p_occ=0.3):
    grid = grid or GridConfig.tiny()
    table = table or LabelTable()
    return VoxelGrid(random_labels(rng, grid.dims, p_occ, table.n_labels), grid, table)
