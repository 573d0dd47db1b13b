import numpy as np
import pytest

from congrobust.layout import GCellGrid, Layout, Netlist, synth_layout


def make_layout(W, H, coords, nets, cells=None):
    """Small hand-built layout; ``nets`` is a list of [(cell, ox, oy), ...]."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if cells is None:
        cells = [{} for _ in range(len(coords))]
    return Layout(Netlist.from_lists(cells, nets), coords, GCellGrid(W, H))


def random_layout(rng, n_cells=12, n_nets=8, W=4, H=4, offsets=True):
    coords = rng.uniform(0.05, 0.95, size=(n_cells, 2))
    nets = []
    for _ in range(n_nets):
        k = int(rng.integers(2, 5))
        cs = rng.choice(n_cells, size=k, replace=False)
        nets.append([(int(c), float(rng.uniform(-0.02, 0.02)) if offsets else 0.0,
                      float(rng.uniform(-0.02, 0.02)) if offsets else 0.0) for c in cs])
    return make_layout(W, H, coords, nets)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return synth_layout(3, n_cells=300, n_nets=420, W=16, H=16, n_macros=1)


@pytest.fixture(scope="session")
def smooth_layouts():
    from fdcheck import smooth_instances
    return smooth_instances(50)
