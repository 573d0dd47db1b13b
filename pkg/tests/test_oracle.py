from itertools import product
from pathlib import Path

import numpy as np
import pytest

from congrobust import oracle, tensorio
from congrobust.layout import apply_perturbation, feasible_box, synth_layout

from conftest import make_layout, random_layout

GOLDEN = Path(__file__).parent / "golden"


def net_layout(W, H, pts):
    return make_layout(W, H, pts, [[(i, 0.0, 0.0) for i in range(len(pts))]])


def centre(W, H, gx, gy):
    return [(gx + 0.5) / W, (gy + 0.5) / H]


def test_pin_tiles_examples():
    lay = net_layout(4, 4, [[0.1, 0.1], [0.12, 0.2], [0.2, 0.05]])
    assert oracle.pin_tiles(lay, 0) == [(0, 0)]
    lay = net_layout(4, 4, [centre(4, 4, 0, 0), centre(4, 4, 2, 0)])
    assert oracle.pin_tiles(lay, 0) == [(0, 0), (2, 0)]
    lay = net_layout(4, 4, [[0.1, 0.1], [0.12, 0.2], [0.6, 0.6], [0.7, 0.7], [0.05, 0.05]])
    assert len(oracle.pin_tiles(lay, 0)) == 2


def test_single_tile_net_has_no_demand():
    lay = net_layout(4, 4, [[0.1, 0.1], [0.12, 0.2]])
    assert oracle.demand_map(lay, 1.0).total() == 0.0


def test_decompose_small():
    assert oracle.decompose_net([(1, 1)]) == []
    assert oracle.decompose_net([(0, 0), (2, 3)]) == [((0, 0), (2, 3))]
    segs = oracle.decompose_net([(0, 0), (1, 0), (3, 0)])
    assert sorted(tuple(sorted(s)) for s in segs) == [((0, 0), (1, 0)), ((1, 0), (3, 0))]


def prufer_trees(n):
    # every labelled spanning tree of K_n, as edge lists
    if n == 2:
        yield [(0, 1)]
        return
    for seq in product(range(n), repeat=n - 2):
        degree = [1] * n
        for v in seq:
            degree[v] += 1
        edges = []
        for v in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append((leaf, v))
            degree[leaf] -= 1
            degree[v] -= 1
        u, w = [i for i in range(n) if degree[i] == 1]
        edges.append((u, w))
        yield edges


def manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def test_mst_is_minimal_against_all_trees():
    r = np.random.default_rng(0)
    for _ in range(60):
        k = int(r.integers(2, 6))
        tiles = sorted({(int(a), int(b)) for a, b in r.integers(0, 6, size=(k, 2))})
        segs = oracle.decompose_net(tiles, H=6)
        assert len(segs) == len(tiles) - 1
        got = sum(manhattan(a, b) for a, b in segs)
        best = min(sum(manhattan(tiles[i], tiles[j]) for i, j in t) for t in prufer_trees(len(tiles))) \
            if len(tiles) > 1 else 0
        assert got == best


def test_route_straight():
    h, v = oracle.route_lshape(((0, 0), (2, 0)), 4, 4)
    assert h[0, 0] == 1.0 and h[1, 0] == 1.0
    assert h.sum() == 2.0 and v.sum() == 0.0


def test_route_diagonal_splits_over_both_ls():
    h, v = oracle.route_lshape(((0, 0), (1, 1)), 3, 3)
    # lower L: h(0,0) then v(1,0); upper L: v(0,0) then h(0,1)
    assert h[0, 0] == 0.5 and h[0, 1] == 0.5
    assert v[0, 0] == 0.5 and v[1, 0] == 0.5
    assert h.sum() + v.sum() == 2.0


def test_route_rejects_zero_length():
    with pytest.raises(ValueError):
        oracle.route_lshape(((1, 1), (1, 1)), 3, 3)


def test_empty_netlist():
    lay = make_layout(4, 4, [[0.1, 0.1]], [])
    dm = oracle.demand_map(lay, 1.0)
    assert dm.total() == 0.0 and not dm.bin_congestion.any()


def test_horizontal_net_stays_on_its_row():
    lay = net_layout(5, 5, [centre(5, 5, 0, 2), centre(5, 5, 4, 2)])
    dm = oracle.demand_map(lay, 1.0)
    assert not dm.v_demand.any()
    rows = np.nonzero(dm.h_demand)[1]
    assert set(rows.tolist()) == {2}


def test_total_demand_is_mst_wirelength():
    lay = synth_layout(4, n_cells=200, n_nets=300, W=8, H=8)
    dm = oracle.demand_map(lay, 1.0)
    total = 0
    for e in range(lay.netlist.n_nets):
        total += sum(manhattan(a, b) for a, b in oracle.decompose_net(oracle.pin_tiles(lay, e), H=8))
    assert dm.total() == pytest.approx(total, abs=1e-9)


def test_net_order_invariance():
    r = np.random.default_rng(5)
    lay = random_layout(r, n_cells=15, n_nets=12, W=6, H=6)
    nl = lay.netlist
    nets = []
    for e in r.permutation(nl.n_nets):
        s = nl.net_slice(int(e))
        pins = list(zip(nl.pin_cell[s].tolist(), nl.pin_ox[s].tolist(), nl.pin_oy[s].tolist()))
        nets.append([pins[i] for i in r.permutation(len(pins))])
    other = make_layout(6, 6, lay.coords, nets)
    a, b = oracle.demand_map(lay, 1.0), oracle.demand_map(other, 1.0)
    np.testing.assert_array_equal(a.h_demand, b.h_demand)
    np.testing.assert_array_equal(a.v_demand, b.v_demand)


def test_golden_seed7():
    dm = oracle.demand_map(synth_layout(7, n_cells=2000, n_nets=3000, W=32, H=32), capacity=1.0)
    np.testing.assert_array_equal(dm.h_demand, tensorio.load(GOLDEN / "oracle_seed7_h.ten"))
    np.testing.assert_array_equal(dm.v_demand, tensorio.load(GOLDEN / "oracle_seed7_v.ten"))


def test_capacity_and_label():
    assert oracle.capacity_from(np.array([0.0, 0.0])) == 1.0
    assert oracle.capacity_from(np.arange(11.0), 90) == pytest.approx(9.0)
    dm = oracle.DemandMap(np.zeros((1, 2)), np.zeros((2, 1)), np.array([[0.5, 0.7], [0.775, 1.0]]), 1.0)
    np.testing.assert_allclose(oracle.hotspot_label(dm), [[0.0, 0.0], [0.5, 1.0]])
    with pytest.raises(ValueError):
        oracle.hotspot_label(dm, 0.9, 0.8)
    with pytest.raises(ValueError):
        oracle.demand_map(net_layout(2, 2, [[0.1, 0.1], [0.9, 0.9]]), capacity=0.0)


def test_invariance_identity_and_crossing():
    lay = net_layout(4, 4, [[0.3, 0.3], [0.8, 0.8]])
    rep = oracle.invariance_check(lay, lay)
    assert rep.identical and rep.moved_tiles == 0
    moved = lay.with_coords(np.array([[0.55, 0.3], [0.8, 0.8]]))
    rep = oracle.invariance_check(lay, moved)
    assert not rep.identical and rep.moved_tiles == 1
    assert str(rep) == "identical=false moved_tiles=1"


def test_invariance_under_feasible_moves():
    r = np.random.default_rng(9)
    for _ in range(20):
        lay = random_layout(r, W=int(r.integers(2, 7)), H=int(r.integers(2, 7)))
        box = feasible_box(lay)
        delta = box.lower + r.random(box.lower.shape) * (box.upper - box.lower)
        new = apply_perturbation(lay, delta)
        assert oracle.invariance_check(lay, new).identical
        a, b = oracle.demand_map(lay, 1.0), oracle.demand_map(new, 1.0)
        assert np.array_equal(a.h_demand, b.h_demand) and np.array_equal(a.v_demand, b.v_demand)


def test_invariance_needs_same_netlist():
    a = net_layout(4, 4, [[0.3, 0.3], [0.8, 0.8]])
    b = net_layout(4, 4, [[0.3, 0.3], [0.8, 0.8], [0.1, 0.1]])
    with pytest.raises(ValueError):
        oracle.invariance_check(a, b)
