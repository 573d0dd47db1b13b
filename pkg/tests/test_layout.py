import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from congrobust.layout import (GCellGrid, InvalidPerturbation, Layout, LayoutError, apply_perturbation,
                               feasible_box, gcell_of, synth_layout, tile_changes)
from congrobust import oracle

from conftest import make_layout, random_layout


def one_cell(W, H, x, y):
    # two cells so the single net is legal; cell 1 parked in the far corner
    return make_layout(W, H, [[x, y], [0.99, 0.99]], [[(0, 0.0, 0.0), (1, 0.0, 0.0)]])


@pytest.mark.parametrize("xy,tile", [((0.0, 0.0), (0, 0)), ((1.0, 1.0), (3, 3)), ((0.26, 0.74), (1, 2))])
def test_gcell_of_examples(xy, tile):
    assert gcell_of(one_cell(4, 4, *xy), 0) == tile


def test_gcell_of_out_of_range():
    with pytest.raises(IndexError):
        gcell_of(one_cell(4, 4, 0.1, 0.1), 5)


def test_box_single_tile_grid():
    lay = one_cell(1, 1, 0.3, 0.6)
    box = feasible_box(lay)
    np.testing.assert_allclose(box.lower[0], [-0.3, -0.6])
    np.testing.assert_allclose(box.upper[0], [0.7, 0.4])


def test_box_lower_left_corner():
    lay = one_cell(4, 4, 0.25, 0.5)
    box = feasible_box(lay)
    assert np.all(box.lower[0] == 0.0)
    np.testing.assert_allclose(box.upper[0], [0.25, 0.25], atol=1e-8)


def test_box_hand_case():
    # tile [0.25, 0.5) x [0.5, 1.0] only arises on a 4 x 2 grid
    lay = one_cell(4, 2, 0.3, 0.6)
    box = feasible_box(lay)
    np.testing.assert_allclose(box.lower[0], [-0.05, -0.1], atol=1e-8)
    np.testing.assert_allclose(box.upper[0], [0.2, 0.4], atol=1e-8)


def test_box_respects_pins():
    # pin 0.1 to the right of the cell: the cell can only move until the pin hits the tile edge
    lay = make_layout(2, 2, [[0.1, 0.1], [0.9, 0.9]], [[(0, 0.1, 0.0), (1, 0.0, 0.0)]])
    box = feasible_box(lay)
    assert box.upper[0, 0] == pytest.approx(0.3, abs=1e-8)
    assert box.lower[0, 0] == pytest.approx(-0.1, abs=1e-8)


def test_macro_box_is_empty():
    lay = make_layout(2, 2, [[0.1, 0.1], [0.6, 0.6]], [[(0, 0.0, 0.0), (1, 0.0, 0.0)]],
                      cells=[{"macro": True, "w": 0.2, "h": 0.2}, {}])
    box = feasible_box(lay)
    assert np.all(box.lower[0] == 0) and np.all(box.upper[0] == 0)


def test_apply_zero_is_identity(rng):
    lay = random_layout(rng)
    new = apply_perturbation(lay, np.zeros((lay.n_cells, 2)))
    assert np.array_equal(new.coords, lay.coords)
    assert new.digest() == lay.digest()


def test_apply_rejects_macro_move():
    lay = make_layout(2, 2, [[0.1, 0.1], [0.6, 0.6]], [[(0, 0.0, 0.0), (1, 0.0, 0.0)]],
                      cells=[{"macro": True, "w": 0.2, "h": 0.2}, {}])
    with pytest.raises(InvalidPerturbation):
        apply_perturbation(lay, np.array([[0.01, 0.0], [0.0, 0.0]]))


def test_apply_rejects_tile_crossing():
    lay = one_cell(2, 2, 0.45, 0.2)
    with pytest.raises(InvalidPerturbation):
        apply_perturbation(lay, np.array([[0.1, 0.0], [0.0, 0.0]]))
    # non-strict mode lets it through
    assert apply_perturbation(lay, np.array([[0.1, 0.0], [0.0, 0.0]]), strict=False).coords[0, 0] == pytest.approx(0.55)


def test_apply_rejects_budget_overrun(rng):
    lay = random_layout(rng)
    box = feasible_box(lay)
    delta = 0.5 * box.upper
    with pytest.raises(InvalidPerturbation):
        apply_perturbation(lay, delta, eps0=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_feasible_delta_keeps_tiles(seed, t):
    r = np.random.default_rng(seed)
    lay = random_layout(r, W=int(r.integers(1, 6)), H=int(r.integers(1, 6)))
    box = feasible_box(lay)
    u = r.random((lay.n_cells, 2))
    delta = box.lower + u * (box.upper - box.lower)
    delta[r.random(lay.n_cells) < t] = 0.0
    new = apply_perturbation(lay, delta)
    assert len(tile_changes(lay, new)) == 0
    assert all(gcell_of(new, i) == gcell_of(lay, i) for i in range(lay.n_cells))
    # the corners of the box are admissible too
    apply_perturbation(lay, box.lower)
    apply_perturbation(lay, box.upper)


def test_layout_validation():
    with pytest.raises(LayoutError):
        one_cell(2, 2, 1.2, 0.5)
    with pytest.raises(LayoutError):
        make_layout(2, 2, [[0.1, 0.1], [0.2, 0.2]], [[(0, 0.0, 0.0)]])
    with pytest.raises(LayoutError):
        GCellGrid(0, 3)


def test_roundtrip(tmp_path, small_synth):
    p = tmp_path / "lay.json"
    small_synth.save(p)
    back = Layout.load(p)
    assert back.digest() == small_synth.digest()
    assert np.array_equal(back.coords, small_synth.coords)


def test_load_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"grid": {"W": 2,\n "H": }')
    with pytest.raises(LayoutError, match="line 2"):
        Layout.load(p)


def test_synth_deterministic():
    a = synth_layout(11, n_cells=200, n_nets=300, W=8, H=8, n_macros=1)
    b = synth_layout(11, n_cells=200, n_nets=300, W=8, H=8, n_macros=1)
    assert a.dumps() == b.dumps()
    assert synth_layout(12, n_cells=200, n_nets=300, W=8, H=8).digest() != a.digest()


def test_synth_no_macros():
    lay = synth_layout(5, n_cells=200, n_nets=300, W=8, H=8, n_macros=0)
    assert not lay.netlist.is_macro.any()


def test_synth_macros_do_not_overlap_cells():
    lay = synth_layout(5, n_cells=400, n_nets=500, W=16, H=16, n_macros=2)
    nl = lay.netlist
    assert nl.is_macro.sum() == 2
    for m in np.nonzero(nl.is_macro)[0]:
        mx, my = lay.coords[m]
        std = ~nl.is_macro
        x, y = lay.coords[std, 0], lay.coords[std, 1]
        w, h = nl.cell_w[std], nl.cell_h[std]
        hit = (x < mx + nl.cell_w[m]) & (mx < x + w) & (y < my + nl.cell_h[m]) & (my < y + h)
        assert not hit.any()


@pytest.mark.slow
def test_synth_has_hotspot():
    lay = synth_layout(7, n_cells=2000, n_nets=3000, W=32, H=32)
    dm = oracle.demand_map(lay)
    edge = oracle.incident_mean(dm.h_demand, dm.v_demand, 32, 32)
    assert edge.max() > 3 * edge.mean()
