"""Tile-level global-routing stand-in.

Each net is decomposed into a Manhattan MST over its pin tiles and every MST
segment is routed as an even split over its two L-shaped paths.  Only tile
indices enter the computation, so any move that keeps cells and pins inside
their G-Cells leaves the demand map bit-for-bit unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import _numpy as _ref
from .layout import Layout, tile_changes


@dataclass(frozen=True, eq=False)
class DemandMap:
    h_demand: np.ndarray      # (W-1) x H, edge (gx, gy)-(gx+1, gy)
    v_demand: np.ndarray      # W x (H-1), edge (gx, gy)-(gx, gy+1)
    bin_congestion: np.ndarray
    capacity: float

    def edge_values(self) -> np.ndarray:
        return np.concatenate([self.h_demand.ravel(), self.v_demand.ravel()])

    def total(self) -> float:
        return float(self.h_demand.sum() + self.v_demand.sum())


@dataclass(frozen=True)
class InvarianceReport:
    identical: bool
    moved_tiles: int
    cells: tuple = ()

    def __str__(self):
        return f"identical={'true' if self.identical else 'false'} moved_tiles={self.moved_tiles}"


def pin_tiles(layout: Layout, net: int) -> list[tuple[int, int]]:
    """Distinct G-Cells holding the pins of ``net``, in row-major (gx-major) order."""
    s = layout.netlist.net_slice(net)
    gx, gy = layout.pin_tiles()
    H = layout.grid.H
    keys = np.unique(gx[s] * H + gy[s])
    return [(int(k // H), int(k % H)) for k in keys]


def decompose_net(tiles, H: int | None = None) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Prim MST over tiles under the Manhattan metric, as (parent, child) tile pairs."""
    tiles = sorted(set((int(a), int(b)) for a, b in tiles))
    if len(tiles) < 2:
        return []
    H = (max(t[1] for t in tiles) + 1) if H is None else H
    keys = np.array([a * H + b for a, b in tiles], dtype=np.int64)
    return [((a // H, a % H), (b // H, b % H)) for a, b in _ref.mst_segments(keys, H)]


def route_lshape(segment, W: int, H: int):
    """Edge demand (h, v) contributed by one segment between distinct tiles."""
    (ax, ay), (bx, by) = segment
    if (ax, ay) == (bx, by):
        raise ValueError("route_lshape needs two distinct tiles")
    h = np.zeros((max(W - 1, 0), H))
    v = np.zeros((W, max(H - 1, 0)))
    _ref.add_lshape(h, v, ax, ay, bx, by)
    return h, v


def _edge_demand(layout: Layout):
    gx, gy = layout.pin_tiles()
    return kernels.route_demand(gx, gy, layout.netlist.net_ptr, layout.grid.W, layout.grid.H)


def incident_mean(h: np.ndarray, v: np.ndarray, W: int, H: int) -> np.ndarray:
    """Mean demand over the grid edges incident to each tile."""
    total = np.zeros((W, H))
    count = np.zeros((W, H))
    if W > 1:
        total[:-1, :] += h
        total[1:, :] += h
        count[:-1, :] += 1
        count[1:, :] += 1
    if H > 1:
        total[:, :-1] += v
        total[:, 1:] += v
        count[:, :-1] += 1
        count[:, 1:] += 1
    return np.divide(total, count, out=np.zeros((W, H)), where=count > 0)


def capacity_from(edge_values, q: float = 90.0) -> float:
    """Uniform edge capacity = q-th percentile of observed edge demand (floored at 1 wire)."""
    vals = np.concatenate([np.ravel(e) for e in edge_values]) if isinstance(edge_values, (list, tuple)) \
        else np.ravel(edge_values)
    if vals.size == 0:
        return 1.0
    return float(max(np.percentile(vals, q), 1.0))


def demand_map(layout: Layout, capacity: float | None = None) -> DemandMap:
    """Route all nets; ``capacity=None`` uses this layout's own 90th percentile edge demand."""
    h, v = _edge_demand(layout)
    if capacity is None:
        capacity = capacity_from(np.concatenate([h.ravel(), v.ravel()]))
    if not capacity > 0:
        raise ValueError("capacity must be positive")
    W, H = layout.grid.W, layout.grid.H
    cong = np.clip(incident_mean(h, v, W, H) / capacity, 0.0, 1.0)
    return DemandMap(h, v, cong, float(capacity))


LABEL_RAMP = (0.7, 0.85)


def hotspot_label(dm: DemandMap, lo: float = LABEL_RAMP[0], hi: float = LABEL_RAMP[1]) -> np.ndarray:
    """Training target in [0, 1]: 0 below ``lo`` x capacity, linear up to 1 at ``hi`` x capacity."""
    if not 0.0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got ({lo}, {hi})")
    return np.clip((dm.bin_congestion - lo) / (hi - lo), 0.0, 1.0)


def invariance_check(a: Layout, b: Layout) -> InvarianceReport:
    """Compare the tile of every cell and pin of two placements of the same netlist."""
    if a.netlist is not b.netlist and not _same_netlist(a, b):
        raise ValueError("invariance_check needs two placements of the same netlist")
    if a.grid != b.grid:
        raise ValueError("grids differ")
    changed = tile_changes(a, b)
    return InvarianceReport(len(changed) == 0, int(len(changed)), tuple(int(c) for c in changed))


def _same_netlist(a: Layout, b: Layout) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.netlist.arrays(), b.netlist.arrays()))
