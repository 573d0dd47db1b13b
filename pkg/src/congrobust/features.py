"""RUDY / PinRUDY / MacroRegion feature maps and their pullback onto cell coordinates.

Maps are W x H arrays indexed ``[gx, gy]``; the stacked feature map is
W x H x 3.  Net bounding boxes are rasterized by fractional area overlap, so
every channel except MacroRegion is piecewise smooth in the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .layout import Layout

# Fixed per-channel divisors applied by feature_map(scaled=True).
CHANNEL_SCALE = np.array([256.0, 1024.0, 1.0])


@dataclass(frozen=True, eq=False)
class FeatureMap:
    rudy: np.ndarray
    pin_rudy: np.ndarray
    macro_region: np.ndarray
    layout_hash: str
    scaled: bool = True

    @property
    def shape(self):
        return self.rudy.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.rudy, self.pin_rudy, self.macro_region], axis=-1)


@dataclass(frozen=True)
class NetBBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    # pin indices local to the net
    arg_x_min: int
    arg_x_max: int
    arg_y_min: int
    arg_y_max: int


def net_bbox(layout: Layout, net: int) -> NetBBox:
    s = layout.netlist.net_slice(net)
    px, py = layout.pin_positions()
    px = np.ascontiguousarray(px[s])
    py = np.ascontiguousarray(py[s])
    lx, hx, ly, hy, alx, ahx, aly, ahy = kernels.net_bboxes(px, py, np.array([0, len(px)], dtype=np.int64))
    return NetBBox(float(lx[0]), float(hx[0]), float(ly[0]), float(hy[0]),
                   int(alx[0]), int(ahx[0]), int(aly[0]), int(ahy[0]))


def _pins(layout: Layout, coords=None):
    px, py = layout.pin_positions(coords)
    return np.ascontiguousarray(px), np.ascontiguousarray(py)


def rudy_map(layout: Layout) -> np.ndarray:
    px, py = _pins(layout)
    return kernels.rudy_maps(px, py, layout.netlist.net_ptr, layout.grid.W, layout.grid.H)[0]


def pinrudy_map(layout: Layout) -> np.ndarray:
    px, py = _pins(layout)
    return kernels.rudy_maps(px, py, layout.netlist.net_ptr, layout.grid.W, layout.grid.H)[1]


def macro_map(layout: Layout) -> np.ndarray:
    """Fraction of each tile covered by the union of macro rectangles."""
    W, H = layout.grid.W, layout.grid.H
    nl = layout.netlist
    idx = np.nonzero(nl.is_macro)[0]
    out = np.zeros((W, H))
    if len(idx) == 0:
        return out
    x0 = layout.coords[idx, 0]
    y0 = layout.coords[idx, 1]
    x1 = np.minimum(x0 + nl.cell_w[idx], 1.0)
    y1 = np.minimum(y0 + nl.cell_h[idx], 1.0)
    # exact union area via the compressed grid of all rectangle and tile edges
    xs = np.unique(np.concatenate([x0, x1, np.arange(W + 1) / W]))
    ys = np.unique(np.concatenate([y0, y1, np.arange(H + 1) / H]))
    xm = 0.5 * (xs[:-1] + xs[1:])
    ym = 0.5 * (ys[:-1] + ys[1:])
    inside = np.zeros((len(xm), len(ym)), dtype=bool)
    for a, b, c, d in zip(x0, x1, y0, y1):
        inside |= ((xm >= a) & (xm < b))[:, None] & ((ym >= c) & (ym < d))[None, :]
    area = np.diff(xs)[:, None] * np.diff(ys)[None, :] * inside
    gx = np.minimum((xm * W).astype(np.int64), W - 1)
    gy = np.minimum((ym * H).astype(np.int64), H - 1)
    np.add.at(out, (gx[:, None].repeat(len(ym), 1), gy[None, :].repeat(len(xm), 0)), area)
    return np.clip(out * W * H, 0.0, 1.0)


def feature_map(layout: Layout, scaled: bool = True) -> FeatureMap:
    px, py = _pins(layout)
    rudy, pin, _ = kernels.rudy_maps(px, py, layout.netlist.net_ptr, layout.grid.W, layout.grid.H)
    mac = macro_map(layout)
    if scaled:
        rudy = rudy / CHANNEL_SCALE[0]
        pin = pin / CHANNEL_SCALE[1]
        mac = mac / CHANNEL_SCALE[2]
    return FeatureMap(rudy, pin, mac, layout.digest(), scaled)


def feature_vjp(layout: Layout, gbar, scaled: bool = True) -> np.ndarray:
    """Pull a W x H x 3 cotangent on the feature map back to an n x 2 coordinate gradient.

    Only the extremal pins recorded for each net bounding box receive the
    bounding-box edge gradient; MacroRegion contributes nothing.
    """
    return FeatureEngine(layout, scaled).vjp(layout.coords, gbar)


class FeatureEngine:
    """Feature maps and their VJP for one netlist at many coordinate settings."""

    def __init__(self, layout: Layout, scaled: bool = True):
        self.layout = layout
        nl = layout.netlist
        self.W, self.H = layout.grid.W, layout.grid.H
        self.net_ptr = nl.net_ptr
        self.pin_cell = nl.pin_cell
        self.pin_ox = nl.pin_ox
        self.pin_oy = nl.pin_oy
        self.n_cells = nl.n_cells
        self.scale = CHANNEL_SCALE if scaled else np.ones(3)
        # macros never move, so their channel is computed once
        self.macro = macro_map(layout) / self.scale[2]

    def _pins(self, coords):
        return (np.ascontiguousarray(coords[self.pin_cell, 0] + self.pin_ox),
                np.ascontiguousarray(coords[self.pin_cell, 1] + self.pin_oy))

    def maps(self, coords) -> np.ndarray:
        px, py = self._pins(coords)
        rudy, pin, _ = kernels.rudy_maps(px, py, self.net_ptr, self.W, self.H)
        return np.stack([rudy / self.scale[0], pin / self.scale[1], self.macro], axis=-1)

    def vjp(self, coords, gbar) -> np.ndarray:
        gbar = np.asarray(gbar, dtype=np.float64)
        if gbar.shape != (self.W, self.H, 3):
            raise ValueError(f"cotangent shape {gbar.shape} != {(self.W, self.H, 3)}")
        px, py = self._pins(coords)
        g_r = np.ascontiguousarray(gbar[:, :, 0]) / self.scale[0]
        g_p = np.ascontiguousarray(gbar[:, :, 1]) / self.scale[1]
        gpx, gpy = kernels.rudy_vjp(px, py, self.net_ptr, self.W, self.H, g_r, g_p)
        out = np.empty((self.n_cells, 2))
        out[:, 0] = np.bincount(self.pin_cell, weights=gpx, minlength=self.n_cells)
        out[:, 1] = np.bincount(self.pin_cell, weights=gpy, minlength=self.n_cells)
        return out
