"""Placement data model: netlist, G-Cell grid, per-cell move boxes, synthetic benchmarks.

Coordinates are normalized to the unit die ``[0, 1]^2``.  A cell's coordinate is
its lower-left corner; pins sit at fixed offsets from it and move rigidly with
the cell.  Tiles are half-open, ``[g/W, (g+1)/W)``, with the last tile closed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels

# Tile edges (die edges included) are kept this far away from the reachable coordinates so
# that floor(x * W) cannot round a boundary point into the neighbouring tile.
BOX_MARGIN = 1e-9

# Tolerance for box checks on deltas that went through (z - x) round trips.
BOX_TOL = 1e-12


class LayoutError(ValueError):
    """Malformed or infeasible layout data."""


class InvalidPerturbation(ValueError):
    """A perturbation that would move a macro, leave a G-Cell or exceed the budget."""

    def __init__(self, message: str, cells):
        self.cells = np.asarray(cells, dtype=np.int64)
        shown = ", ".join(str(c) for c in self.cells[:10])
        more = "" if len(self.cells) <= 10 else f" (+{len(self.cells) - 10} more)"
        super().__init__(f"{message}: cells [{shown}]{more}")


@dataclass(frozen=True)
class GCellGrid:
    """Uniform W x H tiling of the unit square."""

    W: int
    H: int

    def __post_init__(self):
        if int(self.W) != self.W or int(self.H) != self.H or self.W < 1 or self.H < 1:
            raise LayoutError(f"grid dimensions must be positive integers, got {self.W}x{self.H}")
        object.__setattr__(self, "W", int(self.W))
        object.__setattr__(self, "H", int(self.H))

    @property
    def pitch_x(self) -> float:
        return 1.0 / self.W

    @property
    def pitch_y(self) -> float:
        return 1.0 / self.H

    def tile_x(self, x):
        return kernels.tile_index(np.ascontiguousarray(np.atleast_1d(x), dtype=np.float64), self.W)

    def tile_y(self, y):
        return kernels.tile_index(np.ascontiguousarray(np.atleast_1d(y), dtype=np.float64), self.H)

    def tile_bounds(self, gx, gy):
        """Reachable [lo, hi] interval of tiles (gx, gy) with the interior margin applied."""
        gx = np.asarray(gx)
        gy = np.asarray(gy)
        # the margin also applies at the die edge, where rounding could otherwise leave [0, 1]
        lo_x = gx / self.W + BOX_MARGIN
        hi_x = (gx + 1) / self.W - BOX_MARGIN
        lo_y = gy / self.H + BOX_MARGIN
        hi_y = (gy + 1) / self.H - BOX_MARGIN
        return lo_x, hi_x, lo_y, hi_y


@dataclass(frozen=True, eq=False)
class Netlist:
    """Cells and nets in compressed form.

    Pins of net ``e`` occupy ``pin_*[net_ptr[e]:net_ptr[e + 1]]``.
    """

    cell_w: np.ndarray
    cell_h: np.ndarray
    is_macro: np.ndarray
    net_ptr: np.ndarray
    pin_cell: np.ndarray
    pin_ox: np.ndarray
    pin_oy: np.ndarray

    def __post_init__(self):
        for name, dt in (("cell_w", np.float64), ("cell_h", np.float64), ("is_macro", np.bool_),
                         ("net_ptr", np.int64), ("pin_cell", np.int64),
                         ("pin_ox", np.float64), ("pin_oy", np.float64)):
            arr = np.array(getattr(self, name), dtype=dt)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @classmethod
    def from_lists(cls, cells, nets) -> "Netlist":
        """Build from ``cells=[{w, h, macro}]`` and ``nets=[[(cell, ox, oy), ...], ...]``."""
        w = [float(c.get("w", 0.0)) for c in cells]
        h = [float(c.get("h", 0.0)) for c in cells]
        mac = [bool(c.get("macro", False)) for c in cells]
        ptr = [0]
        pc, ox, oy = [], [], []
        for net in nets:
            for pin in net:
                if isinstance(pin, dict):
                    pc.append(int(pin["cell"]))
                    ox.append(float(pin.get("ox", 0.0)))
                    oy.append(float(pin.get("oy", 0.0)))
                else:
                    c, x, y = pin
                    pc.append(int(c))
                    ox.append(float(x))
                    oy.append(float(y))
            ptr.append(len(pc))
        return cls(np.array(w), np.array(h), np.array(mac, dtype=bool), np.array(ptr, dtype=np.int64),
                   np.array(pc, dtype=np.int64), np.array(ox), np.array(oy))

    @property
    def n_cells(self) -> int:
        return len(self.cell_w)

    @property
    def n_nets(self) -> int:
        return len(self.net_ptr) - 1

    @property
    def n_pins(self) -> int:
        return len(self.pin_cell)

    @property
    def pin_net(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nets, dtype=np.int64), np.diff(self.net_ptr))

    def net_slice(self, e: int) -> slice:
        if not 0 <= e < self.n_nets:
            raise IndexError(f"net {e} out of range [0, {self.n_nets})")
        return slice(int(self.net_ptr[e]), int(self.net_ptr[e + 1]))

    def cell_degree(self) -> np.ndarray:
        """Number of distinct nets touching each cell."""
        pairs = np.unique(np.stack([self.pin_net, self.pin_cell]), axis=1) if self.n_pins else np.zeros((2, 0), int)
        return np.bincount(pairs[1], minlength=self.n_cells).astype(np.float64)

    def cell_pin_count(self) -> np.ndarray:
        return np.bincount(self.pin_cell, minlength=self.n_cells).astype(np.float64)

    def validate(self):
        n = self.n_cells
        if not (len(self.cell_h) == n and len(self.is_macro) == n):
            raise LayoutError("cell arrays disagree in length")
        if len(self.net_ptr) < 1 or self.net_ptr[0] != 0 or self.net_ptr[-1] != self.n_pins:
            raise LayoutError("net_ptr must start at 0 and end at the pin count")
        if not (len(self.pin_ox) == len(self.pin_oy) == self.n_pins):
            raise LayoutError("pin arrays disagree in length")
        sizes = np.diff(self.net_ptr)
        if np.any(sizes < 2):
            raise LayoutError(f"net {int(np.argmax(sizes < 2))} has fewer than 2 pins")
        if self.n_pins and (self.pin_cell.min() < 0 or self.pin_cell.max() >= n):
            raise LayoutError("pin references a cell index out of range")
        if np.any(self.cell_w < 0) or np.any(self.cell_h < 0):
            raise LayoutError("negative cell extent")
        if self.n_pins:
            rec = np.stack([self.pin_net.astype(np.float64), self.pin_cell.astype(np.float64),
                            self.pin_ox, self.pin_oy], axis=1)
            if len(np.unique(rec, axis=0)) != self.n_pins:
                raise LayoutError("a net lists the same (cell, offset) pin twice")

    def arrays(self):
        return (self.cell_w, self.cell_h, self.is_macro, self.net_ptr, self.pin_cell, self.pin_ox, self.pin_oy)


@dataclass(frozen=True, eq=False)
class Layout:
    """A netlist with cell coordinates on a G-Cell grid. Immutable."""

    netlist: Netlist
    coords: np.ndarray
    grid: GCellGrid
    _digest: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64).reshape(-1, 2) if np.size(self.coords) else np.zeros((0, 2))
        if c.shape != (self.netlist.n_cells, 2):
            raise LayoutError(f"coords shape {c.shape} does not match {self.netlist.n_cells} cells")
        if not np.all(np.isfinite(c)):
            raise LayoutError("non-finite coordinate")
        bad = np.nonzero(np.any((c < 0) | (c > 1), axis=1))[0]
        if len(bad):
            raise LayoutError(f"cell {int(bad[0])} lies outside the unit die")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        px, py = self.pin_positions()
        out = np.nonzero((px < 0) | (px > 1) | (py < 0) | (py > 1))[0]
        if len(out):
            raise LayoutError(f"pin {int(out[0])} lies outside the unit die")

    @property
    def n_cells(self) -> int:
        return self.netlist.n_cells

    def pin_positions(self, coords=None):
        c = self.coords if coords is None else coords
        nl = self.netlist
        return c[nl.pin_cell, 0] + nl.pin_ox, c[nl.pin_cell, 1] + nl.pin_oy

    def with_coords(self, coords) -> "Layout":
        return Layout(self.netlist, coords, self.grid)

    def cell_tiles(self, coords=None):
        c = self.coords if coords is None else coords
        return self.grid.tile_x(c[:, 0]), self.grid.tile_y(c[:, 1])

    def pin_tiles(self, coords=None):
        px, py = self.pin_positions(coords)
        return self.grid.tile_x(px), self.grid.tile_y(py)

    def digest(self) -> str:
        """Content hash of netlist, grid and coordinates."""
        if not self._digest:
            h = hashlib.sha256()
            h.update(np.array([self.grid.W, self.grid.H], dtype=np.int64).tobytes())
            for a in self.netlist.arrays():
                h.update(np.ascontiguousarray(a).tobytes())
            h.update(self.coords.tobytes())
            self._digest.append(h.hexdigest())
        return self._digest[0]

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        nl = self.netlist
        cells = [{"w": float(w), "h": float(h), "macro": bool(m)}
                 for w, h, m in zip(nl.cell_w, nl.cell_h, nl.is_macro)]
        nets = []
        for e in range(nl.n_nets):
            s = nl.net_slice(e)
            nets.append([{"cell": int(c), "ox": float(x), "oy": float(y)}
                         for c, x, y in zip(nl.pin_cell[s], nl.pin_ox[s], nl.pin_oy[s])])
        return {
            "grid": {"W": self.grid.W, "H": self.grid.H},
            "cells": cells,
            "coords": [[float(x), float(y)] for x, y in self.coords],
            "nets": nets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        try:
            grid = GCellGrid(int(d["grid"]["W"]), int(d["grid"]["H"]))
            netlist = Netlist.from_lists(d["cells"], d["nets"])
            coords = np.array(d["coords"], dtype=np.float64).reshape(-1, 2) if d["coords"] else np.zeros((0, 2))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, LayoutError):
                raise
            raise LayoutError(f"malformed layout document: {exc!r}") from exc
        return cls(netlist, coords, grid)

    def dumps(self) -> str:
        # json writes floats with repr(), the shortest string that round-trips exactly
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "Layout":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LayoutError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True, eq=False)
class FeasibleBox:
    """Per-cell offset bounds ``lower <= delta <= upper`` (both n x 2)."""

    lower: np.ndarray
    upper: np.ndarray

    def contains(self, delta, tol: float = BOX_TOL) -> np.ndarray:
        """Boolean mask of rows of ``delta`` inside the box."""
        delta = np.asarray(delta)
        return np.all((delta >= self.lower - tol) & (delta <= self.upper + tol), axis=1)


def gcell_of(layout: Layout, cell: int) -> tuple[int, int]:
    if not 0 <= cell < layout.n_cells:
        raise IndexError(f"cell {cell} out of range [0, {layout.n_cells})")
    x, y = layout.coords[cell]
    return int(layout.grid.tile_x(x)[0]), int(layout.grid.tile_y(y)[0])


def feasible_box(layout: Layout) -> FeasibleBox:
    """Offsets that keep each cell, and every one of its pins, inside its current G-Cell.

    Macros get an empty box.
    """
    grid = layout.grid
    c = layout.coords
    nl = layout.netlist
    gx, gy = layout.cell_tiles()
    lo_x, hi_x, lo_y, hi_y = grid.tile_bounds(gx, gy)
    lower = np.stack([lo_x - c[:, 0], lo_y - c[:, 1]], axis=1)
    upper = np.stack([hi_x - c[:, 0], hi_y - c[:, 1]], axis=1)

    if nl.n_pins:
        px, py = layout.pin_positions()
        pgx, pgy = layout.pin_tiles()
        plo_x, phi_x, plo_y, phi_y = grid.tile_bounds(pgx, pgy)
        np.maximum.at(lower[:, 0], nl.pin_cell, plo_x - px)
        np.maximum.at(lower[:, 1], nl.pin_cell, plo_y - py)
        np.minimum.at(upper[:, 0], nl.pin_cell, phi_x - px)
        np.minimum.at(upper[:, 1], nl.pin_cell, phi_y - py)

    # unit-die bounds, then make sure the zero move stays admissible
    lower = np.maximum(lower, -c)
    upper = np.minimum(upper, 1.0 - c)
    lower = np.minimum(lower, 0.0)
    upper = np.maximum(upper, 0.0)
    lower[nl.is_macro] = 0.0
    upper[nl.is_macro] = 0.0
    lower.setflags(write=False)
    upper.setflags(write=False)
    return FeasibleBox(lower, upper)


def apply_perturbation(layout: Layout, delta, *, eps0: int | None = None, strict: bool = True,
                       box: FeasibleBox | None = None) -> Layout:
    """Return a copy of ``layout`` with ``coords + delta``.

    ``delta`` may be an (n, 2) array or any object with ``delta`` and ``eps0``
    attributes.  In strict mode the move is validated against macros, the
    feasible box, the moved-cell budget and the resulting tile assignment.
    """
    if hasattr(delta, "delta"):
        if eps0 is None:
            eps0 = getattr(delta, "eps0", None)
        delta = delta.delta
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != layout.coords.shape:
        raise ValueError(f"delta shape {delta.shape} != coords shape {layout.coords.shape}")
    if not np.all(np.isfinite(delta)):
        raise InvalidPerturbation("non-finite delta", np.nonzero(~np.all(np.isfinite(delta), axis=1))[0])
    if strict:
        moved = np.any(delta != 0.0, axis=1)
        bad = np.nonzero(moved & layout.netlist.is_macro)[0]
        if len(bad):
            raise InvalidPerturbation("macros are immovable", bad)
        box = feasible_box(layout) if box is None else box
        bad = np.nonzero(~box.contains(delta))[0]
        if len(bad):
            raise InvalidPerturbation("delta leaves the feasible box", bad)
        if eps0 is not None and moved.sum() > eps0:
            raise InvalidPerturbation(f"{int(moved.sum())} cells moved, budget is {eps0}", np.nonzero(moved)[0])
    new = layout.with_coords(layout.coords + delta)
    if strict:
        changed = tile_changes(layout, new)
        if len(changed):
            raise InvalidPerturbation("cell or pin changed G-Cell", changed)
    return new


def tile_changes(a: Layout, b: Layout) -> np.ndarray:
    """Indices of cells whose own tile or any of whose pins' tiles differ between a and b."""
    ax, ay = a.cell_tiles()
    bx, by = b.cell_tiles()
    changed = (ax != bx) | (ay != by)
    if a.netlist.n_pins:
        pax, pay = a.pin_tiles()
        pbx, pby = b.pin_tiles()
        pin_changed = (pax != pbx) | (pay != pby)
        changed |= np.bincount(a.netlist.pin_cell, weights=pin_changed, minlength=a.n_cells) > 0
    return np.nonzero(changed)[0]


# -- synthetic benchmark --------------------------------------------------

DEFAULT_DEGREE_PROBS = (0.45, 0.30, 0.12, 0.08, 0.05)  # degrees 2..6


def _place_macros(rng, k, size_range, retries=200):
    rects = []
    for m in range(k):
        for _ in range(retries):
            w, h = rng.uniform(size_range[0], size_range[1], size=2)
            x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
            if all(x + w <= rx or rx + rw <= x or y + h <= ry or ry + rh <= y for rx, ry, rw, rh in rects):
                rects.append((x, y, w, h))
                break
        else:
            raise LayoutError(f"could not place macro {m} of {k} without overlap after {retries} tries")
    return rects


def _hits_macro(x, y, w, h, rects):
    hit = np.zeros(len(x), dtype=bool)
    for rx, ry, rw, rh in rects:
        hit |= (x < rx + rw) & (rx < x + w) & (y < ry + rh) & (ry < y + h)
    return hit


def synth_layout(seed: int, n_cells: int = 2000, n_nets: int = 3000, W: int = 32, H: int = 32,
                 n_macros: int = 0, macro_size=(0.08, 0.16), *,
                 degree_probs=DEFAULT_DEGREE_PROBS, uniform_fraction: float = 0.3,
                 n_clusters=(4, 8), cluster_sigma=(0.04, 0.09), neighbours: int = 12,
                 global_net_fraction: float = 0.03, max_rounds: int = 200) -> Layout:
    """Seeded clustered placement with mostly local nets.

    Standard cells come from a mixture of a uniform spread and Gaussian
    clusters, so routing demand concentrates into hotspots.  Macros are placed
    first; standard cells never overlap them.
    """
    if n_cells < 2:
        raise LayoutError("need at least 2 cells")
    if n_macros >= n_cells:
        raise LayoutError("need at least one standard cell")
    rng = np.random.default_rng(seed)
    grid = GCellGrid(W, H)
    rects = _place_macros(rng, n_macros, macro_size)
    n_std = n_cells - n_macros

    pitch = min(grid.pitch_x, grid.pitch_y)
    std_w = rng.uniform(0.05, 0.2, size=n_std) * pitch
    std_h = np.full(n_std, 0.08 * pitch)

    k = int(rng.integers(n_clusters[0], n_clusters[1] + 1))
    centers = rng.uniform(0.12, 0.88, size=(k, 2))
    sigmas = rng.uniform(cluster_sigma[0], cluster_sigma[1], size=k)
    weights = rng.dirichlet(np.ones(k))

    xy = np.empty((n_std, 2))
    todo = np.arange(n_std)
    for _ in range(max_rounds):
        m = len(todo)
        if m == 0:
            break
        uni = rng.random(m) < uniform_fraction
        comp = rng.choice(k, size=m, p=weights)
        pts = centers[comp] + rng.normal(size=(m, 2)) * sigmas[comp, None]
        pts[uni] = rng.random((int(uni.sum()), 2))
        xy[todo] = pts
        ok = ((pts[:, 0] >= 0) & (pts[:, 0] <= 1 - std_w[todo]) & (pts[:, 1] >= 0) & (pts[:, 1] <= 1 - std_h[todo])
              & ~_hits_macro(pts[:, 0], pts[:, 1], std_w[todo], std_h[todo], rects))
        todo = todo[~ok]
    if len(todo):
        raise LayoutError(f"{len(todo)} standard cells could not be placed clear of macros")

    cell_w = np.concatenate([[r[2] for r in rects], std_w])
    cell_h = np.concatenate([[r[3] for r in rects], std_h])
    is_macro = np.concatenate([np.ones(n_macros, bool), np.zeros(n_std, bool)])
    coords = np.concatenate([np.array([[r[0], r[1]] for r in rects]).reshape(-1, 2), xy])

    # nets: a driver plus sinks drawn from its spatial neighbourhood
    degrees = 2 + rng.choice(len(degree_probs), size=n_nets, p=np.asarray(degree_probs) / np.sum(degree_probs))
    k_nn = min(neighbours + 1, n_std)
    _, nn = cKDTree(xy).query(xy, k=k_nn)
    nn = np.asarray(nn).reshape(n_std, -1)
    drivers = rng.integers(0, n_std, size=n_nets)
    is_global = rng.random(n_nets) < global_net_fraction
    ptr = [0]
    pin_cell = []
    for e in range(n_nets):
        deg = int(min(degrees[e], n_std))
        if is_global[e] or k_nn - 1 < deg - 1:
            sinks = rng.choice(n_std, size=deg, replace=False)
            members = sinks if drivers[e] in sinks else np.concatenate([[drivers[e]], sinks[:deg - 1]])
        else:
            sinks = rng.choice(nn[drivers[e], 1:], size=deg - 1, replace=False)
            members = np.concatenate([[drivers[e]], sinks])
        pin_cell.extend(int(c) + n_macros for c in members)
        ptr.append(len(pin_cell))
    pin_cell = np.array(pin_cell, dtype=np.int64)
    if n_macros:
        # a few nets also touch a macro pin on its boundary
        touch = np.nonzero(rng.random(n_nets) < 0.02)[0]
        extra_ptr = np.array(ptr)
        new_cells, new_ptr = [], [0]
        touch_set = set(touch.tolist())
        macro_pins = []
        for e in range(n_nets):
            seg = pin_cell[extra_ptr[e]:extra_ptr[e + 1]].tolist()
            if e in touch_set:
                m = int(rng.integers(0, n_macros))
                seg.append(m)
                macro_pins.append(len(new_cells) + len(seg) - 1)
            new_cells.extend(seg)
            new_ptr.append(len(new_cells))
        pin_cell = np.array(new_cells, dtype=np.int64)
        ptr = new_ptr
        macro_pin_set = np.array(macro_pins, dtype=np.int64)
    else:
        macro_pin_set = np.zeros(0, dtype=np.int64)

    pin_ox = rng.random(len(pin_cell)) * cell_w[pin_cell]
    pin_oy = rng.random(len(pin_cell)) * cell_h[pin_cell]
    if len(macro_pin_set):
        # macro pins sit on the bottom edge
        pin_oy[macro_pin_set] = 0.0
    netlist = Netlist(cell_w, cell_h, is_macro, np.array(ptr, dtype=np.int64), pin_cell, pin_ox, pin_oy)
    return Layout(netlist, coords, grid)
