"""Small differentiable congestion predictors with hand-written reverse mode.

``FCN`` maps a W x H x 3 feature map to a W x H map in (0, 1).
``GCN`` is a single graph-convolution layer over the star-expanded netlist
whose per-cell outputs are averaged into G-Cell bins.

Both keep their parameters in an ordered ``dict`` of float64 arrays, so
checkpoints, gradient steps and finite-difference checks treat them alike.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import features, kernels, tensorio
from .layout import Layout

LOGIT_CLAMP = 30.0


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _seeded(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- convolution layers on channels-last (N, X, Y, C) arrays -----------------

def _wmat(w, kind):
    # conv weight (O, C, k, k); a transposed conv stores the (O, C, k, k) weight of its adjoint conv
    k = w.shape[2]
    return w.transpose(2, 3, 1, 0).reshape(k * k * w.shape[1], w.shape[0])


def _unwmat(wm, shape):
    o, c, k, _ = shape
    return wm.reshape(k, k, c, o).transpose(3, 2, 0, 1)


def _pad(a, p):
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a


def conv_forward(a, wm, k, s, p):
    """Returns (z, cols); ``cols`` are the input patches, reused by the backward pass."""
    n, X, Y, _ = a.shape
    xo = (X + 2 * p - k) // s + 1
    yo = (Y + 2 * p - k) // s + 1
    cols = kernels.im2col(np.ascontiguousarray(_pad(a, p)), k, s, xo, yo)
    return (cols @ wm).reshape(n, xo, yo, wm.shape[1]), cols


def conv_backward_input(gz, wm, k, s, p, in_shape):
    n, X, Y, c = in_shape
    xo, yo = gz.shape[1], gz.shape[2]
    dcols = gz.reshape(-1, wm.shape[1]) @ wm.T
    dxp = kernels.col2im(np.ascontiguousarray(dcols), n, X + 2 * p, Y + 2 * p, c, k, s, xo, yo)
    return dxp[:, p:p + X, p:p + Y, :]


# -- FCN -----------------------------------------------------------------

# name, kind, in, out, kernel, stride, pad
FCN_LAYERS = (
    ("conv1", "conv", 3, 8, 3, 1, 1),
    ("conv2", "conv", 8, 16, 3, 2, 1),
    ("conv3", "conv", 16, 16, 3, 1, 1),
    ("up", "convT", 16, 8, 4, 2, 1),
    ("out", "conv", 8, 1, 3, 1, 1),
)


def _wshape(kind, cin, cout, k):
    return (cin, cout, k, k) if kind == "convT" else (cout, cin, k, k)


@dataclass(eq=False)
class FCN:
    params: dict = field(default_factory=dict)
    kind = "fcn"

    @classmethod
    def init(cls, seed=0) -> "FCN":
        """He-style uniform fan-in initialization; zero biases."""
        rng = _seeded(seed)
        params = {}
        for name, kind, cin, cout, k, stride, _ in FCN_LAYERS:
            fan_in = cin * k * k / (stride * stride if kind == "convT" else 1)
            bound = np.sqrt(6.0 / fan_in)
            params[f"{name}.w"] = rng.uniform(-bound, bound, size=_wshape(kind, cin, cout, k))
            params[f"{name}.b"] = np.zeros(cout)
        return cls(params)

    @classmethod
    def zeros(cls) -> "FCN":
        return cls({k: np.zeros_like(v) for k, v in cls.init(0).params.items()})

    def copy(self) -> "FCN":
        return FCN({k: v.copy() for k, v in self.params.items()})

    def forward(self, m):
        """``m``: (N, W, H, 3) or (W, H, 3). Returns (probabilities (N, W, H) or (W, H), cache)."""
        m = np.asarray(m, dtype=np.float64)
        single = m.ndim == 3
        if single:
            m = m[None]
        if m.ndim != 4 or m.shape[-1] != 3:
            raise ValueError(f"expected (N, W, H, 3) feature maps, got {m.shape}")
        W, H = m.shape[1], m.shape[2]
        if W % 2 or H % 2 or W < 8 or H < 8:
            raise ValueError(f"FCN needs even W, H >= 8, got {W}x{H}")
        a = m
        shapes, cols, pre = [], [], []
        for name, kind, cin, cout, k, s, p in FCN_LAYERS:
            w = self.params[f"{name}.w"]
            if w.shape != _wshape(kind, cin, cout, k):
                raise ValueError(f"{name}.w has shape {w.shape}")
            wm = _wmat(w, kind)
            shapes.append(a.shape)
            if kind == "conv":
                z, c = conv_forward(a, wm, k, s, p)
                cols.append(c)
            else:
                n, X, Y, _ = a.shape
                out_shape = (n, (X - 1) * s - 2 * p + k, (Y - 1) * s - 2 * p + k, cout)
                cols.append(a)
                z = conv_backward_input(a, wm, k, s, p, out_shape)
            z = z + self.params[f"{name}.b"]
            pre.append(z)
            a = np.maximum(z, 0.0)
        logits = pre[-1][..., 0]
        p = sigmoid(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
        cache = {"shapes": shapes, "cols": cols, "pre": pre, "logits": logits, "p": p, "single": single}
        return (p[0] if single else p), cache

    def backward(self, cache, out_grad=None, logit_grad=None, param_grads=True):
        """Reverse mode of ``<out_grad, forward(m)>``; returns (param_grads, input_grad).

        Pass ``logit_grad`` instead to start from the gradient w.r.t. the
        clamped pre-sigmoid values (fused sigmoid + BCE).  With
        ``param_grads=False`` only the input gradient is formed.
        """
        p = cache["p"]
        logits = cache["logits"]
        inside = np.abs(logits) < LOGIT_CLAMP
        if logit_grad is None:
            g = np.asarray(out_grad, dtype=np.float64).reshape(p.shape) * p * (1.0 - p)
        else:
            g = np.asarray(logit_grad, dtype=np.float64).reshape(p.shape)
        g = (g * inside)[..., None]
        pre, cols, shapes = cache["pre"], cache["cols"], cache["shapes"]
        grads = {}
        for li in range(len(FCN_LAYERS) - 1, -1, -1):
            name, kind, cin, cout, k, s, pad = FCN_LAYERS[li]
            if name != "out":
                g = g * (pre[li] > 0)
            w = self.params[f"{name}.w"]
            wm = _wmat(w, kind)
            if kind == "conv":
                if param_grads:
                    gf = g.reshape(-1, cout)
                    grads[f"{name}.w"] = _unwmat(cols[li].T @ gf, w.shape)
                    grads[f"{name}.b"] = gf.sum(axis=0)
                g = conv_backward_input(g, wm, k, s, pad, shapes[li])
            else:
                n, X, Y, _ = shapes[li]
                gc = kernels.im2col(np.ascontiguousarray(_pad(g, pad)), k, s, X, Y)
                if param_grads:
                    grads[f"{name}.w"] = _unwmat(gc.T @ cols[li].reshape(-1, cin), w.shape)
                    grads[f"{name}.b"] = g.reshape(-1, cout).sum(axis=0)
                g = (gc @ wm).reshape(n, X, Y, cin)
        grads = {k: grads[k] for k in self.params} if param_grads else None
        input_grad = g[0] if cache["single"] else g
        return grads, input_grad


def fcn_forward(m, params) -> np.ndarray:
    model = params if isinstance(params, FCN) else FCN(params)
    m = m.stack() if isinstance(m, features.FeatureMap) else m
    return model.forward(m)[0]


def fcn_backward(m, params, out_grad):
    model = params if isinstance(params, FCN) else FCN(params)
    m = m.stack() if isinstance(m, features.FeatureMap) else m
    _, cache = model.forward(m)
    return model.backward(cache, out_grad=out_grad)


# -- GCN -----------------------------------------------------------------

GCN_IN, GCN_HIDDEN = 4, 16


class GraphCache:
    """Star-expanded netlist graph and bin scatter for one netlist and grid.

    Nodes ``0..n-1`` are cells and ``n..n+m-1`` one star node per net.
    """

    def __init__(self, layout: Layout):
        nl = layout.netlist
        n, m = nl.n_cells, nl.n_nets
        self.n_cells, self.n_nets = n, m
        self.W, self.H = layout.grid.W, layout.grid.H
        rows = np.concatenate([nl.pin_cell, n + nl.pin_net])
        cols = np.concatenate([n + nl.pin_net, nl.pin_cell])
        a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + m, n + m)).tocsr()
        a.data[:] = 1.0  # duplicate pins of one cell on one net collapse to a single edge
        a = a + sp.identity(n + m, format="csr")
        dinv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
        self.a_hat = (sp.diags(dinv) @ a @ sp.diags(dinv)).tocsr()
        self.cell_feats = np.stack([nl.cell_degree() / 16.0, nl.cell_pin_count() / 16.0], axis=1)
        net_deg = np.diff(nl.net_ptr).astype(np.float64) / 16.0
        self.star_feats = np.stack([net_deg, net_deg], axis=1)
        gx, gy = layout.cell_tiles()
        self.bin_index = gx * self.H + gy
        self.bin_count = np.bincount(self.bin_index, minlength=self.W * self.H).astype(np.float64)
        self.net_ptr = nl.net_ptr
        self.pin_cell = nl.pin_cell
        self.pin_ox, self.pin_oy = nl.pin_ox, nl.pin_oy

    def node_features(self, coords):
        px = np.ascontiguousarray(coords[self.pin_cell, 0] + self.pin_ox)
        py = np.ascontiguousarray(coords[self.pin_cell, 1] + self.pin_oy)
        lx, hx, ly, hy, alx, ahx, aly, ahy = kernels.net_bboxes(px, py, self.net_ptr)
        cells = np.concatenate([coords, self.cell_feats], axis=1)
        stars = np.concatenate([np.stack([0.5 * (lx + hx), 0.5 * (ly + hy)], axis=1), self.star_feats], axis=1)
        return np.concatenate([cells, stars], axis=0), (alx, ahx, aly, ahy)


@dataclass(eq=False)
class GCN:
    params: dict = field(default_factory=dict)
    kind = "gcn"

    @classmethod
    def init(cls, seed=0) -> "GCN":
        rng = _seeded(seed)
        b1 = np.sqrt(6.0 / GCN_IN)
        b2 = np.sqrt(6.0 / GCN_HIDDEN)
        return cls({
            "gc.w": rng.uniform(-b1, b1, size=(GCN_IN, GCN_HIDDEN)),
            "gc.b": np.zeros(GCN_HIDDEN),
            "ro.w": rng.uniform(-b2, b2, size=(GCN_HIDDEN, 1)),
            "ro.b": np.zeros(1),
        })

    @classmethod
    def zeros(cls) -> "GCN":
        return cls({k: np.zeros_like(v) for k, v in cls.init(0).params.items()})

    def copy(self) -> "GCN":
        return GCN({k: v.copy() for k, v in self.params.items()})

    def forward(self, graph: GraphCache, coords):
        feats, args = graph.node_features(coords)
        agg = graph.a_hat @ feats
        z = agg @ self.params["gc.w"] + self.params["gc.b"]
        h = np.maximum(z, 0.0)
        n = graph.n_cells
        logits = (h[:n] @ self.params["ro.w"])[:, 0] + self.params["ro.b"][0]
        p = sigmoid(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))
        sums = np.bincount(graph.bin_index, weights=p, minlength=graph.W * graph.H)
        bins = np.divide(sums, graph.bin_count, out=np.zeros_like(sums), where=graph.bin_count > 0)
        cache = {"agg": agg, "z": z, "h": h, "logits": logits, "p": p, "args": args, "coords": coords}
        return bins.reshape(graph.W, graph.H), cache

    def backward(self, graph: GraphCache, cache, out_grad):
        """Reverse mode of ``<out_grad, forward(coords)>``; returns (param_grads, coord_grad)."""
        n = graph.n_cells
        g_bins = np.asarray(out_grad, dtype=np.float64).ravel()
        per_cell = np.divide(g_bins, graph.bin_count, out=np.zeros_like(g_bins), where=graph.bin_count > 0)
        p = cache["p"]
        g_logit = per_cell[graph.bin_index] * p * (1.0 - p) * (np.abs(cache["logits"]) < LOGIT_CLAMP)
        grads = {
            "ro.w": cache["h"][:n].T @ g_logit[:, None],
            "ro.b": np.array([g_logit.sum()]),
        }
        g_h = np.zeros_like(cache["h"])
        g_h[:n] = g_logit[:, None] @ self.params["ro.w"].T
        g_z = g_h * (cache["z"] > 0)
        grads = {"gc.w": cache["agg"].T @ g_z, "gc.b": g_z.sum(axis=0), **grads}
        g_feats = graph.a_hat.T @ (g_z @ self.params["gc.w"].T)

        coord_grad = g_feats[:n, :2].copy()
        alx, ahx, aly, ahy = cache["args"]
        g_star = 0.5 * g_feats[n:, :2]
        npins = len(graph.pin_cell)
        gpx = np.bincount(alx, weights=g_star[:, 0], minlength=npins) + np.bincount(ahx, weights=g_star[:, 0], minlength=npins)
        gpy = np.bincount(aly, weights=g_star[:, 1], minlength=npins) + np.bincount(ahy, weights=g_star[:, 1], minlength=npins)
        coord_grad[:, 0] += np.bincount(graph.pin_cell, weights=gpx, minlength=n)
        coord_grad[:, 1] += np.bincount(graph.pin_cell, weights=gpy, minlength=n)
        return {k: grads[k] for k in self.params}, coord_grad


def gcn_forward(layout: Layout, params, graph: GraphCache | None = None) -> np.ndarray:
    model = params if isinstance(params, GCN) else GCN(params)
    graph = GraphCache(layout) if graph is None else graph
    return model.forward(graph, layout.coords)[0]


# -- objectives and input gradients --------------------------------------

def bce_from_logits(logits, label):
    """Mean pixel-wise BCE of sigmoid(clamped logits) against ``label``, and d/d(logits)."""
    z = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = np.logaddexp(0.0, z) - label * z
    grad = (sigmoid(z) - label) / z.size
    return float(loss.mean()), grad


def bce_from_probs(p, label, mask=None):
    q = np.clip(p, 1e-12, 1.0 - 1e-12)
    loss = -(label * np.log(q) + (1.0 - label) * np.log1p(-q))
    grad = (q - label) / (q * (1.0 - q))
    if mask is None:
        mask = np.ones_like(p, dtype=bool)
    cnt = max(int(mask.sum()), 1)
    return float(loss[mask].sum() / cnt), np.where(mask, grad, 0.0) / cnt


@dataclass(frozen=True)
class Objective:
    """``score``: (1/HW)||f||_F^2.  ``bce``: mean pixel-wise BCE against ``label``."""

    kind: str = "score"
    label: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("score", "bce"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "bce" and self.label is None:
            raise ValueError("the supervised objective needs a label map")


def input_gradient(model, x, objective: Objective, graph: GraphCache | None = None):
    """Objective value and its gradient w.r.t. the model input.

    FCN: ``x`` is a W x H x 3 map (or batch), gradient w.r.t. the map.
    GCN: ``x`` is a Layout, gradient w.r.t. its n x 2 coordinates.
    """
    if model.kind == "fcn":
        m = x.stack() if isinstance(x, features.FeatureMap) else np.asarray(x)
        p, cache = model.forward(m)
        if objective.kind == "score":
            hw = p.shape[-1] * p.shape[-2]
            val = np.sum(p * p, axis=(-1, -2)) / hw
            _, g = model.backward(cache, out_grad=2.0 * p / hw, param_grads=False)
        else:
            val, lg = _bce_batch(cache["logits"], objective.label)
            _, g = model.backward(cache, logit_grad=lg, param_grads=False)
            if cache["single"]:
                val = val[0]
        return val, g
    graph = GraphCache(x) if graph is None else graph
    bins, cache = model.forward(graph, x.coords)
    if objective.kind == "score":
        val = float(np.sum(bins * bins) / bins.size)
        _, g = model.backward(graph, cache, 2.0 * bins / bins.size)
    else:
        val, gp = bce_from_probs(bins, objective.label, graph.bin_count.reshape(bins.shape) > 0)
        _, g = model.backward(graph, cache, gp)
    return val, g


def _bce_batch(logits, label):
    # per-sample mean BCE for a (N, W, H) batch; the gradient is per-sample too
    z = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    label = np.broadcast_to(label, z.shape)
    loss = (np.logaddexp(0.0, z) - label * z).mean(axis=(1, 2))
    grad = (sigmoid(z) - label) / (z.shape[1] * z.shape[2])
    return loss, grad


# -- checkpoints -------------------------------------------------------------

def save_model(model, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, arr in model.params.items():
        fname = f"{name}.ten"
        tensorio.save(d / fname, arr)
        layers.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"kind": model.kind, "layers": layers,
                "channel_scale": [float(s) for s in features.CHANNEL_SCALE]}
    (d / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_model(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / "model.json").read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{d / 'model.json'}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cls = {"fcn": FCN, "gcn": GCN}.get(manifest.get("kind"))
    if cls is None:
        raise ValueError(f"{d / 'model.json'}: unknown model kind {manifest.get('kind')!r}")
    params = {}
    for layer in manifest["layers"]:
        arr = tensorio.load(d / layer["file"])
        if list(arr.shape) != list(layer["shape"]):
            raise ValueError(f"{layer['file']}: shape {arr.shape} != manifest {layer['shape']}")
        params[layer["name"]] = arr
    expected = cls.init(0).params
    if list(params) != list(expected) or any(params[k].shape != expected[k].shape for k in expected):
        raise ValueError(f"{d}: layer list does not match a {manifest['kind']} model")
    return cls(params)
