"""Sparse, tile-confined placement perturbations and the attacks that find them.

The feasible set around a clean placement ``x`` allows at most ``eps0``
cells to move, each inside its own feasible box (see ``layout.feasible_box``).
Projection onto it clamps every cell to its box and keeps only the ``eps0``
cells whose clamped move buys the largest decrease in squared distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import predictor
from .features import FeatureEngine
from .layout import FeasibleBox, Layout, feasible_box
from .rng import stream

MODES = ("score", "loss", "random")
_MODE_ALIASES = {
    "unsupervised_min_score": "score", "supervised_max_loss": "loss",
    "*": "score", "†": "loss", "adv": "score",
}


def budget_count(fraction: float, n: int) -> int:
    """Moved-cell budget for a fraction of ``n`` cells (floored)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"budget fraction must be in [0, 1], got {fraction}")
    return int(np.floor(fraction * n + 1e-9))


@dataclass(frozen=True, eq=False)
class Perturbation:
    delta: np.ndarray          # n x 2
    eps0: int
    moved_mask: np.ndarray = None

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        object.__setattr__(self, "delta", d)
        if self.moved_mask is None:
            object.__setattr__(self, "moved_mask", np.any(d != 0.0, axis=1))

    @classmethod
    def zeros(cls, n: int, eps0: int = 0) -> "Perturbation":
        return cls(np.zeros((n, 2)), eps0)

    @property
    def n_moved(self) -> int:
        return int(self.moved_mask.sum())

    def check(self, box: FeasibleBox | None = None) -> list[str]:
        """Violated invariants, as messages (empty when valid)."""
        problems = []
        if self.n_moved > self.eps0:
            problems.append(f"{self.n_moved} cells moved, budget {self.eps0}")
        if np.any(self.delta[~self.moved_mask] != 0.0):
            problems.append("unmasked rows are not zero")
        if box is not None and not np.all(box.contains(self.delta)):
            problems.append("rows outside the feasible box")
        return problems

    def to_dict(self) -> dict:
        rows = [{"cell": int(i), "dx": float(self.delta[i, 0]), "dy": float(self.delta[i, 1])}
                for i in np.nonzero(self.moved_mask)[0]]
        return {"n": int(len(self.delta)), "eps0": int(self.eps0), "rows": rows}

    @classmethod
    def from_dict(cls, d: dict, n: int | None = None) -> "Perturbation":
        n = d.get("n", n)
        if n is None:
            raise ValueError("perturbation has no cell count")
        delta = np.zeros((int(n), 2))
        mask = np.zeros(int(n), dtype=bool)
        for r in d["rows"]:
            i = int(r["cell"])
            if not 0 <= i < n:
                raise ValueError(f"cell {i} out of range [0, {n})")
            delta[i] = (float(r["dx"]), float(r["dy"]))
            mask[i] = True
        return cls(delta, int(d["eps0"]), mask)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path, n: int | None = None) -> "Perturbation":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(doc, n)


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "score"
    budget_fraction: float = 0.01
    iterations: int = 100
    restarts: int = 5
    alpha: float = 0.75
    eta0: float | None = None        # None -> 2 tile pitches
    eta_final: float | None = None   # None -> a tenth of a pitch
    seed: int = 0
    norm: str = "inf"               # steepest-direction norm: "inf" (sign) or "2"

    def __post_init__(self):
        object.__setattr__(self, "mode", _MODE_ALIASES.get(self.mode, self.mode))
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must be in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.norm not in ("inf", "2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.iterations < 0 or self.restarts < 1:
            raise ValueError("need iterations >= 0 and restarts >= 1")
        if self.eta0 is not None and self.eta_final is not None and not self.eta0 >= self.eta_final > 0:
            raise ValueError("need eta0 >= eta_final > 0")

    def step_sizes(self, pitch: np.ndarray) -> np.ndarray:
        """(iterations, 2) per-axis step sizes, decayed linearly."""
        e0 = 2.0 if self.eta0 is None else self.eta0
        e1 = 0.1 if self.eta_final is None else self.eta_final
        t = np.linspace(0.0, 1.0, self.iterations) if self.iterations > 1 else np.zeros(self.iterations)
        scale = e0 + (e1 - e0) * t
        # eta values are in tile pitches unless given explicitly
        if self.eta0 is None or self.eta_final is None:
            return scale[:, None] * pitch[None, :]
        return np.repeat(scale[:, None], 2, axis=1)


# -- projection ------------------------------------------------------------

def clamp_box(y, x, box: FeasibleBox) -> np.ndarray:
    """Entrywise projection of ``y`` onto ``[x + l, x + u]``."""
    return np.maximum(box.lower + x, np.minimum(y, box.upper + x))


def _top_k(gain, k):
    # boolean mask of the k largest entries of a 1-D array; ties go to the lowest index
    n = len(gain)
    if k <= 0:
        return np.zeros(n, dtype=bool)
    if k >= n:
        return np.ones(n, dtype=bool)
    t = np.partition(gain, n - k)[n - k]
    keep = gain > t
    tied = np.nonzero(gain == t)[0]
    keep[tied[:k - int(keep.sum())]] = True
    return keep


def _select(y, x, z, eps0):
    # keep z on the eps0 cells of largest gain, x elsewhere; works on (n, 2) or (R, n, 2)
    gain = np.sum((y - x) ** 2 - (y - z) ** 2, axis=-1)
    if eps0 > 0:
        flat = gain.reshape(-1, gain.shape[-1])
        keep = np.stack([_top_k(g, eps0) for g in flat]).reshape(gain.shape)
    else:
        keep = np.zeros(gain.shape, dtype=bool)
    keep &= np.any(z != x, axis=-1)
    return np.where(keep[..., None], z, x), keep


def project_S(y, x, box: FeasibleBox, eps0: int) -> Perturbation:
    """Euclidean projection of absolute positions ``y`` onto the feasible set around ``x``."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {x.shape}")
    if not 0 <= eps0 <= len(x):
        raise ValueError(f"eps0={eps0} outside [0, {len(x)}]")
    z, keep = _select(y, x, clamp_box(y, x, box), eps0)
    delta = np.where(keep[:, None], z - x, 0.0)
    return Perturbation(delta, eps0, keep)


def steepest_dir(w, p="inf", eps: float = 1.0) -> np.ndarray:
    """Maximizer of <w, d> over the p-norm ball of radius eps (p in {2, inf})."""
    w = np.asarray(w, dtype=np.float64)
    if p in ("inf", np.inf, float("inf")):
        return eps * np.sign(w)
    if p in (2, "2"):
        nrm = np.linalg.norm(w)
        return np.zeros_like(w) if nrm == 0 else eps * w / nrm
    raise ValueError(f"unsupported norm {p!r}")


# -- attacks ---------------------------------------------------------------

class AttackTarget:
    """Everything an attack needs about one layout, computed once and reused."""

    def __init__(self, layout: Layout, box: FeasibleBox | None = None, engine: FeatureEngine | None = None):
        self.layout = layout
        self.x = layout.coords
        self.box = feasible_box(layout) if box is None else box
        self.engine = FeatureEngine(layout) if engine is None else engine
        self.movable = np.nonzero(np.any(self.box.upper > self.box.lower, axis=1))[0]
        self.pitch = np.array([layout.grid.pitch_x, layout.grid.pitch_y])
        self._graph = None

    @property
    def n(self) -> int:
        return len(self.x)

    def graph(self):
        if self._graph is None:
            self._graph = predictor.GraphCache(self.layout)
        return self._graph

    def random_init(self, rng, eps0: int, count: int) -> np.ndarray:
        """``count`` random feasible placements, each moving ``eps0`` cells uniformly in their boxes."""
        out = np.repeat(self.x[None], count, axis=0)
        k = min(eps0, len(self.movable))
        for r in range(count):
            cells = rng.choice(self.movable, size=k, replace=False)
            lo, hi = self.box.lower[cells], self.box.upper[cells]
            out[r, cells] += lo + rng.random((k, 2)) * (hi - lo)
        return out

    def evaluate(self, model, coords, objective: predictor.Objective, need_grad: bool = True):
        """Objective per placement in ``coords`` (R, n, 2) and its coordinate gradient."""
        R = len(coords)
        if model.kind == "fcn":
            maps = np.stack([self.engine.maps(c) for c in coords])
            if not need_grad:
                p, cache = model.forward(maps)
                if objective.kind == "score":
                    return np.sum(p * p, axis=(-1, -2)) / (p.shape[-1] * p.shape[-2]), None
                return predictor._bce_batch(cache["logits"], objective.label)[0], None
            vals, gm = predictor.input_gradient(model, maps, objective)
            grads = np.stack([self.engine.vjp(coords[r], gm[r]) for r in range(R)])
            return np.atleast_1d(vals), grads
        graph = self.graph()
        vals = np.empty(R)
        grads = np.empty_like(coords)
        for r in range(R):
            bins, cache = model.forward(graph, coords[r])
            if objective.kind == "score":
                vals[r] = np.sum(bins * bins) / bins.size
                g = 2.0 * bins / bins.size
            else:
                vals[r], g = predictor.bce_from_probs(bins, objective.label,
                                                      graph.bin_count.reshape(bins.shape) > 0)
            if need_grad:
                grads[r] = model.backward(graph, cache, g)[1]
        return vals, (grads if need_grad else None)


@dataclass
class AttackResult:
    perturbation: Perturbation
    objective: float             # at the returned perturbation
    clean_objective: float
    trace: np.ndarray            # (iterations + 1, restarts) objective of every chain
    best_restart: int = 0
    reinitialized: int = 0       # chains restarted after a non-finite gradient
    extras: dict = field(default_factory=dict)

    def best_trace(self) -> np.ndarray:
        """Running best objective over all chains, per iteration."""
        if self.extras.get("mode", "score") == "score":
            return np.minimum.accumulate(np.nanmin(self.trace, axis=1))
        return np.maximum.accumulate(np.nanmax(self.trace, axis=1))


def momentum_point(x, x_prev, u, alpha: float):
    """Blend of the projected step ``u`` with the previous displacement (projected by the caller)."""
    return x + alpha * (u - x) + (1.0 - alpha) * (x - x_prev)


def _direction(grads, eta, norm, eps0):
    # (R, n, 2) steepest directions; the l2 radius matches a sign step on eps0 cells
    if norm == "inf":
        return eta * np.sign(grads)
    radius = eta * np.sqrt(2.0 * max(eps0, 1))
    return np.stack([steepest_dir(g, 2, 1.0) for g in grads]) * radius


def _objective_for(cfg: AttackConfig, label):
    if cfg.mode == "loss":
        if label is None:
            raise ValueError("the supervised attack needs a label map")
        return predictor.Objective("bce", np.asarray(label, dtype=np.float64))
    return predictor.Objective("score")


def pgd_momentum(layout: Layout | AttackTarget, model, label=None, cfg: AttackConfig = AttackConfig(),
                 *, init: Perturbation | None = None, rng=None) -> AttackResult:
    """Momentum projected sign-gradient attack with random restarts.

    Chains run in lock step so the FCN sees one batch per iteration.  With
    ``init`` the first chain starts from that perturbation instead of a
    random one (used to warm-start nested budgets).
    """
    tgt = layout if isinstance(layout, AttackTarget) else AttackTarget(layout)
    if cfg.mode == "random":
        raise ValueError("use random_perturb for the random baseline")
    objective = _objective_for(cfg, label)
    rng = stream(cfg.seed, "attack") if rng is None else rng
    x = tgt.x
    eps0 = budget_count(cfg.budget_fraction, tgt.n)
    minimize = cfg.mode == "score"
    sign = -1.0 if minimize else 1.0
    R = cfg.restarts

    def project(y):
        return _select(y, x, clamp_box(y, x, tgt.box), eps0)[0]

    clean_val = float(tgt.evaluate(model, x[None], objective, need_grad=False)[0][0])
    X = tgt.random_init(rng, eps0, R)
    if init is not None:
        if init.n_moved > eps0:
            raise ValueError(f"warm start moves {init.n_moved} cells, budget is {eps0}")
        X[0] = x + init.delta
    X_prev = X.copy()
    steps = cfg.step_sizes(tgt.pitch)
    trace = np.empty((cfg.iterations + 1, R))
    best_val = np.inf if minimize else -np.inf
    best_X, best_r = x.copy(), 0
    reinit = 0
    if eps0 == 0:
        trace[:] = clean_val
        return AttackResult(Perturbation.zeros(tgt.n, 0), clean_val, clean_val, trace, 0, 0, {"mode": cfg.mode})

    for i in range(cfg.iterations + 1):
        need_grad = i < cfg.iterations
        vals, grads = tgt.evaluate(model, X, objective, need_grad=need_grad)
        if need_grad:
            bad = ~np.all(np.isfinite(grads), axis=(1, 2)) | ~np.isfinite(vals)
            if bad.any():
                for r in np.nonzero(bad)[0]:
                    X[r] = X_prev[r] = tgt.random_init(rng, eps0, 1)[0]
                    reinit += 1
                vals[bad] = np.nan
        trace[i] = vals
        for r in range(R):
            v = vals[r]
            if np.isfinite(v) and (v < best_val if minimize else v > best_val):
                best_val, best_X, best_r = float(v), X[r].copy(), r
        if not need_grad:
            break
        grads = np.where(np.isfinite(grads), grads, 0.0)
        U = project(X + sign * _direction(grads, steps[i], cfg.norm, eps0))
        X_next = project(momentum_point(X, X_prev, U, cfg.alpha))
        X_prev, X = X, X_next

    delta = best_X - x
    keep = np.any(delta != 0.0, axis=1)
    delta[~keep] = 0.0
    pert = Perturbation(delta, eps0, keep)
    return AttackResult(pert, best_val, clean_val, trace, best_r, reinit, {"mode": cfg.mode})


def single_step(target: AttackTarget, model, label=None, cfg: AttackConfig = AttackConfig(), *, rng) -> Perturbation:
    """One projected sign step from a random feasible start (the cheap training-time attack)."""
    objective = _objective_for(cfg, label)
    x = target.x
    eps0 = budget_count(cfg.budget_fraction, target.n)
    if eps0 == 0:
        return Perturbation.zeros(target.n, 0)
    X = target.random_init(rng, eps0, 1)
    _, g = target.evaluate(model, X, objective)
    sign = -1.0 if cfg.mode == "score" else 1.0
    eta = cfg.step_sizes(target.pitch)[0] if cfg.iterations > 0 else 2.0 * target.pitch
    y = X[0] + sign * eta * np.sign(np.where(np.isfinite(g[0]), g[0], 0.0))
    return project_S(y, x, target.box, eps0)


def random_perturb(layout: Layout | AttackTarget, budget_fraction: float, seed=0) -> Perturbation:
    """Move a uniform random subset of movable cells to random corners of their boxes."""
    tgt = layout if isinstance(layout, AttackTarget) else AttackTarget(layout)
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "random_perturb")
    eps0 = budget_count(budget_fraction, tgt.n)
    k = min(eps0, len(tgt.movable))
    delta = np.zeros((tgt.n, 2))
    cells = rng.choice(tgt.movable, size=k, replace=False)
    corner = rng.random((k, 2)) < 0.5
    delta[cells] = np.where(corner, tgt.box.lower[cells], tgt.box.upper[cells])
    return Perturbation(delta, eps0)
