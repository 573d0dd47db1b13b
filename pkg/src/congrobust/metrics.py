"""Evaluation metrics on W x H maps and the budget-sweep robustness curve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gauss_taps(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


_TAPS = _gauss_taps()


@dataclass(frozen=True)
class EvalRecord:
    layout_id: str
    mode: str
    budget: float
    score: float
    nrms: float
    ssim: float


def congestion_score(pred) -> float:
    """Sum of squares over the H*W bins."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty map")
    return float(np.sum(pred * pred) / pred.size)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def nrms(pred, truth) -> float:
    """RMSE normalized by the range of ``truth`` (range floored at 1e-12)."""
    pred, truth = _check_pair(pred, truth)
    rmse = np.sqrt(np.mean((pred - truth) ** 2))
    return float(rmse / max(float(truth.max() - truth.min()), 1e-12))


def _blur(a):
    return correlate1d(correlate1d(a, _TAPS, axis=0, mode="reflect"), _TAPS, axis=1, mode="reflect")


def ssim_map(pred, truth) -> np.ndarray:
    a, b = _check_pair(pred, truth)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D maps")
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a ** 2
    var_b = _blur(b * b) - mu_b ** 2
    cov = _blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(pred, truth) -> float:
    """Mean local SSIM, 11-tap Gaussian window (sigma 1.5), dynamic range 1, reflective borders."""
    return float(np.mean(ssim_map(pred, truth)))


def robustness_curve(model, targets, budgets, cfg, *, seed=0):
    """Mean congestion score after the unsupervised attack at each budget.

    ``targets`` are ``perturb.AttackTarget`` objects (or layouts).  Budget
    ``k`` warm-starts from the best perturbation found at budget ``k-1``, so
    each row can only improve on the previous one.  Returns a list of
    ``(budget, mean_score)`` rows and the per-layout scores.
    """
    from dataclasses import replace

    from . import perturb
    from .rng import stream

    budgets = [float(b) for b in budgets]
    if not budgets or budgets[0] != 0.0 or any(b1 < b0 for b0, b1 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be ascending and start at 0")
    targets = [t if isinstance(t, perturb.AttackTarget) else perturb.AttackTarget(t) for t in targets]
    scores = np.zeros((len(budgets), len(targets)))
    for j, tgt in enumerate(targets):
        warm = None
        for k, b in enumerate(budgets):
            if b == 0.0:
                p, _ = model.forward(tgt.engine.maps(tgt.x)) if model.kind == "fcn" else \
                    model.forward(tgt.graph(), tgt.x)
                scores[k, j] = congestion_score(p)
                continue
            c = replace(cfg, mode="score", budget_fraction=b)
            res = perturb.pgd_momentum(tgt, model, cfg=c, init=warm,
                                       rng=stream(cfg.seed, "curve", seed, j, k))
            warm = res.perturbation
            scores[k, j] = res.objective
    return [(b, float(scores[k].mean())) for k, b in enumerate(budgets)], scores
