"""Desk-scale smoke pipeline: gen -> label -> train (vanilla, adversarial) -> report -> curve.

Runs the same commands a user would type, in-process, into one output
directory.  ``python -m congrobust.pipeline OUT`` runs it from the shell.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .cli import main as cli_main


@dataclass(frozen=True)
class SmokeConfig:
    seed: int = 0
    count: int = 200
    cells: int = 2000
    nets: int = 3000
    grid: str = "32x32"
    macros: int = 2
    epochs: int = 30
    adv_frac: float = 0.5
    adv_budget: float = 0.3      # single-step training needs a wider budget than the 5% test attack
    iters: int = 100             # evaluation attacks
    restarts: int = 2
    curve_budgets: str = "0,0.01,0.02,0.05,0.1"
    curve_limit: int = 12


REPORTS = ("table.csv", "table_samples.csv", "table_hist.csv", "curve.csv")


def _run(argv, timings, name):
    t = time.perf_counter()
    rc = cli_main(["--quiet", *argv])
    timings[name] = time.perf_counter() - t
    if rc != 0:
        raise RuntimeError(f"step {name!r} failed with exit code {rc}")


def run_smoke(out, cfg: SmokeConfig = SmokeConfig()) -> dict:
    """Run every step into ``out``; returns per-step wall times in seconds."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = str(out / "data")
    s = str(cfg.seed)
    t = {}
    _run(["gen", "--count", str(cfg.count), "--seed", s, "--cells", str(cfg.cells), "--nets", str(cfg.nets),
          "--grid", cfg.grid, "--macros", str(cfg.macros), "--out", data], t, "gen")
    _run(["label", "--data", data], t, "label")
    _run(["train", "--data", data, "--mode", "vanilla", "--epochs", str(cfg.epochs), "--seed", s,
          "--out", str(out / "vanilla")], t, "train_vanilla")
    _run(["train", "--data", data, "--mode", "adv", "--fast", "--adv-frac", str(cfg.adv_frac),
          "--budget", str(cfg.adv_budget), "--epochs", str(cfg.epochs), "--seed", s, "--out", str(out / "robust")], t, "train_adversarial")
    models = ["--models", str(out / "vanilla"), str(out / "robust"), "--names", "vanilla,robust", "--data", data]
    _run(["report", *models, "--iters", str(cfg.iters), "--restarts", str(cfg.restarts), "--seed", s,
          "--out", str(out / "table.csv")], t, "report")
    _run(["curve", *models, "--iters", str(cfg.iters), "--restarts", str(cfg.restarts), "--seed", s,
          "--budgets", cfg.curve_budgets, "--limit", str(cfg.curve_limit), "--out", str(out / "curve.csv")], t, "curve")
    return t


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m congrobust.pipeline", description=__doc__.splitlines()[0])
    ap.add_argument("out")
    for k, v in asdict(SmokeConfig()).items():
        ap.add_argument("--" + k.replace("_", "-"), type=type(v), default=v)
    args = ap.parse_args(argv)
    cfg = SmokeConfig(**{k: getattr(args, k) for k in asdict(SmokeConfig())})
    timings = run_smoke(args.out, cfg)
    for k, v in timings.items():
        print(f"{k:18s} {v:8.1f} s")
    print(f"{'total':18s} {sum(timings.values()):8.1f} s")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
