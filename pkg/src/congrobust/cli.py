"""Command-line entry point: ``congrobust <command> [flags]``.

Every artifact-writing command also writes ``<output>.manifest.json`` (for
directories, ``<dir>/manifest.json``) holding the parsed flags and SHA-256
hashes of inputs and outputs.  Errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, features, metrics, oracle, perturb, predictor, tensorio, train
from .layout import Layout, LayoutError, apply_perturbation, synth_layout


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", 2)


# -- small helpers ---------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path) -> dict:
    p = Path(path)
    if p.is_dir():
        return {str(q): _sha256(q) for q in sorted(p.rglob("*"))
                if q.is_file() and not q.name.endswith("manifest.json")}
    return {str(p): _sha256(p)} if p.exists() else {}


def _write_manifest(args, inputs, outputs) -> None:
    """Config plus content hashes next to the first output (no timestamps, so reruns match)."""
    if not outputs:
        return
    first = Path(outputs[0])
    target = first / "manifest.json" if first.is_dir() else first.with_name(first.name + ".manifest.json")
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"version": __version__, "command": args.command, "config": config,
           "inputs": {}, "outputs": {}}
    for p in inputs:
        doc["inputs"].update(_hash_tree(p))
    for p in outputs:
        doc["outputs"].update(_hash_tree(p))
    target.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _grid(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like WxH, got {text!r}") from None


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in [0, 1], got {text}")
    return v


def _budgets(text: str):
    return [_fraction(t) for t in text.split(",") if t.strip()]


def _fmt(v) -> str:
    # repr of a Python float is the shortest round-trip form, so CSVs are stable
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h] if isinstance(r, dict) else getattr(r, h)) for h in header])
    Path(path).write_text(buf.getvalue())


def _out_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _load_layout(path) -> Layout:
    return Layout.load(path)


def _load_label(path, layout: Layout | None = None) -> np.ndarray:
    lab = tensorio.load(path)
    if lab.ndim == 3 and lab.shape[-1] == 1:
        lab = lab[..., 0]
    if layout is not None and lab.shape != (layout.grid.W, layout.grid.H):
        raise CliError("shape", f"{path}: label shape {lab.shape} does not match grid {layout.grid.W}x{layout.grid.H}")
    return lab


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# -- commands ----------------------------------------------------------------

def cmd_gen(args):
    W, H = args.grid
    synth = dict(n_cells=args.cells, n_nets=args.nets, W=W, H=H, n_macros=args.macros)
    if args.count is None:
        _out_parent(args.out)
        synth_layout(args.seed, **synth).save(args.out)
    else:
        train.Dataset.generate(args.count, args.seed, root=args.out, **synth)
    _write_manifest(args, [], [args.out])


def _capacity(text):
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise CliError("usage", f"--capacity must be 'auto' or a positive number, got {text!r}", 2) from None
    if not v > 0:
        raise CliError("usage", "--capacity must be positive", 2)
    return v


def cmd_label(args):
    cap = _capacity(args.capacity)
    ramp = (args.ramp_lo, args.ramp_hi)
    if args.data is not None:
        ds = train.Dataset.load(args.data)
        ds.make_labels(cap, ramp)
        ds.save(args.data)
        _write_manifest(args, [], [args.data])
        _log(args, f"capacity={ds.capacity!r}")
        return
    if args.layout is None or args.out is None:
        raise CliError("usage", "label needs --data DIR, or --layout FILE and --out FILE", 2)
    lay = _load_layout(args.layout)
    dm = oracle.demand_map(lay, cap)
    _out_parent(args.out)
    tensorio.save(args.out, oracle.hotspot_label(dm, *ramp) if not args.raw else dm.bin_congestion)
    _write_manifest(args, [args.layout], [args.out])
    _log(args, f"capacity={dm.capacity!r}")


def cmd_features(args):
    lay = _load_layout(args.layout)
    _out_parent(args.out)
    tensorio.save(args.out, features.feature_map(lay, scaled=not args.raw).stack())
    _write_manifest(args, [args.layout], [args.out])


def cmd_train(args):
    ds = train.Dataset.load(args.data)
    if ds.labels is None:
        raise CliError("data", f"{args.data}: dataset has no labels; run `label --data` first")
    cfg = train.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
        mode="adversarial" if args.mode == "adv" else "vanilla", model=args.model,
        adv_fraction=args.adv_frac, adv_steps="pgd" if args.pgd else "fast",
        adv_iterations=args.iters, adv_restarts=args.restarts, budget_fraction=args.budget,
        attack_mode=args.attack_mode, check_invariance=args.check_invariance)
    res = train.train(ds, cfg, log=lambda r: _log(args, json.dumps(r)))
    out = Path(args.out)
    predictor.save_model(res.model, out)
    write_csv(out / "history.csv", ["epoch", "train_loss", "test_loss"],
              [{k: ("" if v is None else v) for k, v in r.items()} for r in res.history])
    (out / "train_config.json").write_text(json.dumps(train.config_dict(cfg), indent=1, sort_keys=True) + "\n")
    if cfg.check_invariance and res.invariance_failures:
        raise CliError("invariance", f"{res.invariance_failures} attacked training samples changed the demand map")
    _write_manifest(args, [args.data], [out])


def _predict_map(model, lay: Layout):
    if model.kind == "fcn":
        return predictor.fcn_forward(features.feature_map(lay), model)
    return predictor.gcn_forward(lay, model)


def cmd_predict(args):
    model = predictor.load_model(args.model)
    lay = _load_layout(args.layout)
    _out_parent(args.out)
    tensorio.save(args.out, _predict_map(model, lay))
    _write_manifest(args, [args.model, args.layout], [args.out])


def _attack_cfg(args, mode=None, budget=None):
    return perturb.AttackConfig(mode=mode or args.mode, budget_fraction=args.budget if budget is None else budget,
                                iterations=args.iters, restarts=args.restarts, seed=args.seed, norm=args.norm)


def cmd_attack(args):
    model = predictor.load_model(args.model)
    lay = _load_layout(args.layout)
    inputs = [args.model, args.layout]
    cfg = _attack_cfg(args)
    tgt = perturb.AttackTarget(lay)
    if cfg.mode == "random":
        pert = perturb.random_perturb(tgt, cfg.budget_fraction, perturb.stream(cfg.seed, "random_perturb"))
        trace = None
    else:
        label = None
        if cfg.mode == "loss":
            if args.label is None:
                raise CliError("usage", "--mode loss needs --label", 2)
            label = _load_label(args.label, lay)
            inputs.append(args.label)
        res = perturb.pgd_momentum(tgt, model, label, cfg)
        pert, trace = res.perturbation, res
        _log(args, f"objective clean={res.clean_objective!r} attacked={res.objective!r} "
                   f"moved={pert.n_moved} eps0={pert.eps0} reinitialized={res.reinitialized}")
    _out_parent(args.out)
    pert.save(args.out)
    outs = [args.out]
    if args.trace is not None and trace is not None:
        header = ["iter", "best"] + [f"restart{r}" for r in range(trace.trace.shape[1])]
        best = trace.best_trace()
        rows = [{"iter": i, "best": best[i], **{f"restart{r}": trace.trace[i, r] for r in range(trace.trace.shape[1])}}
                for i in range(trace.trace.shape[0])]
        write_csv(args.trace, header, rows)
        outs.append(args.trace)
    _write_manifest(args, inputs, outs)


EVAL_HEADER = ["layout_id", "mode", "budget", "score", "nrms", "ssim"]


def cmd_eval(args):
    model = predictor.load_model(args.model)
    rows = []
    if args.data is not None:
        ds = train.Dataset.load(args.data)
        att = train.TableAttack("clean", None) if args.mode == "clean" else \
            train.TableAttack(args.mode, _attack_cfg(args))
        _, samples = train.evaluate_table({"model": model}, ds, [att], seed=args.seed)
        rows = [{"layout_id": s.layout_id, "mode": s.attack, "budget": s.budget, "score": s.score,
                 "nrms": s.nrms, "ssim": s.ssim} for s in samples]
        inputs = [args.model, args.data]
    else:
        if args.layout is None or args.label is None:
            raise CliError("usage", "eval needs --data DIR, or --layout and --label", 2)
        lay = _load_layout(args.layout)
        label = _load_label(args.label, lay)
        inputs = [args.model, args.layout, args.label]
        budget, mode = 0.0, "clean"
        if args.delta is not None:
            pert = perturb.Perturbation.load(args.delta, lay.n_cells)
            lay = apply_perturbation(lay, pert)
            inputs.append(args.delta)
            budget, mode = pert.eps0 / lay.n_cells, "delta"
        p = _predict_map(model, lay)
        rows = [{"layout_id": Path(args.layout).stem, "mode": mode, "budget": budget,
                 "score": metrics.congestion_score(p), "nrms": metrics.nrms(p, label), "ssim": metrics.ssim(p, label)}]
    _out_parent(args.out)
    write_csv(args.out, EVAL_HEADER, rows)
    _write_manifest(args, inputs, [args.out])


def _models(args):
    names = args.names.split(",") if args.names else [Path(m).name for m in args.models]
    if len(names) != len(args.models):
        raise CliError("usage", "--names must list one name per model", 2)
    return {n: predictor.load_model(m) for n, m in zip(names, args.models)}


TABLE_HEADER = ["model", "attack", "budget", "score", "nrms", "ssim", "bce"]
SAMPLE_HEADER = ["model", "attack", "budget", "layout_id", "score", "nrms", "ssim", "bce", "eps0", "moved", "identical"]
HIST_HEADER = ["model", "attack", "budget", "metric", "bin_lo", "bin_hi", "count"]


def cmd_report(args):
    models = _models(args)
    ds = train.Dataset.load(args.data)
    attacks = train.table_attacks(iterations=args.iters, restarts=args.restarts, seed=args.seed)
    attacks = [a if a.config is None else train.TableAttack(a.name, replace(a.config, norm=args.norm)) for a in attacks]
    if args.limit is not None:
        ds.test = ds.test[:args.limit]
    rows, samples = train.evaluate_table(models, ds, attacks, seed=args.seed, log=lambda r: _log(args, json.dumps(r)))
    out = Path(args.out)
    _out_parent(out)
    write_csv(out, TABLE_HEADER, rows)
    outs = [out]
    samples_path = Path(args.samples) if args.samples else out.with_name(out.stem + "_samples.csv")
    hist_path = Path(args.hist) if args.hist else out.with_name(out.stem + "_hist.csv")
    write_csv(samples_path, SAMPLE_HEADER, samples)
    write_csv(hist_path, HIST_HEADER, train.histograms(samples))
    outs += [samples_path, hist_path]
    _write_manifest(args, [*args.models, args.data], outs)


def cmd_curve(args):
    models = _models(args)
    ds = train.Dataset.load(args.data)
    test = ds.test if args.limit is None else ds.test[:args.limit]
    cfg = perturb.AttackConfig(mode="score", budget_fraction=0.0, iterations=args.iters,
                               restarts=args.restarts, seed=args.seed, norm=args.norm)
    series, rows = {}, []
    for name, model in models.items():
        curve, _ = metrics.robustness_curve(model, [ds.target(int(i)) for i in test], args.budgets, cfg)
        series[name] = curve
        rows += [{"model": name, "budget": b, "score": s} for b, s in curve]
        _log(args, json.dumps({"model": name, "curve": curve}))
    _out_parent(args.out)
    write_csv(args.out, ["model", "budget", "score"], rows)
    svg = Path(args.svg) if args.svg else Path(args.out).with_suffix(".svg")
    svg.write_text(line_plot_svg(series, "budget (fraction of cells)", "mean congestion score"))
    _write_manifest(args, [*args.models, args.data], [args.out, svg])


def cmd_verify(args):
    lay = _load_layout(args.layout)
    pert = perturb.Perturbation.load(args.delta, lay.n_cells)
    problems = pert.check()
    moved = apply_perturbation(lay, pert, strict=False)
    report = oracle.invariance_check(lay, moved)
    print(str(report))
    if problems:
        print("; ".join(problems), file=sys.stderr)
    return 0 if report.identical and not problems else 3


# -- SVG -------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_plot_svg(series: dict, xlabel: str, ylabel: str, width: int = 480, height: int = 320) -> str:
    """Minimal line chart, one polyline per series; coordinates printed with fixed precision."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>\n'
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = 0.0, max(ys) * 1.05 or 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    L, R, T, B = 60, 110, 20, 45

    def sx(v):
        return L + (v - x0) / (x1 - x0) * (width - L - R)

    def sy(v):
        return height - B - (v - y0) / (y1 - y0) * (height - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{L}" y1="{height - B}" x2="{width - R}" y2="{height - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{height - B}" stroke="black"/>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{sx(xv):.2f}" y="{height - B + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{L - 5}" y="{sy(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{(L + width - R) / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{(T + height - B) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(T + height - B) / 2:.1f})">{ylabel}</text>')
    for i, (name, s) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{poly}"/>')
        ly = T + 14 * (i + 1)
        out.append(f'<line x1="{width - R + 8}" y1="{ly - 4}" x2="{width - R + 28}" y2="{ly - 4}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{width - R + 32}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- parser ----------------------------------------------------------------

def _attack_flags(p, iters=100, restarts=5):
    p.add_argument("--iters", type=int, default=iters, help="PGD iterations per restart (default %(default)s)")
    p.add_argument("--restarts", type=int, default=restarts, help="random restarts (default %(default)s)")
    p.add_argument("--norm", choices=("inf", "2"), default="inf",
                   help="steepest-direction norm of each PGD step (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="congrobust", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads for compiled kernels (default 1; kernels are serial, so results never depend on it)")
    ap.add_argument("--deterministic", action="store_true",
                    help="record deterministic mode in the manifest (all computation is serial and seeded)")
    ap.add_argument("--quiet", action="store_true", help="suppress progress messages on stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic layout, or a dataset directory with --count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cells", type=int, default=2000)
    p.add_argument("--nets", type=int, default=3000)
    p.add_argument("--grid", type=_grid, default=(32, 32), help="WxH (default 32x32)")
    p.add_argument("--macros", type=int, default=0)
    p.add_argument("--count", type=int, default=None, help="write COUNT layouts and a 70/30 split into directory --out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", help="oracle demand-map labels for one layout or a whole dataset")
    p.add_argument("--layout")
    p.add_argument("--data", help="dataset directory; capacity is frozen from its train split")
    p.add_argument("--capacity", default="auto", help="edge capacity, or 'auto' for the 90th percentile of edge demand")
    p.add_argument("--ramp-lo", type=float, default=oracle.LABEL_RAMP[0], help="congestion where the label starts rising")
    p.add_argument("--ramp-hi", type=float, default=oracle.LABEL_RAMP[1], help="congestion where the label reaches 1")
    p.add_argument("--raw", action="store_true", help="write bin congestion instead of the training label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("features", help="W x H x 3 feature map of a layout")
    p.add_argument("--layout", required=True)
    p.add_argument("--raw", action="store_true", help="skip the fixed channel scaling")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a predictor on a labelled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("vanilla", "adv"), default="vanilla")
    p.add_argument("--model", choices=("fcn", "gcn"), default="fcn")
    p.add_argument("--adv-frac", type=_fraction, default=0.5, help="fraction of each batch attacked")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fast", action="store_true", help="single projected step attack (default)")
    g.add_argument("--pgd", action="store_true", help="full momentum PGD attack (uses --iters/--restarts)")
    p.add_argument("--attack-mode", choices=("score", "loss"), default="score")
    p.add_argument("--budget", type=_fraction, default=0.05, help="training attack budget (fraction of cells)")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=train.TrainConfig.learning_rate)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check-invariance", action="store_true", help="oracle-check every attacked training sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predicted congestion map of a layout")
    p.add_argument("--model", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attack", help="perturb a layout against a model")
    p.add_argument("--model", required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--label", help="label map (TEN), required for --mode loss")
    p.add_argument("--mode", choices=("score", "loss", "random"), default="score")
    p.add_argument("--budget", type=_fraction, default=0.01)
    _attack_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-iteration objective CSV")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="per-layout score / NRMS / SSIM CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset directory (evaluates its test split)")
    p.add_argument("--layout")
    p.add_argument("--label")
    p.add_argument("--delta", help="perturbation JSON applied to --layout first")
    p.add_argument("--mode", choices=("clean", "score", "loss", "random"), default="clean")
    p.add_argument("--budget", type=_fraction, default=0.01)
    _attack_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for name, fn, helptext in (("report", cmd_report, "six-row attack table over the test split"),
                               ("curve", cmd_curve, "mean score vs attack budget, CSV + SVG")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--models", nargs="+", required=True)
        p.add_argument("--names", help="comma-separated display names, one per model")
        p.add_argument("--data", required=True)
        _attack_flags(p)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--limit", type=int, help="only the first LIMIT test layouts")
        p.add_argument("--out", required=True)
        if name == "report":
            p.add_argument("--samples", help="per-layout CSV (default <out>_samples.csv)")
            p.add_argument("--hist", help="NRMS/SSIM histogram CSV (default <out>_hist.csv)")
        else:
            p.add_argument("--budgets", type=_budgets, default=[0.0, 0.01, 0.02, 0.05, 0.1])
            p.add_argument("--svg", help="plot path (default <out> with .svg)")
        p.set_defaults(func=fn)

    p = sub.add_parser("verify", help="check that a perturbation leaves the routing demand unchanged")
    p.add_argument("--layout", required=True)
    p.add_argument("--delta", required=True)
    p.set_defaults(func=cmd_verify)
    return ap


def _set_threads(n: int) -> None:
    if n < 1:
        raise CliError("usage", "--threads must be >= 1", 2)
    try:
        import numba
    except ImportError:  # pragma: no cover
        return
    with warnings.catch_warnings():
        # launching the thread pool warns about an old TBB even though the workqueue layer is used
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        _set_threads(args.threads)
        rc = args.func(args)
        return 0 if rc is None else int(rc)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        code = exc.code
    except (LayoutError, tensorio.TensorFormatError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = 1
    except FileNotFoundError as exc:
        err = {"error": "FileNotFoundError", "message": f"{exc.filename}: {exc.strerror}"}
        code = 1
    err["command"] = command
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
