"""Datasets, vanilla and adversarial training loops, and the evaluation table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, oracle, perturb, predictor, tensorio
from .layout import Layout, apply_perturbation, synth_layout
from .rng import stream

TRAIN_FRACTION = 0.7


class TrainingDiverged(RuntimeError):
    pass


def split_indices(n: int, seed: int, train_fraction: float = TRAIN_FRACTION):
    """Seeded shuffle, then the first ``round(0.7 n)`` indices train and the rest test (both sorted)."""
    perm = stream(seed, "split").permutation(n)
    n_train = int(round(train_fraction * n))
    if n > 0:
        n_train = min(max(n_train, 1), n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


class Dataset:
    """Layouts with oracle labels and a fixed train/test split.

    On disk: a directory with ``dataset.json`` plus one layout JSON and one
    label TEN file per sample.
    """

    def __init__(self, layouts, labels=None, *, ids=None, train=None, test=None, seed: int = 0,
                 capacity: float | None = None, root=None, meta=None):
        self.layouts = list(layouts)
        n = len(self.layouts)
        self.ids = list(ids) if ids is not None else [f"s{i:04d}" for i in range(n)]
        if train is None or test is None:
            train, test = split_indices(n, seed)
        self.train = np.asarray(train, dtype=np.int64)
        self.test = np.asarray(test, dtype=np.int64)
        if np.intersect1d(self.train, self.test).size:
            raise ValueError("train and test splits overlap")
        self.seed = seed
        self.root = None if root is None else Path(root)
        self.meta = dict(meta or {})
        self.capacity = capacity
        self.labels = None if labels is None else [np.asarray(a, dtype=np.float64) for a in labels]
        if self.labels is not None:
            for lay, lab in zip(self.layouts, self.labels):
                if lab.shape != (lay.grid.W, lay.grid.H):
                    raise ValueError(f"label shape {lab.shape} does not match a {lay.grid.W}x{lay.grid.H} grid")
        self._maps = {}
        self._targets = {}

    def __len__(self):
        return len(self.layouts)

    # -- labels ---------------------------------------------------------

    def train_capacity(self, q: float = 90.0) -> float:
        """Edge capacity frozen for this dataset: percentile of edge demand over the train split."""
        vals = [oracle.demand_map(self.layouts[i], 1.0).edge_values() for i in self.train]
        return oracle.capacity_from(vals, q)

    def make_labels(self, capacity: float | None = None, ramp=oracle.LABEL_RAMP) -> None:
        self.capacity = self.train_capacity() if capacity is None else float(capacity)
        self.labels = [oracle.hotspot_label(oracle.demand_map(lay, self.capacity), *ramp) for lay in self.layouts]
        self.meta["label_ramp"] = [float(ramp[0]), float(ramp[1])]

    # -- cached per-sample views -----------------------------------------

    def feature_map(self, i: int) -> np.ndarray:
        if i not in self._maps:
            self._maps[i] = self.target(i).engine.maps(self.layouts[i].coords)
        return self._maps[i]

    def target(self, i: int) -> perturb.AttackTarget:
        if i not in self._targets:
            self._targets[i] = perturb.AttackTarget(self.layouts[i])
        return self._targets[i]

    def label(self, i: int) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels; run make_labels() first")
        return self.labels[i]

    # -- persistence ----------------------------------------------------

    @classmethod
    def generate(cls, count: int, seed: int = 0, root=None, **synth) -> "Dataset":
        """``count`` synthetic layouts; layout ``k`` uses a seed drawn from the ``(seed, 'gen', k)`` stream."""
        layouts = []
        for k in range(count):
            s = int(stream(seed, "gen", k).integers(0, 2 ** 31 - 1))
            layouts.append(synth_layout(s, **synth))
        meta = {"synth": {k: (list(v) if isinstance(v, tuple) else v) for k, v in synth.items()}}
        ds = cls(layouts, seed=seed, meta=meta)
        if root is not None:
            ds.save(root)
        return ds

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        samples = []
        for i, (sid, lay) in enumerate(zip(self.ids, self.layouts)):
            entry = {"id": sid, "layout": f"{sid}.json"}
            lay.save(root / entry["layout"])
            if self.labels is not None:
                entry["label"] = f"{sid}.label.ten"
                tensorio.save(root / entry["label"], self.labels[i])
            samples.append(entry)
        doc = {
            "version": 1,
            "seed": self.seed,
            "capacity": self.capacity,
            "samples": samples,
            "split": {"train": [self.ids[i] for i in self.train], "test": [self.ids[i] for i in self.test]},
            **self.meta,
        }
        (root / "dataset.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        self.root = root

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        path = root / "dataset.json"
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        ids = [s["id"] for s in doc["samples"]]
        pos = {sid: i for i, sid in enumerate(ids)}
        layouts = [Layout.load(root / s["layout"]) for s in doc["samples"]]
        labels = None
        if all("label" in s for s in doc["samples"]) and doc["samples"]:
            labels = [tensorio.load(root / s["label"]) for s in doc["samples"]]
        try:
            train = [pos[s] for s in doc["split"]["train"]]
            test = [pos[s] for s in doc["split"]["test"]]
        except KeyError as exc:
            raise ValueError(f"{path}: split names unknown sample {exc}") from exc
        meta = {k: v for k, v in doc.items() if k not in ("version", "seed", "capacity", "samples", "split")}
        return cls(layouts, labels, ids=ids, train=train, test=test, seed=doc.get("seed", 0),
                   capacity=doc.get("capacity"), root=root, meta=meta)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.5
    seed: int = 0
    mode: str = "vanilla"            # vanilla | adversarial
    model: str = "fcn"               # fcn | gcn
    adv_fraction: float = 0.5
    adv_steps: str = "fast"          # fast | pgd
    adv_iterations: int = 100
    adv_restarts: int = 5
    budget_fraction: float = 0.05
    attack_mode: str = "score"
    check_invariance: bool = False

    def __post_init__(self):
        if self.mode not in ("vanilla", "adversarial"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.model not in ("fcn", "gcn"):
            raise ValueError(f"unknown model {self.model!r}")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must be in [0, 1]")
        if self.adv_steps not in ("fast", "pgd"):
            raise ValueError(f"unknown adv_steps {self.adv_steps!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, learning_rate > 0")

    def attack_config(self) -> perturb.AttackConfig:
        return perturb.AttackConfig(mode=self.attack_mode, budget_fraction=self.budget_fraction,
                                    iterations=self.adv_iterations, restarts=self.adv_restarts, seed=self.seed)


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)   # one dict per epoch
    attacked: int = 0
    invariance_failures: int = 0


def _new_model(cfg: TrainConfig):
    cls = predictor.FCN if cfg.model == "fcn" else predictor.GCN
    return cls.init(stream(cfg.seed, "init"))


def _batch_loss_grad(model, data: Dataset, idx, coords_override: dict):
    """Mean BCE over the batch and its parameter gradient."""
    B = len(idx)
    if model.kind == "fcn":
        maps = np.stack([coords_override[i][1] if i in coords_override else data.feature_map(i) for i in idx])
        labels = np.stack([data.label(i) for i in idx])
        _, cache = model.forward(maps)
        losses, lg = predictor._bce_batch(cache["logits"], labels)
        grads, _ = model.backward(cache, logit_grad=lg / B)
        return float(losses.mean()), grads
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for i in idx:
        tgt = data.target(i)
        coords = coords_override[i][0] if i in coords_override else tgt.x
        graph = tgt.graph()
        bins, cache = model.forward(graph, coords)
        loss, gp = predictor.bce_from_probs(bins, data.label(i), graph.bin_count.reshape(bins.shape) > 0)
        g, _ = model.backward(graph, cache, gp / B)
        total += loss / B
        for k in grads:
            grads[k] += g[k]
    return total, grads


def dataset_loss(model, data: Dataset, indices) -> float | None:
    """Mean BCE over ``indices`` (None when empty)."""
    indices = list(indices)
    if not indices:
        return None
    total = 0.0
    for s in range(0, len(indices), 16):
        chunk = indices[s:s + 16]
        if model.kind == "fcn":
            _, cache = model.forward(np.stack([data.feature_map(i) for i in chunk]))
            total += float(predictor._bce_batch(cache["logits"], np.stack([data.label(i) for i in chunk]))[0].sum())
        else:
            for i in chunk:
                tgt = data.target(i)
                bins, _ = model.forward(tgt.graph(), tgt.x)
                total += predictor.bce_from_probs(bins, data.label(i), tgt.graph().bin_count.reshape(bins.shape) > 0)[0]
    return total / len(indices)


def _attack_batch(model, data: Dataset, idx, cfg: TrainConfig, epoch: int, b: int, result: TrainResult):
    k = int(round(cfg.adv_fraction * len(idx)))
    if k == 0:
        return {}
    picks = stream(cfg.seed, "adv-pick", epoch, b).permutation(len(idx))[:k]
    acfg = cfg.attack_config()
    out = {}
    for pos in sorted(picks):
        i = int(idx[pos])
        tgt = data.target(i)
        rng = stream(cfg.seed, "adv-attack", epoch, b, int(pos))
        label = data.label(i) if acfg.mode == "loss" else None
        if cfg.adv_steps == "fast":
            pert = perturb.single_step(tgt, model, label, acfg, rng=rng)
        else:
            pert = perturb.pgd_momentum(tgt, model, label, acfg, rng=rng).perturbation
        coords = tgt.x + pert.delta
        if cfg.check_invariance:
            moved = apply_perturbation(tgt.layout, pert, box=tgt.box, strict=False)
            if not oracle.invariance_check(tgt.layout, moved).identical or pert.check(tgt.box):
                result.invariance_failures += 1
        out[i] = (coords, tgt.engine.maps(coords) if model.kind == "fcn" else None)
        result.attacked += 1
    return out


def _fit(data: Dataset, cfg: TrainConfig, adversarial: bool, model=None, log=None) -> TrainResult:
    if data.labels is None:
        raise ValueError("dataset has no labels")
    model = _new_model(cfg) if model is None else model.copy()
    result = TrainResult(model)
    train = data.train
    for epoch in range(cfg.epochs):
        order = train[stream(cfg.seed, "shuffle", epoch).permutation(len(train))]
        batch_losses = []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            override = _attack_batch(model, data, idx, cfg, epoch, b, result) if adversarial else {}
            loss, grads = _batch_loss_grad(model, data, idx, override)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            for k, g in grads.items():
                model.params[k] -= cfg.learning_rate * g
            batch_losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)) if batch_losses else None,
               "test_loss": dataset_loss(model, data, data.test)}
        result.history.append(row)
        if log is not None:
            log(row)
    return result


def train_vanilla(data: Dataset, cfg: TrainConfig = TrainConfig(), *, log=None) -> TrainResult:
    """Mini-batch gradient descent on mean pixel-wise BCE."""
    if cfg.mode != "vanilla":
        raise ValueError("train_vanilla needs cfg.mode == 'vanilla'")
    return _fit(data, cfg, False, log=log)


def train_adversarial(data: Dataset, cfg: TrainConfig = TrainConfig(mode="adversarial"), *, log=None) -> TrainResult:
    """As vanilla, but ``adv_fraction`` of every batch is attacked with the current parameters first."""
    if cfg.mode != "adversarial":
        raise ValueError("train_adversarial needs cfg.mode == 'adversarial'")
    return _fit(data, cfg, True, log=log)


def train(data: Dataset, cfg: TrainConfig, *, log=None) -> TrainResult:
    return (train_adversarial if cfg.mode == "adversarial" else train_vanilla)(data, cfg, log=log)


# -- evaluation table ------------------------------------------------------

@dataclass(frozen=True)
class TableAttack:
    name: str
    config: perturb.AttackConfig | None   # None -> clean


def table_attacks(iterations: int = 100, restarts: int = 5, seed: int = 0) -> list[TableAttack]:
    """The six evaluation rows: clean, random 1%, score attack 1%/5%, loss attack 1%/5%."""
    def c(mode, b):
        return perturb.AttackConfig(mode=mode, budget_fraction=b, iterations=iterations, restarts=restarts, seed=seed)

    return [
        TableAttack("clean", None),
        TableAttack("random", c("random", 0.01)),
        TableAttack("score", c("score", 0.01)),
        TableAttack("score", c("score", 0.05)),
        TableAttack("loss", c("loss", 0.01)),
        TableAttack("loss", c("loss", 0.05)),
    ]


@dataclass
class SampleRecord:
    model: str
    attack: str
    budget: float
    layout_id: str
    score: float
    nrms: float
    ssim: float
    bce: float
    eps0: int
    moved: int
    identical: bool


def _predict(model, tgt: perturb.AttackTarget, coords):
    if model.kind == "fcn":
        p, cache = model.forward(tgt.engine.maps(coords))
        return p, cache["logits"][0]
    bins, _ = model.forward(tgt.graph(), coords)
    return bins, None


def _bce(p, logits, label):
    if logits is not None:
        return float(predictor._bce_batch(logits[None], label[None])[0][0])
    return predictor.bce_from_probs(p, label)[0]


def evaluate_sample(model, tgt: perturb.AttackTarget, label, attack: TableAttack, rng) -> tuple:
    """(prediction, perturbation) for one layout under one attack row."""
    cfg = attack.config
    if cfg is None:
        pert = perturb.Perturbation.zeros(tgt.n)
    elif cfg.mode == "random":
        pert = perturb.random_perturb(tgt, cfg.budget_fraction, rng)
    else:
        pert = perturb.pgd_momentum(tgt, model, label if cfg.mode == "loss" else None, cfg, rng=rng).perturbation
    p, logits = _predict(model, tgt, tgt.x + pert.delta)
    return p, logits, pert


def evaluate_table(models: dict, data: Dataset, attacks: list[TableAttack] | None = None, *,
                   seed: int = 0, log=None):
    """Per-sample records and per-(model, attack) mean rows over the test split."""
    attacks = table_attacks(seed=seed) if attacks is None else attacks
    samples, rows = [], []
    for mi, (mname, model) in enumerate(models.items()):
        for ai, att in enumerate(attacks):
            recs = []
            for i in data.test:
                i = int(i)
                tgt = data.target(i)
                label = data.label(i)
                rng = stream(seed, "eval", ai, i)
                p, logits, pert = evaluate_sample(model, tgt, label, att, rng)
                if att.config is None:
                    identical = True
                else:
                    moved = apply_perturbation(tgt.layout, pert, box=tgt.box, strict=False)
                    identical = oracle.invariance_check(tgt.layout, moved).identical
                recs.append(SampleRecord(
                    mname, att.name, 0.0 if att.config is None else att.config.budget_fraction, data.ids[i],
                    metrics.congestion_score(p), metrics.nrms(p, label), metrics.ssim(p, label),
                    _bce(p, logits, label), pert.eps0, pert.n_moved, bool(identical)))
            samples.extend(recs)
            row = {
                "model": mname, "attack": att.name, "budget": recs[0].budget if recs else 0.0,
                "score": float(np.mean([r.score for r in recs])) if recs else float("nan"),
                "nrms": float(np.mean([r.nrms for r in recs])) if recs else float("nan"),
                "ssim": float(np.mean([r.ssim for r in recs])) if recs else float("nan"),
                "bce": float(np.mean([r.bce for r in recs])) if recs else float("nan"),
            }
            rows.append(row)
            if log is not None:
                log(row)
    return rows, samples


HIST_BINS = {"nrms": np.linspace(0.0, 1.0, 21), "ssim": np.linspace(-1.0, 1.0, 41)}


def histograms(samples: list[SampleRecord]):
    """Counts of per-layout NRMS and SSIM per (model, attack, budget); values are clipped into range."""
    out = []
    keys = []
    for r in samples:
        k = (r.model, r.attack, r.budget)
        if k not in keys:
            keys.append(k)
    for k in keys:
        recs = [r for r in samples if (r.model, r.attack, r.budget) == k]
        for metric, edges in HIST_BINS.items():
            v = np.clip([getattr(r, metric) for r in recs], edges[0], edges[-1])
            counts, _ = np.histogram(v, bins=edges)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                out.append({"model": k[0], "attack": k[1], "budget": k[2], "metric": metric,
                            "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)})
    return out


def config_dict(cfg) -> dict:
    return asdict(cfg)
