"""Metrics, Monte-Carlo cross-validation and the band-selection pipeline."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import AttentionCnnConfig, TrainingDiverged, build_model, extract_heatmap, train
from .data import LabeledPixels, MinMaxScaler, balanced_split
from .selection import (
    BandSelection,
    Heatmap,
    aggregate_heatmaps,
    select_bands,
    write_heatmap_csv,
    write_selection_report,
)

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.01, 0.02, 0.03, 0.04, 0.05)


# ------------------------------------------------------------------ metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return self.counts.shape[0]


def confusion(predictions, labels, num_classes=None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if num_classes is None:
        num_classes = int(max(predictions.max(initial=-1), labels.max(initial=-1))) + 1
    for name, v in (("label", labels), ("prediction", predictions)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa, ``(p_o - p_e) / (1 - p_e)``.

    Evaluated on integer counts as ``(n * trace - sum(r * c)) / (n**2 - sum(r * c))``
    so the only rounding is the final division.
    """
    n = int(cm.n)
    if n == 0:
        raise ValueError("kappa of an empty confusion matrix")
    counts = [[int(v) for v in row] for row in cm.counts]
    rows = [sum(r) for r in counts]
    cols = [sum(c) for c in zip(*counts)]
    chance = sum(r * c for r, c in zip(rows, cols))
    agree = sum(counts[i][i] for i in range(len(counts)))
    if chance >= n * n:
        raise ValueError("kappa undefined: expected agreement is 1")
    return (n * agree - chance) / (n * n - chance)


def average_accuracy(cm: ConfusionMatrix):
    """Per-class accuracies (NaN for absent classes) and their unweighted mean."""
    rows = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(cm.counts) / rows, np.nan)
    absent = np.flatnonzero(rows == 0)
    if absent.size:
        warnings.warn(f"classes {absent.tolist()} absent from the labels; excluded from AA")
    if absent.size == rows.size:
        raise ValueError("no class present in the labels")
    return per_class, float(np.nanmean(per_class))


@dataclass
class MetricsReport:
    per_class_accuracy: list
    average_accuracy: float
    kappa: float
    overall_accuracy: float


def metrics_report(predictions, labels, num_classes) -> MetricsReport:
    cm = confusion(predictions, labels, num_classes)
    per_class, aa = average_accuracy(cm)
    try:
        k = kappa(cm)
    except ValueError:
        k = float("nan")
    return MetricsReport([float(a) for a in per_class], aa, k, float(np.trace(cm.counts) / cm.n))


# --------------------------------------------------------------- experiment


@dataclass(frozen=True)
class Architecture:
    blocks: int
    attention: bool

    @property
    def name(self):
        return f"CNN-{self.blocks}{'A' if self.attention else ''}"

    @classmethod
    def parse(cls, text):
        """``"2A"`` / ``"CNN-3"`` / ``"4"`` -> Architecture."""
        t = str(text).strip().upper().removeprefix("CNN-")
        att = t.endswith("A")
        digits = t[:-1] if att else t
        if digits not in ("2", "3", "4"):
            raise ValueError(f"unsupported architecture {text!r} (use 2, 3, 4 with optional A)")
        return cls(int(digits), att)


@dataclass
class ExperimentConfig:
    runs: int = 30
    architectures: tuple = (Architecture(2, True), Architecture(3, True), Architecture(4, True))
    lambdas: tuple = DEFAULT_LAMBDAS
    base_seed: int = 0
    batch_size: int = 64
    patience: int = 25
    max_epochs: int = 200
    lr: float = 1e-3
    channels: tuple = (96, 54, 36, 24)
    hidden: tuple = (512, 128)
    jobs: int = 1
    eval_reduced: bool = True
    cube: str | None = None
    header: str | None = None
    gt: str | None = None

    def __post_init__(self):
        self.architectures = tuple(
            a if isinstance(a, Architecture) else Architecture.parse(a) for a in self.architectures
        )
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.channels = tuple(int(c) for c in self.channels)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.architectures:
            raise ValueError("no architectures configured")
        bad = [v for v in self.lambdas if not 0 < v < 0.5]
        if bad:
            raise ValueError(f"contamination rates must lie in (0, 0.5): {bad}")
        if self.batch_size < 2 or self.patience < 1 or self.max_epochs < 1 or self.jobs < 1:
            raise ValueError("batch_size >= 2, patience >= 1, max_epochs >= 1, jobs >= 1 required")

    def seed_for(self, run):
        return self.base_seed + run

    def model_config(self, arch: Architecture, num_classes, seed):
        return AttentionCnnConfig(num_blocks=arch.blocks, channels=self.channels, hidden=self.hidden,
                                  num_classes=num_classes, use_attention=arch.attention, seed=seed)

    def to_dict(self):
        d = asdict(self)
        d["architectures"] = [a.name for a in self.architectures]
        for k in ("lambdas", "channels", "hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_file(cls, path, **overrides):
        """Read an ``[experiment]`` section of an INI-style key/value file."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        if "experiment" not in parser:
            raise ValueError(f"{path}: missing [experiment] section")
        sec = parser["experiment"]
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in sec.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r}")
            kw[key] = _coerce(key, raw)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


_LISTS = {"architectures": str, "lambdas": float, "channels": int, "hidden": int}
_SCALARS = {"runs": int, "base_seed": int, "batch_size": int, "patience": int, "max_epochs": int,
            "lr": float, "jobs": int}


def _coerce(key, raw):
    if key in _LISTS:
        return tuple(_LISTS[key](t) for t in raw.replace(",", " ").split())
    if key in _SCALARS:
        return _SCALARS[key](raw)
    if key == "eval_reduced":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw.strip()


# --------------------------------------------------------------- single run


@dataclass
class RunRecord:
    run: int
    seed: int
    arch: str
    attention: bool
    bands: int
    aa: float = float("nan")
    kappa: float = float("nan")
    overall: float = float("nan")
    epochs: int = 0
    best_epoch: int = 0
    seconds: float = 0.0
    status: str = "ok"
    error: str = ""
    per_class: list = field(default_factory=list)
    heatmap: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("heatmap")
        return d


def run_once(pixels: LabeledPixels, arch: Architecture, run: int, cfg: ExperimentConfig,
             want_heatmap=False) -> RunRecord:
    """Split, train and test one architecture for one Monte-Carlo run."""
    seed = cfg.seed_for(run)
    rec = RunRecord(run, seed, arch.name, arch.attention, pixels.spectra.shape[1])
    t0 = time.perf_counter()
    try:
        split = balanced_split(pixels, seed)
        x_tr, y_tr = split.subset(pixels, "train")
        x_va, y_va = split.subset(pixels, "validation")
        x_te, y_te = split.subset(pixels, "test")
        scaler = MinMaxScaler().fit(x_tr)
        x_tr, x_va, x_te = (scaler.transform(v) for v in (x_tr, x_va, x_te))
        model = build_model(cfg.model_config(arch, pixels.num_classes, seed), x_tr.shape[1])
        model, hist = train(model, x_tr, y_tr, x_va, y_va, batch_size=cfg.batch_size,
                            patience=cfg.patience, max_epochs=cfg.max_epochs, lr=cfg.lr)
        report = metrics_report(model.predict(x_te), y_te, pixels.num_classes)
        rec.aa, rec.kappa, rec.overall = report.average_accuracy, report.kappa, report.overall_accuracy
        rec.per_class = report.per_class_accuracy
        rec.epochs, rec.best_epoch = hist.epochs, hist.best_epoch
        if want_heatmap and arch.attention:
            rec.heatmap = extract_heatmap(model, x_tr).scores
    except (ValueError, TrainingDiverged) as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("run %d %s failed: %s", run, arch.name, exc)
    rec.seconds = time.perf_counter() - t0
    return rec


def _run_task(args):
    return run_once(*args)


# ---------------------------------------------------------------- Monte Carlo


@dataclass
class MonteCarloResult:
    records: list
    aggregate: dict
    bands: list | None = None


def aggregate_records(records):
    """Mean/std of AA and kappa per architecture over completed runs."""
    out = {}
    for name in sorted({r.arch for r in records}):
        mine = sorted((r for r in records if r.arch == name), key=lambda r: r.run)
        ok = [r for r in mine if r.status == "ok"]
        aa = np.array([r.aa for r in ok])
        kp = np.array([r.kappa for r in ok])
        out[name] = {
            "completed": len(ok),
            "failed": len(mine) - len(ok),
            "aa_mean": float(aa.mean()) if ok else float("nan"),
            "aa_std": float(aa.std()) if ok else float("nan"),
            "kappa_mean": float(np.nanmean(kp)) if ok else float("nan"),
            "kappa_std": float(np.nanstd(kp)) if ok else float("nan"),
        }
    return out


def monte_carlo(cfg: ExperimentConfig, pixels: LabeledPixels, bands=None, want_heatmaps=False,
                architectures=None) -> MonteCarloResult:
    """Repeat split/train/test ``cfg.runs`` times for every architecture.

    ``bands`` restricts the spectra to a band subset; split seeds are the
    same as for the full data so results pair up run by run.
    """
    data = pixels.with_bands(bands) if bands is not None else pixels
    archs = architectures or cfg.architectures
    tasks = [(data, a, r, cfg, want_heatmaps) for r in range(cfg.runs) for a in archs]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            records = list(pool.map(_run_task, tasks))
    else:
        records = [_run_task(t) for t in tasks]
    for r in records:
        log.info("run %d %s: AA %.4f kappa %.4f (%d epochs, %.1fs) %s",
                 r.run, r.arch, r.aa, r.kappa, r.epochs, r.seconds, r.status)
    return MonteCarloResult(records, aggregate_records(records),
                            None if bands is None else [int(b) for b in bands])


# ------------------------------------------------------------------ pipeline


@dataclass
class PipelineResult:
    heatmap: Heatmap
    run_heatmaps: list
    selections: dict  # lambda -> BandSelection
    full: MonteCarloResult
    reduced: dict = field(default_factory=dict)  # lambda -> MonteCarloResult


def band_selection_pipeline(cfg: ExperimentConfig, pixels: LabeledPixels) -> PipelineResult:
    """Train, pool attention heatmaps, select bands per lambda, re-evaluate."""
    if not any(a.attention for a in cfg.architectures):
        raise ValueError("the pipeline needs at least one attention architecture")
    full = monte_carlo(cfg, pixels, want_heatmaps=True)
    run_maps = [
        Heatmap.from_scores(r.heatmap, (f"run{r.run}:{r.arch}",))
        for r in full.records if r.heatmap is not None
    ]
    if not run_maps:
        raise RuntimeError("every attention run failed; no heatmaps to aggregate")
    heatmap = aggregate_heatmaps(run_maps)
    selections = {lam: select_bands(heatmap, lam) for lam in cfg.lambdas}
    reduced = {}
    if cfg.eval_reduced:
        cache = {}
        for lam, sel in selections.items():
            key = tuple(sel.selected.tolist())
            if not key:
                continue
            if key not in cache:
                cache[key] = monte_carlo(cfg, pixels, bands=list(key))
            reduced[lam] = cache[key]
    return PipelineResult(heatmap, run_maps, selections, full, reduced)


# --------------------------------------------------------------- persistence


CSV_FIELDS = ("run", "arch", "attention", "aa", "kappa", "epochs", "seconds")


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.run, r.arch, int(r.attention), repr(float(r.aa)), repr(float(r.kappa)),
                        r.epochs, repr(float(r.seconds))])


def read_records_csv(path):
    with open(path, newline="") as fh:
        return [
            {"run": int(row["run"]), "arch": row["arch"], "attention": row["attention"] == "1",
             "aa": float(row["aa"]), "kappa": float(row["kappa"]), "epochs": int(row["epochs"]),
             "seconds": float(row["seconds"])}
            for row in csv.DictReader(fh)
        ]


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2) + "\n")


def records_to_json(records):
    return json.dumps([_jsonable(r.to_dict()) for r in records])


def records_from_json(text):
    out = []
    for d in json.loads(text):
        d = {k: (float("nan") if v is None and k in ("aa", "kappa", "overall") else v) for k, v in d.items()}
        out.append(RunRecord(**d))
    return out


def write_monte_carlo(out_dir, result: MonteCarloResult, stem):
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    write_records_csv(csv_path, result.records)
    write_json(json_path, {"bands": result.bands, "aggregate": result.aggregate,
                           "runs": [r.to_dict() for r in result.records]})
    return [csv_path, json_path]


def lambda_tag(lam):
    return f"lambda{lam:g}"


def write_pipeline_outputs(out_dir, result: PipelineResult, cfg: ExperimentConfig):
    """Write every pipeline artifact under ``out_dir``; returns their paths."""
    out_dir = Path(out_dir)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    paths = {"heatmap": out_dir / "heatmap.csv", "run_heatmaps": [], "selections": {},
             "reduced": {}}
    write_heatmap_csv(paths["heatmap"], result.heatmap)
    for hm in result.run_heatmaps:
        p = out_dir / "heatmaps" / (hm.provenance[0].replace(":", "_") + ".csv")
        write_heatmap_csv(p, hm)
        paths["run_heatmaps"].append(p)
    for lam, sel in result.selections.items():
        p = out_dir / f"selection_{lambda_tag(lam)}.json"
        write_selection_report(p, sel)
        paths["selections"][lam] = p
    paths["full"] = write_monte_carlo(out_dir, result.full, "runs_full")
    for lam, mc in result.reduced.items():
        paths["reduced"][lam] = write_monte_carlo(out_dir, mc, f"runs_reduced_{lambda_tag(lam)}")
    summary = {
        "config": cfg.to_dict(),
        "seeds": [cfg.seed_for(r) for r in range(cfg.runs)],
        "full": result.full.aggregate,
        "selections": {lam: {"count": int(s.selected.size), "selected": s.selected.tolist(),
                             "status": s.status} for lam, s in result.selections.items()},
        "reduced": {lam: mc.aggregate for lam, mc in result.reduced.items()},
    }
    paths["summary"] = out_dir / "summary.json"
    write_json(paths["summary"], summary)
    return paths


def selection_summary(selections: dict[float, BandSelection]):
    return {lam: s.selected.tolist() for lam, s in selections.items()}
