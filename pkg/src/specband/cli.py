"""``specband`` command-line interface.

Subcommands: synth, train, eval, select, reduce, pipeline.  Every command
writes its artifacts under ``--out-dir`` together with a ``manifest.json``
that records the resolved configuration, seeds and artifact paths.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .attention import TrainingDiverged, build_model, extract_heatmap, train
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    MinMaxScaler,
    balanced_split,
    load_cube,
    load_ground_truth,
    reduce_bands,
    save_cube,
    save_ground_truth,
    synth_cube,
    to_pixels,
    write_band_index,
)
from .harness import (
    DEFAULT_LAMBDAS,
    Architecture,
    ExperimentConfig,
    band_selection_pipeline,
    lambda_tag,
    metrics_report,
    monte_carlo,
    write_json,
    write_monte_carlo,
    write_pipeline_outputs,
)
from .selection import (
    aggregate_heatmaps,
    read_heatmap_csv,
    read_selected_indices,
    select_bands,
    write_heatmap_csv,
    write_selection_report,
)

log = logging.getLogger("specband")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: list
    artifacts: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add(self, key, path):
        self.artifacts[key] = str(path)

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        self.artifacts["manifest"] = str(path)
        write_json(path, self.__dict__)
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ----------------------------------------------------------------- helpers


def _load_pixels(data, gt, header=None):
    cube = load_cube(data, header)
    if gt is None:
        raise DataError("ground truth path is required")
    labels = load_ground_truth(gt, cube.rows, cube.cols)
    return cube, to_pixels(cube, labels)


def _experiment(args, **extra):
    """ExperimentConfig from ``--config`` (if any) overridden by flags."""
    overrides = dict(base_seed=args.seed, jobs=args.jobs, **extra)
    try:
        if args.config:
            return ExperimentConfig.from_file(args.config, **overrides)
        return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lambdas(values):
    lams = tuple(values) if values else DEFAULT_LAMBDAS
    bad = [v for v in lams if not 0 < v < 0.5]
    if bad:
        raise ConfigError(f"--lambda values must lie in (0, 0.5): {bad}")
    return lams


# ---------------------------------------------------------------- commands


def cmd_synth(args, manifest):
    planted = [int(t) for t in args.planted.split(",") if t.strip()]
    cube, gt = synth_cube(args.bands, args.classes, planted, sigma=args.sigma, rows=args.rows,
                          cols=args.cols, seed=args.seed, amplitude=args.amplitude)
    out = _out_dir(args)
    data_path, hdr_path = save_cube(cube, out / f"{args.name}.bin")
    gt_path = out / f"{args.name}_gt.bin"
    save_ground_truth(gt, gt_path)
    manifest.add("cube", data_path)
    manifest.add("header", hdr_path)
    manifest.add("gt", gt_path)
    print(f"wrote {data_path} ({cube.rows}x{cube.cols}x{cube.bands}) and {gt_path}")


def _arch_from_args(args):
    if args.blocks not in (2, 3, 4):
        raise ConfigError(f"--blocks must be 2, 3 or 4 (got {args.blocks})")
    return Architecture(args.blocks, args.attention)


def cmd_train(args, manifest):
    arch = _arch_from_args(args)
    cfg = _experiment(args, runs=1, architectures=(arch,), max_epochs=args.max_epochs,
                      patience=args.patience, cube=args.data, gt=args.gt, header=args.header)
    manifest.config = cfg.to_dict()
    _, pixels = _load_pixels(args.data, args.gt, args.header)
    seed = cfg.seed_for(0)
    manifest.seeds = [seed]
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

    out = _out_dir(args)
    ckpt = save_checkpoint(out / "model.ckpt", model,
                           extras={"scaler_lo": scaler.lo, "scaler_hi": scaler.hi},
                           meta={"split_seed": seed, "best_epoch": hist.best_epoch})
    hist_path = out / "history.csv"
    with open(hist_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "val_acc"])
        w.writeheader()
        w.writerows(hist.rows())
    report_path = out / "metrics.json"
    write_json(report_path, {"arch": arch.name, "epochs": hist.epochs, "best_epoch": hist.best_epoch,
                             "best_val_acc": hist.best_val_acc, **report.__dict__})
    manifest.add("checkpoint", ckpt)
    manifest.add("history", hist_path)
    manifest.add("metrics", report_path)
    if arch.attention:
        hm_path = out / "heatmap.csv"
        write_heatmap_csv(hm_path, extract_heatmap(model, x_tr, provenance=(f"train:{arch.name}",)))
        manifest.add("heatmap", hm_path)
    print(f"{arch.name}: {hist.epochs} epochs (best {hist.best_epoch}), "
          f"test AA {report.average_accuracy:.4f} kappa {report.kappa:.4f}")


def cmd_eval(args, manifest):
    out = _out_dir(args)
    if args.checkpoint:
        try:
            model, extras, meta = load_checkpoint(args.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise DataError(str(exc)) from exc
        _, pixels = _load_pixels(args.data, args.gt, args.header)
        if args.selection:
            pixels = pixels.with_bands(read_selected_indices(args.selection))
        seed = args.seed if args.seed is not None else int(meta.get("split_seed", 0))
        manifest.seeds = [seed]
        x_te, y_te = balanced_split(pixels, seed).subset(pixels, "test")
        scaler = MinMaxScaler(extras["scaler_lo"], extras["scaler_hi"])
        if x_te.shape[1] != model.bands:
            raise DataError(f"checkpoint expects {model.bands} bands, data has {x_te.shape[1]}")
        report = metrics_report(model.predict(scaler.transform(x_te)), y_te, pixels.num_classes)
        path = out / "metrics.json"
        write_json(path, report.__dict__)
        manifest.add("metrics", path)
        print(f"test AA {report.average_accuracy:.4f} kappa {report.kappa:.4f}")
        return
    archs = tuple(Architecture.parse(a) for a in args.arch) if args.arch else None
    cfg = _experiment(args, runs=args.runs, cube=args.data, gt=args.gt, header=args.header,
                      **({"architectures": archs} if archs else {}))
    manifest.config = cfg.to_dict()
    manifest.seeds = [cfg.seed_for(r) for r in range(cfg.runs)]
    _, pixels = _load_pixels(args.data, args.gt, args.header)
    bands = read_selected_indices(args.selection) if args.selection else None
    result = monte_carlo(cfg, pixels, bands=bands)
    for key, p in zip(("runs_csv", "runs_json"), write_monte_carlo(out, result, "runs")):
        manifest.add(key, p)
    for name, agg in result.aggregate.items():
        print(f"{name}: AA {agg['aa_mean']:.4f} +- {agg['aa_std']:.4f}, "
              f"kappa {agg['kappa_mean']:.4f} +- {agg['kappa_std']:.4f} "
              f"({agg['completed']} runs, {agg['failed']} failed)")


def cmd_select(args, manifest):
    lams = _lambdas(args.lam)
    if not args.heatmaps:
        raise ConfigError("select needs at least one --heatmaps file")
    maps = [read_heatmap_csv(p) for p in args.heatmaps]
    heatmap = aggregate_heatmaps(maps)
    out = _out_dir(args)
    hm_path = out / "heatmap.csv"
    write_heatmap_csv(hm_path, heatmap)
    manifest.add("heatmap", hm_path)
    manifest.config = {"lambdas": list(lams), "heatmaps": [str(p) for p in args.heatmaps]}
    for lam in lams:
        sel = select_bands(heatmap, lam)
        path = out / f"selection_{lambda_tag(lam)}.json"
        write_selection_report(path, sel)
        manifest.add(f"selection_{lambda_tag(lam)}", path)
        print(f"lambda {lam:g}: {sel.selected.size} bands {sel.selected.tolist()}")


def cmd_reduce(args, manifest):
    cube = load_cube(args.cube, args.header)
    selection = read_selected_indices(args.selection)
    reduced = reduce_bands(cube, selection)
    out = _out_dir(args)
    stem = args.name or f"{Path(args.cube).stem}_reduced"
    data_path, hdr_path = save_cube(reduced, out / f"{stem}.bin")
    side = out / f"{stem}.bands.txt"
    write_band_index(side, selection)
    manifest.config = {"cube": str(args.cube), "selection": str(args.selection)}
    manifest.add("cube", data_path)
    manifest.add("header", hdr_path)
    manifest.add("bands", side)
    print(f"wrote {data_path} with {reduced.bands} of {cube.bands} bands")


def cmd_pipeline(args, manifest):
    extra = {}
    if args.runs is not None:
        extra["runs"] = args.runs
    if args.arch:
        extra["architectures"] = tuple(Architecture.parse(a) for a in args.arch)
    if args.lam:
        extra["lambdas"] = _lambdas(args.lam)
    if args.no_reduced:
        extra["eval_reduced"] = False
    extra["cube"], extra["gt"], extra["header"] = args.data, args.gt, args.header
    cfg = _experiment(args, **extra)
    if not cfg.cube:
        raise ConfigError("no cube given (--data or 'cube' in the config file)")
    manifest.config = cfg.to_dict()
    manifest.seeds = [cfg.seed_for(r) for r in range(cfg.runs)]
    _, pixels = _load_pixels(cfg.cube, cfg.gt, cfg.header)
    result = band_selection_pipeline(cfg, pixels)
    paths = write_pipeline_outputs(_out_dir(args), result, cfg)
    manifest.add("heatmap", paths["heatmap"])
    manifest.add("summary", paths["summary"])
    for i, p in enumerate(paths["run_heatmaps"]):
        manifest.add(f"run_heatmap_{i}", p)
    for lam, p in paths["selections"].items():
        manifest.add(f"selection_{lambda_tag(lam)}", p)
    for lam, ps in paths["reduced"].items():
        manifest.add(f"reduced_{lambda_tag(lam)}", ps[0])
    manifest.add("runs_full", paths["full"][0])
    for lam, sel in result.selections.items():
        print(f"lambda {lam:g}: {sel.selected.size} bands {sel.selected.tolist()}")


# ------------------------------------------------------------------ parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    common.add_argument("--out-dir", default="out", help="artifact directory")
    common.add_argument("--config", default=None, help="INI file with an [experiment] section")

    parser = argparse.ArgumentParser(prog="specband", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, required=True):
        p.add_argument("--data", required=required, help="cube payload (raw float32 BIP or CSV)")
        p.add_argument("--header", default=None, help="cube header (default: <data>.hdr)")
        p.add_argument("--gt", required=required, help="ground truth (raw uint16 or CSV)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cube")
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--planted", required=True, help="comma-separated band indices")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--rows", type=int, default=30)
    p.add_argument("--cols", type=int, default=60)
    p.add_argument("--name", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one network")
    data_args(p)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint, or run Monte-Carlo evaluation")
    data_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--selection", default=None, help="band index list or selection report")
    p.add_argument("--arch", nargs="+", default=None, help="e.g. 2 2A 3A")
    p.add_argument("--runs", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", parents=[common], help="aggregate heatmaps and select bands")
    p.add_argument("--heatmaps", nargs="+", default=[])
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("reduce", parents=[common], help="keep only selected bands of a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--header", default=None)
    p.add_argument("--selection", required=True, help="band index list or selection report")
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("pipeline", parents=[common], help="full band-selection experiment")
    data_args(p, required=False)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--arch", nargs="+", default=None)
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=None)
    p.add_argument("--no-reduced", action="store_true", help="skip reduced-data evaluation")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _setup_logging():
    level = os.environ.get("SPECBAND_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    manifest = RunManifest(args.command, argv, config={}, seeds=[], started=_now())
    try:
        if args.command == "eval" and args.runs is not None and args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        if args.command == "pipeline" and args.runs is not None and args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        args.func(args, manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest.finished = _now()
    manifest.write(_out_dir(args))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
