"""Command-line entry point: ``biodiscover <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .biomass import fit_all
from .classify import (
    BaselineClassifier,
    BaselineModel,
    ExternalScoreClassifier,
    feature_matrix,
    image_features,
    load_external_scores,
    train_baseline,
    write_scores,
)
from .config import RunConfig, load_config
from .core import (
    CAMERAS,
    CameraSettings,
    ConfigError,
    DataError,
    Dataset,
    FrameImage,
    LabelRegistry,
    SpecimenRecord,
    dataset_statistics,
    load_manifest,
    settings_grid_cells,
    validate_dataset,
    write_manifest,
)
from .devicesim import COMPACT_SENSOR, ClassRouting, EventLog, Rig, SensorConfig, SizeRouting, run_session
from .evaluation import (
    camera_ablation,
    evaluate,
    make_splits,
    nmax_sweep,
    save_plans,
    settings_grid,
    write_confusion_csv,
)
from .imgproc import BackgroundModel, calibrate, crop, detect, write_geometry_sidecar

log = logging.getLogger("biodiscover.cli")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


# -- small I/O helpers ----------------------------------------------------------

def save_png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    # fast zlib level: noisy sensor frames barely compress at higher levels
    Image.fromarray(arr).save(path, compress_level=1)


def load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=False, default=str) + "\n", encoding="utf-8")


def sensor_for(cfg: RunConfig) -> SensorConfig:
    from dataclasses import replace

    base = COMPACT_SENSOR if cfg.compact_sensor else SensorConfig()
    return replace(
        base,
        trigger_threshold=cfg.trigger_threshold,
        tolerance_k=cfg.tolerance_k,
        tolerance_floor=cfg.tolerance_floor,
    )


def classifier_for(cfg: RunConfig, ds: Dataset, scores: Path | None):
    if scores is not None:
        load = load_external_scores(scores, ds)
        if load.missing:
            log.warning("%d images have no external score and are ignored", len(load.missing))
        return ExternalScoreClassifier(load.scores, ds.n_classes)
    return BaselineClassifier(cfg.schedule)


def require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return Path(path)


# -- subcommands ----------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig, out: Path) -> dict:
    from .syndata import PRESETS, SinkModel, generate_cohort

    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; choose from {sorted(PRESETS)}")
    models = PRESETS[cfg.preset]()
    cells = settings_grid_cells() if args.grid else [cfg.settings]
    if args.dry_run:
        return {"cells": [c.key for c in cells], "species": [m.name for m in models]}
    rig = Rig(sensor_for(cfg))
    written = {}
    for cell in cells:
        cell_dir = out / cell.key if args.grid else out
        writer = raw_writer = None
        raw_index: dict[str, dict[str, list]] = {}
        if args.images:
            def writer(sid, frame, _truth, cell_dir=cell_dir):
                frame.path = cell_dir / "images" / sid / f"{frame.image_id}.png"
                frame.mask_path = frame.path.with_name(f"{frame.image_id}_mask.png")
                save_png(frame.path, frame.pixels)
                save_png(frame.mask_path, frame.mask)
                write_geometry_sidecar(frame, frame.path.with_suffix(".json"))
        if args.raw:
            def raw_writer(sid, image_id, cam, raw, cell_dir=cell_dir):
                path = cell_dir / "raw" / sid / f"{image_id}.png"
                save_png(path, raw)
                raw_index.setdefault(sid, {}).setdefault(str(cam), []).append(
                    {"image_id": image_id, "file": str(path.relative_to(cell_dir))}
                )
        cohort = generate_cohort(
            models, cfg.specimens_per_species, cell, cfg.seed, rig=rig, sink=SinkModel(cfg.sink_time_s),
            writer=writer, raw_writer=raw_writer,
        )
        write_manifest(cohort.dataset, cell_dir / "manifest.json")
        cohort.write_sidecar(cell_dir / "truth.json")
        if args.raw:
            write_raw_manifest(cell_dir, cohort.dataset, raw_index, rig, cell, cfg.seed)
        written[cell.key] = {"specimens": len(cohort.dataset), "images": cohort.dataset.n_images()}
    return {"cells": written}


def write_raw_manifest(cell_dir: Path, ds: Dataset, raw_index: dict, rig: Rig, settings: CameraSettings, seed: int) -> None:
    background = {}
    rng = np.random.default_rng([seed, 7])
    for cam in CAMERAS:
        files = []
        for i in range(rig.sensor.calibration_frames):
            frame, _ = rig.raw_frame(cam, None, (0.0, 0.0), settings, rng)
            path = cell_dir / "raw" / "background" / f"c{cam}_{i:02d}.png"
            save_png(path, frame)
            files.append(str(path.relative_to(cell_dir)))
        background[str(cam)] = files
    doc = {
        "settings": settings.to_dict(),
        "species": ds.registry.names,
        "cuvette_left": rig.sensor.cuvette_columns[0],
        "background": background,
        "specimens": [
            {
                "specimen_id": s.specimen_id,
                "species": s.label.name,
                "dry_weight_g": s.dry_weight_g,
                "raw": raw_index.get(s.specimen_id, {}),
            }
            for s in ds.specimens
        ],
    }
    write_json(cell_dir / "raw_manifest.json", doc)


def load_raw_manifest(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read raw manifest {path}: {exc}") from exc
    for key in ("settings", "background", "specimens"):
        if key not in doc:
            raise DataError(f"raw manifest {path} lacks {key!r}")
    return doc


def calibrate_from(doc: dict, root: Path, cfg: RunConfig) -> dict[int, BackgroundModel]:
    models = {}
    for cam, files in sorted(doc["background"].items()):
        frames = [load_png(root / f) for f in files]
        models[int(cam)] = calibrate(frames, cfg.tolerance_k, cfg.tolerance_floor, cfg.trigger_threshold)
    return models


def cmd_calibrate(args, cfg: RunConfig, out: Path) -> dict:
    path = require(args.raw_manifest, "--raw-manifest")
    doc = load_raw_manifest(path)
    models = calibrate_from(doc, path.parent, cfg)
    summary = {
        str(cam): {"shape": list(m.shape), "mean_tolerance": float(m.tolerance.mean()), "trigger_threshold": m.trigger_threshold}
        for cam, m in models.items()
    }
    if not args.dry_run:
        for cam, m in models.items():
            m.save(out / f"background_c{cam}.npz")
        write_json(out / "calibration.json", summary)
    return {"cameras": summary}


def cmd_process(args, cfg: RunConfig, out: Path) -> dict:
    path = require(args.raw_manifest, "--raw-manifest")
    root = path.parent
    doc = load_raw_manifest(path)
    if args.backgrounds is not None:
        models = {cam: BackgroundModel.load(Path(args.backgrounds) / f"background_c{cam}.npz") for cam in CAMERAS}
    else:
        models = calibrate_from(doc, root, cfg)
    registry = LabelRegistry(doc.get("species") or sorted({s["species"] for s in doc["specimens"]}))
    settings = CameraSettings(**doc["settings"])
    cuvette_left = doc.get("cuvette_left")
    specimens, missed = [], 0
    for entry in doc["specimens"]:
        frames = []
        for cam, items in sorted(entry["raw"].items()):
            for item in items:
                raw = load_png(root / item["file"])
                det = detect(raw, models[int(cam)])
                if det is None:
                    missed += 1
                    continue
                frame = crop(raw, det.bbox, centroid=det.centroid, mask=det.mask, cuvette_left=cuvette_left,
                             image_id=item["image_id"], camera_id=int(cam), capture_time=float(item.get("capture_time", 0.0)))
                frame.features = image_features(frame)
                if not args.dry_run:
                    frame.path = out / "images" / entry["specimen_id"] / f"{frame.image_id}.png"
                    frame.mask_path = frame.path.with_name(f"{frame.image_id}_mask.png")
                    save_png(frame.path, frame.pixels)
                    save_png(frame.mask_path, frame.mask)
                    write_geometry_sidecar(frame, frame.path.with_suffix(".json"))
                frames.append(frame.without_pixels())
        specimens.append(SpecimenRecord(entry["specimen_id"], registry.label(entry["species"]), frames, entry.get("dry_weight_g")))
    ds = Dataset(settings, specimens, registry)
    if not args.dry_run:
        write_manifest(ds, out / "manifest.json")
    return {"specimens": len(ds), "images": ds.n_images(), "untriggered_frames": missed}


def load_dataset(args) -> Dataset:
    return load_manifest(require(args.manifest, "--manifest"))


def cmd_ingest(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args)
    violations = validate_dataset(ds)
    stats = dataset_statistics(ds)
    report = {
        "settings": ds.settings.to_dict(),
        "statistics": {name: {"specimens": s, "images": i} for name, (s, i) in stats.items()},
        "violations": [v.to_dict() for v in violations],
    }
    if not args.dry_run:
        write_json(out / "ingest_report.json", report)
    if violations:
        raise DataError(f"{len(violations)} manifest violations", [f"{v.kind}: {v.message}" for v in violations])
    return {"specimens": len(ds), "images": ds.n_images()}


def cmd_screen(args, cfg: RunConfig, out: Path) -> dict:
    from .imgproc import outlier_screen

    ds = load_dataset(args)
    result = outlier_screen(ds, cfg.outlier_sigma)
    if not args.dry_run:
        write_json(out / "outliers.json", {"flagged": [f.to_dict() for f in result.flagged], "skipped": result.skipped})
        with open(out / "outliers.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["specimen_id", "species", "channels", "z_r", "z_g", "z_b"])
            for f in result.flagged:
                w.writerow([f.specimen_id, f.species, "".join(f.channels), *(f"{z:.6f}" for z in f.z_scores)])
    return {"flagged": len(result.flagged), "skipped_species": len(result.skipped)}


def _plans(cfg: RunConfig, ds: Dataset):
    return make_splits(ds, cfg.n_reps, cfg.seed, cfg.fractions)


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args)
    plan = _plans(cfg, ds)[args.repetition] if args.repetition < cfg.n_reps else None
    if plan is None:
        raise ConfigError(f"--repetition must be below n_reps={cfg.n_reps}")
    if args.dry_run:
        return {"train": len(plan.train_ids), "val": len(plan.val_ids), "test": len(plan.test_ids)}
    from .evaluation import model_seed

    model = train_baseline(ds.select(plan.train_ids), ds.select(plan.val_ids), ds.n_classes, cfg.schedule,
                           model_seed(plan), species=ds.registry.names)
    model.save(out / "model.json")
    save_plans([plan], out / "split.json")
    with open(out / "training_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "learning_rate", "train_loss", "val_score"])
        for h in model.metadata["history"]:
            w.writerow([h["epoch"], h["learning_rate"], repr(h["train_loss"]), repr(h["val_score"])])
    test = ds.select(plan.test_ids)
    frames = [f for s in test for f in s.frames]
    write_scores(out / "scores.csv", [f.image_id for f in frames], model.predict_proba(feature_matrix(frames)))
    return {"best_epoch": model.metadata["best_epoch"], "best_val_score": model.metadata["best_val_score"]}


def _write_report(rep, out: Path, stem: str, names) -> None:
    from .aggregate import write_predictions
    from .plotting import plot_confusion

    rep.write_json(out / f"{stem}.json")
    write_confusion_csv(out / f"{stem}_confusion.csv", rep.confusion, rep.species)
    plot_confusion(rep.confusion, rep.species, out / f"{stem}_confusion.png")
    rows = [(p, t) for preds in rep.predictions for p, t in preds]
    write_predictions(out / f"{stem}_predictions.csv", rows, names)


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> dict:
    ds = load_dataset(args)
    plans = _plans(cfg, ds)
    clf = classifier_for(cfg, ds, args.scores)
    if args.dry_run:
        return {"plans": len(plans)}
    rep = evaluate(ds, plans, clf, cfg.rule, jobs=cfg.jobs)
    save_plans(plans, out / "splits.json")
    _write_report(rep, out, "report", ds.registry.names)
    return {"mean": rep.mean, "std": rep.std}


def cmd_grid(args, cfg: RunConfig, out: Path) -> dict:
    from .plotting import plot_grid

    paths = list(args.manifests or [])
    if args.grid_dir is not None:
        paths += sorted(Path(args.grid_dir).glob("*/manifest.json"))
    if not paths:
        raise ConfigError("grid needs --grid-dir or --manifests")
    datasets = {}
    for p in paths:
        ds = load_manifest(require(Path(p), "manifest"))
        if ds.settings in datasets:
            raise DataError(f"two manifests share camera settings {ds.settings.key}")
        datasets[ds.settings] = ds
    first = next(iter(datasets.values()))
    plans = _plans(cfg, first)
    if args.dry_run:
        return {"cells": [c.key for c in datasets]}
    grid = settings_grid(datasets, plans, BaselineClassifier(cfg.schedule), cfg.rule, jobs=cfg.jobs)
    grid.write_csv(out / "grid.csv")
    write_json(out / "grid.json", grid.to_dict())
    plot_grid(grid, out / "grid.png")
    return {"best": grid.best.key, "cells": len(grid.cells)}


def cmd_ablate(args, cfg: RunConfig, out: Path) -> dict:
    from .plotting import plot_ablation

    ds = load_dataset(args)
    plans = _plans(cfg, ds)
    if args.dry_run:
        return {"plans": len(plans)}
    rep = camera_ablation(ds, plans, classifier_for(cfg, ds, args.scores), cfg.rule, cfg.seed, jobs=cfg.jobs)
    write_json(out / "ablation.json", rep.to_dict())
    rep.write_csv(out / "ablation.csv")
    plot_ablation(rep, out / "ablation.png")
    return {name: r.mean for name, r in rep.rows()}


def cmd_sweep(args, cfg: RunConfig, out: Path) -> dict:
    from .plotting import plot_nmax

    ds = load_dataset(args)
    plans = _plans(cfg, ds)
    if args.dry_run:
        return {"nmax": [str(n) for n in cfg.nmax]}
    curve = nmax_sweep(ds, plans, classifier_for(cfg, ds, args.scores), cfg.rule, cfg.nmax, cfg.seed, jobs=cfg.jobs)
    curve.write_csv(out / "nmax.csv")
    write_json(out / "nmax.json", {("inf" if math.isinf(n) else str(n)): r.to_dict() for n, r in curve.reports.items()})
    plot_nmax(curve, out / "nmax.png")
    return {"points": len(curve.points)}


def cmd_biomass(args, cfg: RunConfig, out: Path) -> dict:
    from .plotting import plot_biomass

    ds = load_dataset(args)
    report = fit_all(ds, cfg.area_scale)
    if not args.dry_run:
        report.write_fits_csv(out / "fits.csv")
        report.write_points_csv(out / "biomass_points.csv")
        write_json(out / "biomass.json", {**report.to_dict(), "area_unit": "px2" if cfg.area_scale == 1.0 else "scaled", "bias_correction": cfg.bias_correction})
        plot_biomass(report, out / "biomass.png")
    return {"fits": len(report.fits), "skipped": len(report.skipped)}


def cmd_simulate(args, cfg: RunConfig, out: Path) -> dict:
    from .aggregate import majority_vote
    from .syndata import PRESETS, SinkModel, draw_instances

    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    models = PRESETS[cfg.preset]()
    if args.routing == "size":
        rule = SizeRouting(args.threshold)
    else:
        rule = ClassRouting({m.name: i for i, m in enumerate(models)}, default=len(models))
    if args.dry_run:
        return {"species": len(models), "routing": args.routing}
    rig = Rig(sensor_for(cfg))
    instances = draw_instances(models, cfg.specimens_per_species, cfg.seed, rig.sensor, SinkModel(cfg.sink_time_s))
    order = np.random.default_rng(cfg.seed).permutation(len(instances))
    instances = [instances[i] for i in order]
    predict: Callable | None = None
    if args.model is not None:
        model = BaselineModel.load(require(args.model, "--model"))

        def predict(frames: list[FrameImage]) -> str:
            return model.species[majority_vote(model.predict_frames(frames)).predicted]

    records, events = run_session(instances, cfg.settings, rule, cfg.seed, rig, predict, EventLog())
    events.write_jsonl(out / "events.jsonl")
    with open(out / "session.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["specimen_id", "true_species", "predicted", "n_frames", "mean_area_px2", "container"])
        for r in records:
            w.writerow([r.specimen_id, r.true_species, r.predicted, r.n_frames, f"{r.mean_area_px2:.3f}", r.container])
    return {"specimens": len(records), "events": len(events.entries)}


COMMANDS: dict[str, Callable] = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "calibrate": cmd_calibrate,
    "process": cmd_process,
    "screen": cmd_screen,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "ablate-cameras": cmd_ablate,
    "sweep-nmax": cmd_sweep,
    "biomass-fit": cmd_biomass,
    "simulate": cmd_simulate,
}


# -- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--out", type=Path, dest="output_dir", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallel jobs (-1 = all cores)")
    p.add_argument("--rule", choices=("majority", "weighted"))
    p.add_argument("--n-reps", type=int, dest="n_reps")
    p.add_argument("--exposure", type=int, dest="exposure_us", help="exposure in microseconds")
    p.add_argument("--aperture", type=float, dest="aperture_f", help="aperture f-number")
    p.add_argument("--epochs-per-rate", type=int, dest="epochs_per_rate")
    p.add_argument("--dry-run", action="store_true", help="validate config and inputs without writing")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biodiscover", description="Multi-view specimen imaging and classification pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic cohort")
    _common(p)
    p.add_argument("--preset")
    p.add_argument("--count", type=int, dest="specimens_per_species", help="specimens per species")
    p.add_argument("--grid", action="store_true", help="all nine camera settings")
    p.add_argument("--images", action="store_true", help="write crop and mask PNGs")
    p.add_argument("--raw", action="store_true", help="write raw sensor frames for calibrate/process")
    p.add_argument("--full-sensor", action="store_false", dest="compact_sensor", default=None)
    p.add_argument("--sink-time", type=float, dest="sink_time_s", help="median seconds to cross the field of view")

    for name in ("calibrate", "process"):
        p = sub.add_parser(name, help="background calibration" if name == "calibrate" else "detect, crop and featurize raw frames")
        _common(p)
        p.add_argument("--raw-manifest", type=Path)
        p.add_argument("--trigger-threshold", type=int, dest="trigger_threshold")
        if name == "process":
            p.add_argument("--backgrounds", type=Path, help="directory with background_c*.npz")

    for name, text in (("ingest", "validate a manifest"), ("screen", "per-species colour outlier screen"),
                       ("train", "train the baseline on one split"), ("evaluate", "repeated-split evaluation"),
                       ("ablate-cameras", "camera 1 vs camera 2 vs both"), ("sweep-nmax", "accuracy vs images per specimen"),
                       ("biomass-fit", "dry weight regression on silhouette area")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--manifest", type=Path)
        if name in ("evaluate", "ablate-cameras", "sweep-nmax"):
            p.add_argument("--scores", type=Path, help="external per-image scores CSV")
        if name == "train":
            p.add_argument("--repetition", type=int, default=0)
        if name == "sweep-nmax":
            p.add_argument("--nmax", nargs="+", help="N_max values ('inf' allowed)")

    p = sub.add_parser("grid", help="evaluate every camera-setting cell")
    _common(p)
    p.add_argument("--grid-dir", type=Path, help="directory of <cell>/manifest.json")
    p.add_argument("--manifests", type=Path, nargs="+")

    p = sub.add_parser("simulate", help="run the device with flushing and routing")
    _common(p)
    p.add_argument("--preset")
    p.add_argument("--count", type=int, dest="specimens_per_species")
    p.add_argument("--sink-time", type=float, dest="sink_time_s")
    p.add_argument("--routing", choices=("class", "size"), default="class")
    p.add_argument("--threshold", type=float, default=2000.0, help="size routing threshold in px^2")
    p.add_argument("--model", type=Path, help="baseline model JSON used to predict species")
    return parser


CONFIG_FLAGS = ("output_dir", "seed", "jobs", "rule", "n_reps", "exposure_us", "aperture_f", "epochs_per_rate",
                "preset", "specimens_per_species", "compact_sensor", "trigger_threshold", "nmax", "sink_time_s")


class CsvFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return f"{record.levelname},{record.name},{record.getMessage()}"


def setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(CsvFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def error_report(exc: BaseException, code: int) -> dict:
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "details": getattr(exc, "details", []),
        "exit_code": code,
    }


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level)
    except ValueError:
        setup_logging("INFO")
    out = None
    try:
        overrides = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
        cfg = load_config(args.config, overrides=overrides)
        out = Path(cfg.output_dir)
        if not args.dry_run:
            out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
        if not args.dry_run:
            write_json(out / f"{args.command}_config.json", cfg.to_dict())
        print(json.dumps({"command": args.command, "dry_run": args.dry_run, **result}, default=str, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        err, code = exc, EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        err, code = exc, EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        err, code = exc, EXIT_INTERNAL
    report = error_report(err, code)
    print(json.dumps(report), file=sys.stderr)
    if out is not None and out.is_dir() and not args.dry_run:
        write_json(out / "error.json", report)
    return code
