"""Command-line entry point: ``coatinspect <command> [options]``.

Machine-readable JSON goes to stdout, logs to stderr. Every written file
lands under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, RunConfig
from .core import (DatasetManifest, ImageFormatError, ManifestEntry, ManifestError,
                   atomic_write_bytes, load_image, load_manifest, quantize, save_image,
                   save_manifest, save_pgm16)
from .flow import FlowError, ModelFormatError, image_score, load_model, save_model
from .postprocess import CalibrationError, overlay_svg, result_json
from .preprocess import PreprocessError

log = logging.getLogger("coatinspect")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BAD_FOUND = 3
EXIT_MODEL = 4
EXIT_INPUT = 5
EXIT_CALIBRATION = 6

IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png"}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.cause = exc


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (PreprocessError, FlowError, CalibrationError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _run_log(out: Path, command: str, cfg: RunConfig, inputs: dict, extra: dict) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "version": __version__,
           "seed": cfg.seed, "config": cfg.to_dict(), "config_hash": cfg.digest(),
           "inputs": inputs, **extra}
    _write_json(out / f"{command}_log.json", doc)
    return doc


def _labeled_items(manifest: DatasetManifest):
    from .pipeline import iter_manifest

    return list(iter_manifest(manifest))


def _map_workers(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    from .synthgen import generate_dataset

    m = generate_dataset(args.n_good, args.n_bad, out, cfg.seed)
    _run_log(out, "synth", cfg, {}, {"n_good": args.n_good, "n_bad": args.n_bad})
    _emit({"schema_version": SCHEMA_VERSION, "manifest": str(out / "manifest.json"),
           "n_images": len(m)})
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig, out: Path) -> int:
    from .preprocess import preprocess_pipeline

    if args.in_dir:
        src = Path(args.in_dir)
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        manifest = DatasetManifest(tuple(ManifestEntry(p.name, "good") for p in files), src)
    else:
        manifest = load_manifest(args.manifest)
    records, failures = [], []
    for e in manifest:
        img = load_image(manifest.resolve(e.path))
        try:
            roi = preprocess_pipeline(img, cfg.preprocess)
        except PreprocessError as exc:
            log.warning("%s: %s", e.path, exc)
            failures.append({"path": e.path, "error": str(exc)})
            continue
        stem = Path(e.path).stem
        save_image(out / "rois" / f"{stem}_crop.pgm", quantize(roi.crop))
        save_image(out / "rois" / f"{stem}_mask.pgm", roi.coating_mask.astype(np.uint8) * 255)
        el, box = roi.source_ellipse, roi.box
        records.append({"path": e.path, "label": e.label,
                        "ellipse": {"cx": el.cx, "cy": el.cy, "a": el.a, "b": el.b, "theta": el.theta},
                        "box": {"x0": box.x0, "y0": box.y0, "side": box.side, "size": box.size},
                        "crop": f"rois/{stem}_crop.pgm", "mask": f"rois/{stem}_mask.pgm",
                        "coating_pixels": int(roi.coating_mask.sum())})
    doc = {"schema_version": SCHEMA_VERSION, "rois": records, "failures": failures}
    _write_json(out / "rois.json", doc)
    _emit({"schema_version": SCHEMA_VERSION, "n_ok": len(records), "n_failed": len(failures),
           "rois": str(out / "rois.json")})
    return EXIT_OK if not failures else EXIT_INPUT


def cmd_augment(args, cfg: RunConfig, out: Path) -> int:
    from .augment import expand_dataset

    manifest = load_manifest(args.manifest)
    aug = cfg.augment
    if args.policy:
        aug = replace(aug, policy=args.policy)
    if args.copies is not None:
        aug = replace(aug, copies=args.copies)
    result = expand_dataset(manifest, aug.make_policy(), aug.copies, out)
    if aug.copies == 0:
        save_manifest(out / "manifest.json", DatasetManifest(tuple(
            ManifestEntry(str(manifest.resolve(e.path).resolve()), e.label,
                          None if e.mask is None else str(manifest.resolve(e.mask).resolve()))
            for e in manifest), out))
    _emit({"schema_version": SCHEMA_VERSION, "manifest": str(out / "manifest.json"),
           "n_images": len(result)})
    return EXIT_OK


def cmd_features(args, cfg: RunConfig, out: Path) -> int:
    from .core import read_raster
    from .features import dump_pyramids, extract_pyramid, fit_norm_stats
    from .pipeline import prepare
    from .preprocess import CropBox, Ellipse, SensorROI

    pyramids, paths = [], []
    if args.roi:
        root = Path(args.roi)
        doc = json.loads((root / "rois.json").read_text())
        for rec in doc["rois"]:
            crop = read_raster(root / rec["crop"]).astype(np.float64)
            mask = read_raster(root / rec["mask"]) > 127
            roi = SensorROI(crop, mask, Ellipse(**rec["ellipse"]), CropBox(**rec["box"]))
            pyramids.append(extract_pyramid(roi, cfg.features.n_levels, cfg.features.base_cell))
            paths.append(rec["path"])
    else:
        manifest = load_manifest(args.manifest)
        for e in manifest:
            img = load_image(manifest.resolve(e.path))
            _, pyr = _stage("preprocess", prepare, img, cfg.preprocess,
                            cfg.features.n_levels, cfg.features.base_cell)
            pyramids.append(pyr)
            paths.append(e.path)
    atomic_write_bytes(out / "features.bin", dump_pyramids(pyramids))
    doc = {"schema_version": SCHEMA_VERSION, "paths": paths,
           "levels": [{"cell": lv.cell, "height": lv.height, "width": lv.width, "dim": lv.dim}
                      for lv in pyramids[0].levels] if pyramids else []}
    if len(pyramids) >= 2:
        doc["norm_stats"] = fit_norm_stats(pyramids).to_json()
    _write_json(out / "features.json", doc)
    _emit({"schema_version": SCHEMA_VERSION, "n_images": len(pyramids),
           "features": str(out / "features.bin")})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    from .augment import augment
    from .pipeline import LabeledImage, fit_system

    manifest = load_manifest(args.manifest)
    bad = [e.path for e in manifest if e.label != "good"]
    if bad:
        raise StageError("train", ValueError(
            f"training manifest contains {len(bad)} bad-labeled entries (e.g. {bad[0]}); "
            "pass bad images through --calib-manifest instead"))
    if len(manifest) == 0:
        raise StageError("train", ValueError("training manifest is empty"))
    goods = _labeled_items(manifest)
    if cfg.augment.copies > 0:
        policy = cfg.augment.make_policy()
        extra, index = [], 0
        for it in goods:
            for c in range(cfg.augment.copies):
                extra.append(LabeledImage(f"{it.name}#aug{c:02d}", augment(it.image, policy, index), "good"))
                index += 1
        goods = goods + extra
    calib = []
    if args.calib_manifest:
        calib = _labeled_items(load_manifest(args.calib_manifest))
    model, info = _stage("train", fit_system, goods, calib, cfg)
    model_path = out / "model.cfm"
    save_model(model, model_path)
    _run_log(out, "train", cfg, {"manifest": str(args.manifest), "calib_manifest": args.calib_manifest},
             {"split": info, "training_nll": model.training_log, "thresholds": model.thresholds})
    _emit({"schema_version": SCHEMA_VERSION, "model": str(model_path), "calibrated":
           model.thresholds is not None, **info})
    return EXIT_OK


def _score_inputs(args):
    if args.manifest:
        m = load_manifest(args.manifest)
        return [(e.path, m.resolve(e.path)) for e in m]
    return [(p, Path(p)) for p in args.images]


def cmd_score(args, cfg: RunConfig, out: Path) -> int:
    from .pipeline import inspect

    model = load_model(args.model)
    if not model.thresholds:
        raise StageError("score", CalibrationError("model is not calibrated; run `calibrate` first"))
    inputs = _score_inputs(args)
    if not inputs:
        raise StageError("score", ValueError("no images given"))

    def one(item):
        name, path = item
        img = load_image(path)
        result, _ = _stage("score", inspect, model, img)
        return name, result

    records, any_bad = [], False
    for name, result in _map_workers(one, inputs, args.threads):
        rec = result_json(result, name)
        stem = Path(name).stem
        if args.save_maps:
            data = result.map.data
            lo, hi = float(data.min()), float(data.max())
            scale = (hi - lo) / 65535.0 if hi > lo else 1.0
            save_pgm16(out / "maps" / f"{stem}_map.pgm", np.round((data - lo) / scale))
            _write_json(out / "maps" / f"{stem}_map.json",
                        {"schema_version": SCHEMA_VERSION, "offset": lo, "scale": scale,
                         "formula": "score = offset + scale * pixel"})
            atomic_write_bytes(out / "maps" / f"{stem}_overlay.svg",
                               overlay_svg(data.shape[1], data.shape[0], result.detections).encode())
        records.append(rec)
        any_bad |= result.decision == "bad"
    _emit({"schema_version": SCHEMA_VERSION, "results": records})
    return EXIT_BAD_FOUND if (args.fail_on_bad and any_bad) else EXIT_OK


def score_histogram(scores, labels, bins: int):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    edges = np.histogram_bin_edges(scores, bins=bins)
    good, _ = np.histogram(scores[~labels], bins=edges)
    bad, _ = np.histogram(scores[labels], bins=edges)
    return edges, good, bad


def histogram_csv(edges, good, bad) -> str:
    lines = ["bin,lower,upper,good_count,bad_count"]
    for i in range(len(good)):
        lines.append(f"{i},{edges[i]:.6g},{edges[i + 1]:.6g},{good[i]},{bad[i]}")
    return "\n".join(lines) + "\n"


def cmd_calibrate(args, cfg: RunConfig, out: Path) -> int:
    from .pipeline import calibrate, score_items

    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    if {e.label for e in manifest} != {"good", "bad"}:
        raise StageError("calibrate", CalibrationError("calibration manifest needs both good and bad images"))
    scored = _stage("calibrate", score_items, model, _labeled_items(manifest))
    info = _stage("calibrate", calibrate, model, scored, split=f"manifest:{Path(args.manifest).name}")
    scores = [image_score(s.map) for s in scored]
    labels = [s.label == "bad" for s in scored]
    edges, good, bad = score_histogram(scores, labels, cfg.eval.histogram_bins)
    atomic_write_bytes(out / "histogram.csv", histogram_csv(edges, good, bad).encode())
    save_model(model, out / "model.cfm")
    _run_log(out, "calibrate", cfg, {"model": str(args.model), "manifest": str(args.manifest)}, info)
    _emit({"schema_version": SCHEMA_VERSION, "model": str(out / "model.cfm"),
           "histogram": str(out / "histogram.csv"), **info})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    from .evaluation import cross_validate, evaluate

    manifest = load_manifest(args.manifest)
    if args.folds:
        reports, summary = cross_validate(manifest, args.folds, cfg)
        doc = {"schema_version": SCHEMA_VERSION, "folds": [r.to_json(False) for r in reports],
               "summary": summary}
    else:
        model = load_model(args.model)
        doc = evaluate(model, manifest, cfg).to_json()
    report = Path(args.report) if args.report else out / "report.json"
    if not report.is_absolute() and args.report:
        report = out / report
    _write_json(report, doc)
    brief = {k: v for k, v in doc.items() if k not in ("images", "folds")}
    _emit({**brief, "report": str(report)})
    return EXIT_OK


def cmd_cluster(args, cfg: RunConfig, out: Path) -> int:
    from .cluster import cluster_report

    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    c = cfg.cluster
    rep = _stage("cluster", cluster_report, manifest, model, c.pca_dim, c.perplexity, c.iters, c.seed)
    atomic_write_bytes(out / "embedding.csv", rep.csv().encode())
    atomic_write_bytes(out / "scatter.svg", rep.svg().encode())
    _emit({**rep.to_json(), "embedding": str(out / "embedding.csv")})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides every section)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coatinspect", parents=[common],
                                description="Unsupervised coating defect inspection.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled dataset")
    s.add_argument("--good", "--n-good", dest="n_good", type=int, default=50)
    s.add_argument("--bad", "--n-bad", dest="n_bad", type=int, default=16)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="extract ROI crops and coating masks")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--in", dest="in_dir", help="directory of .ppm/.pgm/.png images")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", parents=[common], help="expand good images offline")
    s.add_argument("--manifest", required=True)
    s.add_argument("--policy", choices=["none", "offline", "train"])
    s.add_argument("--copies", type=int)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("features", parents=[common], help="dump feature pyramids")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--roi", help="output directory of the preprocess command")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", parents=[common], help="train flows on good images")
    s.add_argument("--manifest", required=True, help="good-only training manifest")
    s.add_argument("--calib-manifest", help="extra labeled images for threshold calibration")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], help="score images with a model")
    s.add_argument("--model", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--images", nargs="+")
    s.add_argument("--save-maps", action="store_true", help="write 16-bit maps and SVG overlays")
    s.add_argument("--fail-on-bad", action="store_true", help="exit 3 if any image is judged bad")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("calibrate", parents=[common], help="recompute F1-optimal thresholds")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model on a labeled manifest")
    s.add_argument("--model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--report")
    s.add_argument("--folds", type=int, default=0, help="run k-fold cross-validation instead")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cluster", parents=[common], help="embed detected defects")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_cluster)
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not args.folds and not args.model:
        parser.error("eval needs --model unless --folds is given")
    try:
        cfg = load_config(args)
    except (ValueError, OSError) as exc:
        log.error("config: %s", exc)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg, out)
    except ModelFormatError as exc:
        log.error("model: %s", exc)
        return EXIT_MODEL
    except FileNotFoundError as exc:
        if getattr(args, "model", None) and Path(args.model) == Path(exc.filename or ""):
            log.error("model: %s", exc)
            return EXIT_MODEL
        log.error("input: %s", exc)
        return EXIT_INPUT
    except (ImageFormatError, ManifestError) as exc:
        log.error("input: %s", exc)
        return EXIT_INPUT
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_CALIBRATION if isinstance(exc.cause, CalibrationError) else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
