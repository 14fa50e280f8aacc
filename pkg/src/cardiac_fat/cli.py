"""Command-line driver: one subcommand per pipeline stage, plus ``pipeline`` and ``synth``.

Every stage writes its artifacts atomically and leaves a ``*.log.json`` run
log with the effective parameters. Logs carry no timestamps, so rerunning a
stage with the same inputs reproduces its outputs byte for byte.

Exit status: 0 success, 1 usage error, 2 data error, 3 no confirmed placement.
Failures print a single ``error: CODE: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import glob
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, quantify, synth
from .classifier import (
    ForestConfig,
    SegmentationResult,
    dilate,
    evaluate,
    load_model,
    save_model,
    segment_slice,
    train_forest,
)
from .errors import CardiacFatError
from .features import (
    CLASSES,
    EXTRA_FEATURES,
    BASE_FEATURES,
    Dataset,
    LabelMask,
    NeighborhoodSpec,
    build_dataset,
    export_csv,
    import_csv,
)
from .imaging import (
    FatImage,
    ScanManifest,
    ScanVolume,
    load_scan,
    read_mask_ppm,
    read_pgm,
    save_scan,
    write_json,
    write_mask_ppm,
    write_pgm,
)
from .pnm import atomic_write_bytes, write_pnm
from .registration import (
    MEASURES,
    Atlas,
    ConfirmationParams,
    SimilarityParams,
    build_atlas,
    default_anchor,
    register_scan,
    translate,
)

logger = logging.getLogger("cardiac_fat")

THREADS_ENV = "CARDIAC_FAT_THREADS"
FAT_CLASSES = ("epicardial", "mediastinal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: USAGE: {message}\n")


# --- small helpers ---------------------------------------------------------


def _log_path(out: str) -> str:
    if os.path.isdir(out):
        return os.path.join(out, "run.log.json")
    return out + ".log.json"


def _run_log(out: str, command: str, params: dict, outputs) -> None:
    write_json(
        _log_path(out),
        {"command": command, "version": __version__, "params": params, "outputs": sorted(outputs)},
    )


def _read_manifest_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CardiacFatError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise CardiacFatError(f"malformed manifest {path}: {exc}") from None


def _manifest_masks(path) -> list | None:
    """Paths of the ground-truth masks a manifest lists under ``masks``, if any."""
    raw = _read_manifest_json(path)
    names = raw.get("masks")
    if not names:
        return None
    if len(names) != len(raw.get("slices", [])):
        raise CardiacFatError(f"{path}: {len(names)} masks for {len(raw.get('slices', []))} slices")
    base = os.path.dirname(os.path.abspath(path))
    return [os.path.join(base, n) for n in names]


def _mask_files(mask_dir) -> list:
    files = sorted(glob.glob(os.path.join(mask_dir, "mask_*.ppm")))
    if not files:
        raise CardiacFatError(f"no mask_*.ppm files in {mask_dir}")
    return files


def _spec_from(args) -> NeighborhoodSpec:
    return NeighborhoodSpec(side=args.side, beta=args.beta, full=args.full_features)


def _similarity_from(args) -> SimilarityParams:
    return SimilarityParams(args.measure, args.g, args.t)


def _confirmation_from(args, width: int, height: int) -> ConfirmationParams | None:
    if args.no_confirm:
        return None
    p = ConfirmationParams.for_image(width, height)
    overrides = {
        "c": args.confirm_c,
        "u": args.confirm_u,
        "x_min": args.confirm_xmin,
        "x_max": args.confirm_xmax,
    }
    fields = {k: getattr(p, k) for k in ("c", "u", "x_min", "x_max", "area_w", "area_h")}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if args.confirm_area is not None:
        fields["area_w"], fields["area_h"] = args.confirm_area
    return ConfirmationParams(**fields)


def _conf_json(conf: ConfirmationParams | None):
    if conf is None:
        return None
    return {k: getattr(conf, k) for k in ("c", "u", "x_min", "x_max", "area_w", "area_h")}


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _model_path(model_dir, class_name: str) -> str:
    return os.path.join(model_dir, f"{class_name}.model.json")


# --- overlay ---------------------------------------------------------------


def write_overlay(img: FatImage, seg: SegmentationResult, path) -> None:
    """Color PPM: red epicardial, green mediastinal, yellow both, gray for other fat."""
    gray = img.gray
    if seg.epicardial.shape != gray.shape or seg.mediastinal.shape != gray.shape:
        raise CardiacFatError("segmentation and image sizes differ")
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    epi, med = seg.epicardial, seg.mediastinal
    rgb[epi & ~med] = (255, 0, 0)
    rgb[med & ~epi] = (0, 255, 0)
    rgb[epi & med] = (255, 255, 0)
    write_pnm(path, rgb)


# --- stages ----------------------------------------------------------------


def run_build_atlas(crop_dir, out, t: float = 0.2) -> Atlas:
    files = sorted(glob.glob(os.path.join(crop_dir, "*.pgm")))
    if not files:
        raise CardiacFatError(f"no .pgm crops in {crop_dir}")
    atlas = build_atlas([read_pgm(f) for f in files], t)
    atlas.save(out)
    _run_log(out, "build-atlas", {"crops": [os.path.basename(f) for f in files], "t": t}, [os.path.basename(out)])
    return atlas


def run_register(manifest, atlas_path, out_dir, sim, conf_fn, anchor=None, reg_slice=None):
    """Register a scan; ``conf_fn(width, height)`` yields the confirmation parameters.

    ``anchor`` is (x, y) with ``None`` for a coordinate that keeps its default.
    """
    scan = load_scan(manifest)
    atlas = Atlas.load(atlas_path)
    H, W = scan.shape
    conf = conf_fn(W, H)
    if anchor is not None:
        # either coordinate may be left to its default
        dflt = default_anchor(W, H)
        anchor = tuple(d if a is None else int(a) for a, d in zip(anchor, dflt))
    reg = register_scan(scan, atlas, sim, conf, anchor, reg_slice)
    extra = {"registration": reg.to_json()}
    os.makedirs(out_dir, exist_ok=True)
    truth = _manifest_masks(manifest)
    outputs = [f"slice_{z:03d}.pgm" for z in range(len(scan))] + ["manifest.json"]
    if truth:
        dx, dy = reg.offset
        names = []
        for z, path in enumerate(truth):
            planes = read_mask_ppm(path)
            moved = {k: translate(v, dx, dy) for k, v in planes.items()}
            name = f"mask_{z:03d}.ppm"
            write_mask_ppm(
                os.path.join(out_dir, name), moved["epicardial"], moved["mediastinal"], moved["pericardium"]
            )
            names.append(name)
        extra["masks"] = names
        outputs += names
    save_scan(reg.scan, out_dir, extra)
    params = {
        "manifest": os.path.abspath(manifest),
        "atlas": os.path.abspath(atlas_path),
        "similarity": {"measure": sim.measure, "g": sim.exponent, "t": sim.t},
        "confirmation": _conf_json(conf),
        "anchor": list(reg.anchor),
        "reg_slice": reg_slice,
        "landmark": reg.landmark.to_json(),
        "offset": list(reg.offset),
    }
    _run_log(out_dir, "register", params, outputs)
    return reg


def run_extract(manifests, out, spec: NeighborhoodSpec, labeled: bool = True) -> Dataset:
    parts = []
    for m in manifests:
        scan = load_scan(m)
        masks = None
        if labeled:
            paths = _manifest_masks(m)
            if paths is None:
                raise CardiacFatError(f"{m} lists no masks; pass --unlabeled to extract without labels")
            masks = [LabelMask.from_ppm(p) for p in paths]
        parts.append(build_dataset(scan, masks, spec))
    ds = Dataset.concat(parts)
    export_csv(ds, out)
    params = {
        "manifests": [os.path.abspath(m) for m in manifests],
        "neighborhood": spec.to_json(),
        "schema_hash": spec.schema_hash(),
        "labeled": labeled,
        "rows": len(ds),
    }
    _run_log(out, "extract", params, [os.path.basename(out)])
    return ds


def _spec_for_columns(names, side: int, beta: float) -> NeighborhoodSpec:
    if tuple(names) == BASE_FEATURES:
        return NeighborhoodSpec(side, beta, False)
    if tuple(names) == BASE_FEATURES + EXTRA_FEATURES:
        return NeighborhoodSpec(side, beta, True)
    raise CardiacFatError("dataset columns match no known feature schema")


def run_train(csvs, class_name, out, config: ForestConfig, threads=1, side=25, beta=1e7):
    ds = Dataset.concat([import_csv(p) for p in csvs])
    spec = _spec_for_columns(ds.feature_names, side, beta)
    forest = train_forest(ds, class_name, config, threads, spec.schema_hash())
    forest.extras = {"neighborhood": spec.to_json(), "rows": len(ds)}
    save_model(forest, out)
    params = {
        "datasets": [os.path.abspath(p) for p in csvs],
        "class": class_name,
        "n_trees": config.n_trees,
        "seed": config.seed,
        "min_leaf": config.min_leaf,
        "feature_subset_size": config.subset_size(ds.X.shape[1]),
        "normalize": config.normalize,
        "schema_hash": spec.schema_hash(),
    }
    _run_log(out, "train", params, [os.path.basename(out)])
    return forest


def load_models(model_dir, spec: NeighborhoodSpec) -> dict:
    return {c: load_model(_model_path(model_dir, c), spec.schema_hash()) for c in CLASSES}


def run_segment(manifest, model_dir, out_dir, spec: NeighborhoodSpec, dilate_iters: int = 1, threads: int = 1):
    scan = load_scan(manifest)
    forests = load_models(model_dir, spec)
    os.makedirs(out_dir, exist_ok=True)

    def one(z):
        img = scan.slices[z]
        seg = segment_slice(img, z, forests, spec)
        if dilate_iters > 0:
            fat = img.fat
            seg = SegmentationResult(
                dilate(seg.epicardial, fat, dilate_iters), dilate(seg.mediastinal, fat, dilate_iters), seg.scores
            )
        return seg

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            segs = list(pool.map(one, range(len(scan))))
    else:
        segs = [one(z) for z in range(len(scan))]

    outputs = []
    scores = np.zeros((len(CLASSES), len(scan)) + scan.shape, np.float32)
    for z, (img, seg) in enumerate(zip(scan.slices, segs)):
        mask = f"mask_{z:03d}.ppm"
        overlay = f"overlay_{z:03d}.ppm"
        write_mask_ppm(os.path.join(out_dir, mask), seg.epicardial, seg.mediastinal)
        write_overlay(img, seg, os.path.join(out_dir, overlay))
        for k, c in enumerate(CLASSES):
            scores[k, z] = seg.scores[c]
        outputs += [mask, overlay]
    buf = io.BytesIO()
    np.save(buf, scores)
    atomic_write_bytes(os.path.join(out_dir, "scores.npy"), buf.getvalue())
    outputs.append("scores.npy")
    params = {
        "manifest": os.path.abspath(manifest),
        "models": {c: os.path.abspath(_model_path(model_dir, c)) for c in CLASSES},
        "model_seeds": {c: f.config.seed for c, f in forests.items()},
        "neighborhood": spec.to_json(),
        "schema_hash": spec.schema_hash(),
        "dilate_iters": dilate_iters,
        "score_axes": ["class", "slice", "row", "col"],
        "classes": list(CLASSES),
    }
    _run_log(out_dir, "segment", params, outputs)
    return segs


def run_quantify(mask_dir, manifest, out) -> quantify.VolumeReport:
    m = ScanManifest.load(manifest)
    files = _mask_files(mask_dir)
    if len(files) != len(m.slices):
        raise CardiacFatError(f"{len(files)} masks in {mask_dir} but the manifest lists {len(m.slices)} slices")
    planes = [read_mask_ppm(f, allow_yellow=True) for f in files]
    report = quantify.volume_report(
        [p["epicardial"] for p in planes], [p["mediastinal"] for p in planes], m.pixel_spacing, m.slice_spacing
    )
    write_json(out, report.to_json())
    _run_log(out, "quantify", {"masks": os.path.abspath(mask_dir), "manifest": os.path.abspath(manifest)}, [os.path.basename(out)])
    return report


def run_evaluate(pred_dir, truth_dir, out, scan_manifest=None, all_pixels=False) -> dict:
    pred_files = _mask_files(pred_dir)
    truth_files = _mask_files(truth_dir)
    if len(pred_files) != len(truth_files):
        raise CardiacFatError(f"{len(pred_files)} predicted masks but {len(truth_files)} truth masks")
    domains = None
    if not all_pixels:
        if scan_manifest is None:
            raise UsageError("evaluate needs --scan to restrict metrics to fat pixels (or --all-pixels)")
        scan = load_scan(scan_manifest)
        if len(scan) != len(pred_files):
            raise CardiacFatError(f"scan has {len(scan)} slices but there are {len(pred_files)} masks")
        domains = [s.fat for s in scan.slices]
    cms = {c: quantify.ConfusionMatrix(0, 0, 0, 0) for c in FAT_CLASSES}
    for z, (pf, tf) in enumerate(zip(pred_files, truth_files)):
        pred = read_mask_ppm(pf, allow_yellow=True)
        truth = read_mask_ppm(tf, allow_yellow=True)
        dom = None if domains is None else domains[z]
        for c in FAT_CLASSES:
            cms[c] = cms[c] + quantify.confusion(pred[c], truth[c], dom)
    reports = {}
    for c, cm in cms.items():
        r = quantify.class_report(cm)
        den = 2 * cm.tp + cm.fp + cm.fn
        r["dice"] = 1.0 if den == 0 else 2 * cm.tp / den
        reports[c] = r
    result = {
        "domain": "all" if all_pixels else "fat",
        "classes": reports,
        "mean": quantify.mean_class_report(reports),
    }
    write_json(out, result)
    params = {
        "pred": os.path.abspath(pred_dir),
        "truth": os.path.abspath(truth_dir),
        "scan": None if scan_manifest is None else os.path.abspath(scan_manifest),
        "all_pixels": all_pixels,
    }
    _run_log(out, "evaluate", params, [os.path.basename(out)])
    return result


# --- pipeline config -------------------------------------------------------

_PIPELINE_KEYS = {
    "manifest",
    "atlas",
    "models",
    "out_dir",
    "similarity",
    "confirmation",
    "neighborhood",
    "anchor",
    "reg_slice",
    "dilate_iters",
    "threads",
}


def load_pipeline_config(path) -> dict:
    cfg = _read_manifest_json(path)
    unknown = set(cfg) - _PIPELINE_KEYS
    if unknown:
        raise CardiacFatError(f"{path}: unknown config keys {sorted(unknown)}")
    for key in ("manifest", "atlas", "models", "out_dir"):
        if key not in cfg:
            raise CardiacFatError(f"{path}: missing config key {key!r}")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("manifest", "atlas", "models", "out_dir"):
        cfg[key] = os.path.join(base, cfg[key])
    for key in ("manifest", "atlas", "models"):
        if not os.path.exists(cfg[key]):
            raise CardiacFatError(f"{path}: {key} {cfg[key]} does not exist")
    return cfg


def run_pipeline(config_path, threads=None) -> dict:
    """register, segment, quantify (and evaluate when truth masks travel with the scan)."""
    cfg = load_pipeline_config(config_path)
    sim = SimilarityParams(**cfg.get("similarity", {}))
    conf_cfg = cfg.get("confirmation", "auto")
    if conf_cfg is None:
        conf_fn = lambda w, h: None  # noqa: E731
    elif conf_cfg == "auto":
        conf_fn = ConfirmationParams.for_image
    else:
        conf_fn = lambda w, h: ConfirmationParams(**{**_conf_json(ConfirmationParams.for_image(w, h)), **conf_cfg})  # noqa: E731
    spec = NeighborhoodSpec(**cfg.get("neighborhood", {}))
    threads = threads or int(cfg.get("threads", 1))
    out = cfg["out_dir"]
    reg_dir = os.path.join(out, "registered")
    seg_dir = os.path.join(out, "segmentation")
    anchor = tuple(cfg["anchor"]) if cfg.get("anchor") else None
    reg = run_register(cfg["manifest"], cfg["atlas"], reg_dir, sim, conf_fn, anchor, cfg.get("reg_slice"))
    reg_manifest = os.path.join(reg_dir, "manifest.json")
    run_segment(reg_manifest, cfg["models"], seg_dir, spec, int(cfg.get("dilate_iters", 1)), threads)
    volumes = run_quantify(seg_dir, reg_manifest, os.path.join(out, "volumes.json"))
    summary = {"landmark": reg.landmark.to_json(), "offset": list(reg.offset), "volumes": volumes.to_json()}
    if _manifest_masks(reg_manifest):
        summary["evaluation"] = run_evaluate(seg_dir, reg_dir, os.path.join(out, "evaluation.json"), reg_manifest)
    _run_log(out, "pipeline", {"config": os.path.abspath(config_path), "threads": threads}, ["registered", "segmentation", "volumes.json"])
    return summary


# --- argument parsing ------------------------------------------------------


def _add_registration_args(p):
    p.add_argument("--measure", choices=MEASURES, default="hmd")
    p.add_argument("--g", type=float, default=None, help="MD/HMD exponent or MI/WMI log base")
    p.add_argument("--hmd-threshold", "--t", dest="t", type=float, default=0.2, help="HMD bright-region threshold")
    p.add_argument("--no-confirm", action="store_true", help="accept the best placement without confirmation")
    p.add_argument("--confirm-c", type=int, default=None, help="walker iterations")
    p.add_argument("--confirm-u", type=int, default=None, help="walker maximum skip")
    p.add_argument("--confirm-xmin", type=float, default=None)
    p.add_argument("--confirm-xmax", type=float, default=None)
    p.add_argument("--confirm-area", type=int, nargs=2, metavar=("W", "H"), default=None)
    p.add_argument("--anchor-x", type=int, default=None, help="landmark target column (default W/2)")
    p.add_argument("--anchor-y", type=int, default=None, help="landmark target row (default 0.3 H)")
    p.add_argument("--reg-slice", type=int, default=None, help="slice tried first for the landmark search")


def _add_spec_args(p):
    p.add_argument("--window-side", "--side", dest="side", type=int, default=25, help="neighborhood window side (odd)")
    p.add_argument("--beta", type=float, default=1e7, help="smooth-variation weight base")
    p.add_argument("--full-features", action="store_true", help="extract all 31 features instead of 15")


def _add_forest_args(p):
    p.add_argument("--trees", type=int, default=10)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--feature-subset", type=int, default=None)
    p.add_argument("--normalize", action="store_true", help="min-max scale features before training")


def _forest_config(args) -> ForestConfig:
    return ForestConfig(args.trees, args.feature_subset, args.min_leaf, args.seed, args.normalize)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cardiac-fat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help=f"worker cap (default: ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-atlas", help="average thresholded landmark crops into an atlas")
    p.add_argument("crop_dir")
    p.add_argument("out")
    p.add_argument("--t", type=float, default=0.2)

    p = sub.add_parser("register", help="align a scan's landmark to the anchor")
    p.add_argument("manifest")
    p.add_argument("atlas")
    p.add_argument("out_dir")
    _add_registration_args(p)

    p = sub.add_parser("extract", help="write per-pixel features (and labels) as CSV")
    p.add_argument("manifests", nargs="+")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--unlabeled", action="store_true", help="ignore truth masks; all labels 0")
    _add_spec_args(p)

    p = sub.add_parser("train", help="train one binary forest")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--class", dest="class_name", choices=CLASSES, required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--window-side", "--side", dest="side", type=int, default=25)
    p.add_argument("--beta", type=float, default=1e7)
    _add_forest_args(p)

    p = sub.add_parser("evaluate-model", help="hold-out metrics for one class on a dataset")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--class", dest="class_name", choices=CLASSES, required=True)
    p.add_argument("--mode", choices=("split66", "kfold10"), default="split66")
    p.add_argument("-o", "--out", required=True)
    _add_forest_args(p)

    p = sub.add_parser("segment", help="classify every fat pixel of a registered scan")
    p.add_argument("manifest")
    p.add_argument("models", help="directory holding <class>.model.json for all three classes")
    p.add_argument("out_dir")
    p.add_argument("--dilate-iters", type=int, default=1)
    _add_spec_args(p)

    p = sub.add_parser("quantify", help="fat volumes from a mask directory")
    p.add_argument("mask_dir")
    p.add_argument("manifest")
    p.add_argument("out")

    p = sub.add_parser("evaluate", help="compare predicted masks with truth masks")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("out")
    p.add_argument("--scan", default=None, help="manifest whose fat pixels form the metric domain")
    p.add_argument("--all-pixels", action="store_true", help="count every pixel, background included")

    p = sub.add_parser("pipeline", help="register, segment and quantify from a JSON config")
    p.add_argument("config")

    p = sub.add_parser("synth", help="generate synthetic fixtures")
    kinds = p.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    k = kinds.add_parser("scans", help="ring phantom scans with truth masks")
    k.add_argument("out_dir")
    k.add_argument("--count", type=int, default=1)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--slices", type=int, default=20)
    k.add_argument("--size", type=int, default=128)
    k.add_argument("--slice-spacing", type=float, default=3.0)
    k = kinds.add_parser("crops", help="landmark crops for build-atlas")
    k.add_argument("out_dir")
    k.add_argument("--count", type=int, default=10)
    k.add_argument("--seed", type=int, default=1000)
    k = kinds.add_parser("scene", help="landmark template planted in a noisy blank scene")
    k.add_argument("out_dir")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--size", type=int, default=512)
    k.add_argument("--noise", type=float, default=0.05)
    k = kinds.add_parser("cylinder", help="constant disc masks for volume checks")
    k.add_argument("out_dir")
    k.add_argument("--slices", type=int, default=10)
    k.add_argument("--size", type=int, default=64)
    k.add_argument("--radius", type=float, default=20.0)
    k.add_argument("--slice-spacing", type=float, default=3.0)
    return parser


def _run_synth(args) -> None:
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    if args.kind == "scans":
        made = []
        for i in range(args.count):
            seed = args.seed + i
            d = os.path.join(out, f"phantom_{seed:03d}")
            synth.write_ring_scan(d, seed, args.slices, args.size, args.slice_spacing)
            made.append(os.path.basename(d))
        _run_log(out, "synth scans", {"count": args.count, "seed": args.seed, "slices": args.slices, "size": args.size, "slice_spacing": args.slice_spacing}, made)
    elif args.kind == "crops":
        seeds = list(range(args.seed, args.seed + args.count))
        paths = synth.write_crops(out, seeds)
        _run_log(out, "synth crops", {"seeds": seeds}, [os.path.basename(p) for p in paths])
    elif args.kind == "scene":
        rng = np.random.default_rng(args.seed)
        template = synth.landmark_template()
        scene, (x, y) = synth.registration_scene(rng, template, args.size, args.noise)
        write_pgm(FatImage(template), os.path.join(out, "template.pgm"))
        write_pgm(FatImage(scene), os.path.join(out, "scene.pgm"))
        write_json(os.path.join(out, "truth.json"), {"x": x, "y": y})
        _run_log(out, "synth scene", {"seed": args.seed, "size": args.size, "noise": args.noise}, ["scene.pgm", "template.pgm", "truth.json"])
    elif args.kind == "cylinder":
        masks = synth.cylinder_masks(args.slices, args.size, args.radius)
        slices = [FatImage(np.where(m, 100, 0).astype(np.uint8)) for m in masks]
        names = []
        for z, m in enumerate(masks):
            name = f"mask_{z:03d}.ppm"
            write_mask_ppm(os.path.join(out, name), m, np.zeros_like(m))
            names.append(name)
        save_scan(ScanVolume(slices, args.slice_spacing, "cylinder"), out, {"masks": names})
        area = int(masks[0].sum())
        _run_log(out, "synth cylinder", {"slices": args.slices, "size": args.size, "radius": args.radius, "slice_spacing": args.slice_spacing, "disc_pixels": area}, names)


def _dispatch(args) -> None:
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    cmd = args.command
    if cmd == "build-atlas":
        run_build_atlas(args.crop_dir, args.out, args.t)
    elif cmd == "register":
        reg = run_register(
            args.manifest,
            args.atlas,
            args.out_dir,
            _similarity_from(args),
            lambda w, h: _confirmation_from(args, w, h),
            (args.anchor_x, args.anchor_y),
            args.reg_slice,
        )
        print(json.dumps(reg.to_json(), sort_keys=True))
    elif cmd == "extract":
        ds = run_extract(args.manifests, args.out, _spec_from(args), not args.unlabeled)
        print(f"{len(ds)} rows")
    elif cmd == "train":
        run_train(args.datasets, args.class_name, args.out, _forest_config(args), threads, args.side, args.beta)
    elif cmd == "evaluate-model":
        ds = Dataset.concat([import_csv(p) for p in args.datasets])
        report = evaluate(ds, args.class_name, _forest_config(args), args.mode, args.seed, threads)
        write_json(args.out, report)
        print(quantify.format_table({args.class_name: report}))
    elif cmd == "segment":
        run_segment(args.manifest, args.models, args.out_dir, _spec_from(args), args.dilate_iters, threads)
    elif cmd == "quantify":
        report = run_quantify(args.mask_dir, args.manifest, args.out)
        print(f"epicardial {report.epicardial_ml:.3f} ml, mediastinal {report.mediastinal_ml:.3f} ml")
    elif cmd == "evaluate":
        result = run_evaluate(args.pred_dir, args.truth_dir, args.out, args.scan, args.all_pixels)
        print(quantify.format_table({**result["classes"], "mean": result["mean"]}))
    elif cmd == "pipeline":
        summary = run_pipeline(args.config, args.threads)
        print(json.dumps(summary["volumes"], sort_keys=True))
    elif cmd == "synth":
        _run_synth(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"error: USAGE: {exc}", file=sys.stderr)
        return 1
    except CardiacFatError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error: IO_ERROR: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
