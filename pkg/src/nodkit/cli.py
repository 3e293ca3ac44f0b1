"""Command-line entry point.

Precedence for every setting: command-line flag, then the ``--config`` YAML
file, then built-in defaults. Exit codes: 0 success, 1 data or domain
error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import augment, curate, flowgen
from .errors import DomainError, FormatError, NodkitError
from .evaluation import (FOLD_COUNTS, auc, bootstrap_ci, dice_in_voi, extract_features,
                         frechet_distance, froc_by_size, gaussian_stats, plan_folds)
from .evaluation.fid import FeatureConfig
from .maskops import BinaryMask, Connectivity, connected_components
from .report import atomic_write, emit_report, write_manifest
from .volio import (LabelMap, Volume, VolumeMeta, read_annotations, read_detections,
                    read_volume, write_volume)

logger = logging.getLogger("nodkit")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "strict": True,
    "curate": {"threshold_hu": curate.BODY_THRESHOLD_HU, "margin_vox": 5, "method": "kmeans",
               "n_clusters": 2, "seed": 0, "dilate_mm": 0.0},
    "augment": {"target_percent": None, "sample_low": 50.0, "sample_high": 100.0,
                "connectivity": 1, "max_iter": 50},
    "flow": {"grid": 16, "radius": 2.5, "epochs": 100, "steps_per_epoch": 20, "batch_size": 8,
             "learning_rate": 3e-3, "lambda_reg": 1.0, "nodule_weight": 100.0,
             "hidden": [64], "base_hidden": [64], "use_latent": True, "steps": 50,
             "epsilon": 1e-5},
    "eval": {"margin_vox": 64, "criterion": "box", "n_boot": 2000, "level": 0.95},
}


class UsageError(NodkitError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _check_keys(cfg, ref, where="config"):
    if not isinstance(cfg, dict):
        raise UsageError(f"{where}: expected a mapping")
    for key, val in cfg.items():
        if key not in ref:
            raise UsageError(f"{where}: unknown key {key!r}")
        if isinstance(ref[key], dict):
            _check_keys(val, ref[key], f"{where}.{key}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        cfg = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"{p}: invalid YAML ({exc})") from exc
    _check_keys(cfg, DEFAULTS)
    return cfg


def effective_config(args) -> dict:
    cfg = _merge(DEFAULTS, load_config(args.config))
    for dest, val in vars(args).items():
        if val is None or "__" not in dest:
            continue
        section, key = dest.split("__", 1)
        cfg[section][key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    elif "NODKIT_JOBS" in os.environ:
        cfg["jobs"] = int(os.environ["NODKIT_JOBS"])
    if args.strict is not None:
        cfg["strict"] = args.strict
    return cfg


# ---------------------------------------------------------------------------
# helpers

def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _read(path):
    return read_volume(_need(path))


def _as_volume(obj, path) -> Volume:
    if isinstance(obj, Volume):
        return obj
    raise FormatError(f"{path}: expected an int16/float32 volume, got unsigned labels")


def _as_labels(obj, path) -> LabelMap:
    if isinstance(obj, LabelMap):
        return obj
    data = np.asarray(obj.data)
    if data.dtype.kind == "f" or (data.size and data.min() < 0):
        raise FormatError(f"{path}: expected a label map")
    return LabelMap(obj.meta, data)


def _as_mask(obj, path) -> BinaryMask:
    arr = obj.labels if isinstance(obj, LabelMap) else obj.data
    return BinaryMask(obj.meta, np.asarray(arr) != 0)


def _mask_file(m: BinaryMask) -> LabelMap:
    return LabelMap(m.meta, m.bits.astype(np.uint8))


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _csv_text(header, rows):
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, cfg, out, inputs, outputs):
    write_manifest(out, args.argv, cfg, inputs, cfg["seed"], outputs)


# ---------------------------------------------------------------------------
# curate

def cmd_curate_body(args, cfg):
    out = _out(args)
    ct = _as_volume(_read(args.ct), args.ct)
    body = curate.derive_body_mask(ct, cfg["curate"]["threshold_hu"])
    path = out / "body_mask.nii"
    write_volume(_mask_file(body), path)
    _manifest(args, cfg, out, [args.ct], [path])
    print(f"body mask: {body.count} voxels -> {path}")


def cmd_curate_nodule(args, cfg):
    out = _out(args)
    ct = _as_volume(_read(args.ct), args.ct)
    anns = read_annotations(_need(args.annotations), strict=cfg["strict"])
    if args.series_id:
        anns = [a for a in anns if a.series_id == args.series_id]
    if not anns:
        raise DomainError("no annotations to segment")
    c = cfg["curate"]
    seg_cfg = curate.SegmentationConfig(method=c["method"], n_clusters=c["n_clusters"],
                                        margin_vox=c["margin_vox"], seed=c["seed"])
    organs = _as_labels(_read(args.organs), args.organs) if args.organs else None
    lung = None
    if organs is not None:
        lung = BinaryMask(organs.meta, np.isin(organs.labels, curate.LOBE_LABELS))

    def one(ann):
        voi = curate.extract_voi(ct, ann, seg_cfg.margin_vox)
        m = curate.segment_nodule(voi, seg_cfg)
        m = curate.dilate_mask_mm(m, c["dilate_mm"])
        row = {"voxels": m.count, "diameter_mm": augment.diameter_of_mask(m) if m.count else 0.0,
               "dice_box": dice_in_voi(m, curate.box_mask(ct.meta, ann), ann)}
        if organs is not None and m.count:
            row["lobe"] = curate.attribute_lobe(m, organs)
            row["pleural_mm"] = curate.pleural_distance(m, lung)
        return m, row

    results = _pool_map(one, anns, cfg["jobs"])
    index = np.zeros(ct.meta.dims, dtype=np.uint16)
    rows = []
    for k, (ann, (m, row)) in enumerate(zip(anns, results), start=1):
        index[m.bits & (index == 0)] = k
        rows.append([ann.series_id, k, row["voxels"], repr(row["diameter_mm"]), repr(row["dice_box"]),
                     row.get("lobe", ""), repr(row["pleural_mm"]) if "pleural_mm" in row else ""])
    mask_path = out / "nodules.nii"
    write_volume(LabelMap(ct.meta, index), mask_path)
    table = atomic_write(out / "nodules.csv", _csv_text(
        ["series_id", "nodule_index", "voxels", "diameter_mm", "dice_box", "lobe", "pleural_mm"], rows))
    inputs = [args.ct, args.annotations] + ([args.organs] if args.organs else [])
    _manifest(args, cfg, out, inputs, [mask_path, table])
    print(f"segmented {len(anns)} nodules -> {mask_path}")


def cmd_curate_integrate(args, cfg):
    out = _out(args)
    organs = _as_labels(_read(args.organs), args.organs)
    body = _as_mask(_read(args.body), args.body)
    nodules = [_as_mask(_read(p), p) for p in args.nodules or []]
    labels = curate.integrate_labels(organs, body, nodules)
    path = out / "labels.nii"
    write_volume(labels, path)
    _manifest(args, cfg, out, [args.organs, args.body, *(args.nodules or [])], [path])
    print(f"integrated labels -> {path}")


# ---------------------------------------------------------------------------
# augment

def cmd_augment_shrink(args, cfg):
    out = _out(args)
    labels = _as_labels(_read(args.labels), args.labels)
    a = cfg["augment"]
    lesions = connected_components(BinaryMask(labels.meta, labels.labels == curate.NODULE_LABEL),
                                   Connectivity.FACE)
    n = int(lesions.labels.max())
    if n == 0:
        raise DomainError(f"{args.labels}: no nodule voxels (label {curate.NODULE_LABEL})")
    if a["target_percent"] is not None:
        targets = np.full(n, float(a["target_percent"]))
    else:
        targets = augment.sample_target_percents(n, a["sample_low"], a["sample_high"], cfg["seed"])
    series = args.series_id or Path(args.labels).name.split(".")[0]
    rows = []
    current = labels
    for k in range(1, n + 1):
        lesion = BinaryMask(labels.meta, lesions.labels == k)
        sc = augment.ShrinkConfig(float(targets[k - 1]), a["connectivity"], a["max_iter"])
        current, res = augment.shrink_and_refill(current, lesion, sc)
        rows.append([series, k, repr(float(targets[k - 1])), repr(res.achieved_percent),
                     res.iterations_used, res.warning])
    path = out / "labels_aug.nii"
    write_volume(current, path)
    table = atomic_write(out / "augmentation_manifest.csv", _csv_text(
        ["series_id", "nodule_index", "target_percent", "achieved_percent", "iterations_used",
         "warning"], rows))
    _manifest(args, cfg, out, [args.labels], [path, table])
    print(f"shrunk {n} lesions -> {path}")


# ---------------------------------------------------------------------------
# flow

def _toy_masks(grid, radius):
    q = grid / 4.0
    centers = [(q, q), (3 * q, q), (q, 3 * q), (3 * q, 3 * q), (2 * q, 2 * q),
               (2 * q, q), (q, 2 * q), (3 * q, 2 * q)]
    return [flowgen.disk_mask(grid, c, radius) for c in centers]


def cmd_flow_train(args, cfg):
    out = _out(args)
    f = cfg["flow"]
    grid = int(f["grid"])
    data = flowgen.ToyDataGenerator(grid, _toy_masks(grid, f["radius"]), seed=cfg["seed"])
    base = flowgen.VelocityModel(data.dim, f["base_hidden"], seed=cfg["seed"])
    ctrl = flowgen.ControlResidual(data.dim, data.cond_dim, f["hidden"], seed=cfg["seed"] + 1,
                                   use_latent=f["use_latent"])
    tc = flowgen.TrainConfig(epochs=f["epochs"], batch_size=f["batch_size"],
                             learning_rate=f["learning_rate"], lambda_reg=f["lambda_reg"],
                             nodule_weight=f["nodule_weight"], seed=cfg["seed"],
                             steps_per_epoch=f["steps_per_epoch"])
    res = flowgen.train(base, ctrl, data, tc)
    paths = [out / "base.json", out / "control.json", out / "loss_history.csv"]
    flowgen.save_model(base, paths[0], {"flow": f, "seed": cfg["seed"]})
    flowgen.save_model(res.ctrl, paths[1], {"flow": f, "seed": cfg["seed"]})
    flowgen.write_loss_history(res.history, paths[2])
    _manifest(args, cfg, out, [], paths)
    print(f"trained {res.steps} steps; loss {res.history[0]:.4g} -> {res.history[-1]:.4g}")


def cmd_flow_sample(args, cfg):
    out = _out(args)
    ck = Path(args.checkpoint)
    base = flowgen.load_model(_need(ck / "base.json"))
    ctrl = flowgen.load_model(_need(ck / "control.json"))
    grid = int(round(np.sqrt(ctrl.dim)))
    if args.mask:
        obj = _read(args.mask)
        arr = obj.labels if isinstance(obj, LabelMap) else obj.data
        mask = np.asarray(arr).reshape(grid, grid) != 0
    else:
        cx, cy, r = (float(v) for v in args.disk.split(","))
        mask = flowgen.disk_mask(grid, (cx, cy), r)
    c = flowgen.conditioning_vector(mask)
    z = flowgen.sample_euler(base, ctrl, c, cfg["flow"]["steps"], cfg["seed"])
    img = z.reshape(grid, grid).T[:, :, None].astype(np.float32)  # [x, y, 1]
    path = out / "sample.raw"
    write_volume(Volume(VolumeMeta(img.shape), img), path)
    info = {"contrast": flowgen.mask_contrast(z, mask), "steps": cfg["flow"]["steps"],
            "seed": cfg["seed"]}
    side = atomic_write(out / "sample_report.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    _manifest(args, cfg, out, [ck / "base.json", ck / "control.json"], [path, side])
    print(f"sample contrast {info['contrast']:.4f} -> {path}")


def cmd_flow_gradcheck(args, cfg):
    out = _out(args)
    f = cfg["flow"]
    grid = int(args.grid)
    data = flowgen.ToyDataGenerator(grid, flowgen.disk_mask(grid, (grid / 2, grid / 2), grid / 4),
                                    seed=cfg["seed"])
    base = flowgen.VelocityModel(data.dim, f["base_hidden"], seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    batch = [next(data) for _ in range(4)]
    t = rng.random(4)
    report = {}
    for name, hidden in flowgen.SHIPPED_HIDDEN.items():
        ctrl = flowgen.ControlResidual(data.dim, data.cond_dim, hidden, seed=cfg["seed"] + 1)
        # leave the zero-initialised output layer so every layer's gradient is exercised
        ctrl.net.weights[-1][...] = rng.standard_normal(ctrl.net.weights[-1].shape) * 0.1
        report[name] = flowgen.gradient_check(base, ctrl, batch, t, f["epsilon"], f["lambda_reg"],
                                              f["nodule_weight"])
    path = atomic_write(out / "gradcheck.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _manifest(args, cfg, out, [], [path])
    worst = max(report.values())
    print(f"max relative gradient error {worst:.3e}")
    if worst >= 1e-4:
        raise DomainError(f"gradient check failed: {worst:.3e} >= 1e-4")


# ---------------------------------------------------------------------------
# eval

def cmd_eval_dice(args, cfg):
    out = _out(args)
    pred = _as_mask(_read(args.pred), args.pred)
    ref = _as_mask(_read(args.ref), args.ref) if args.ref else None
    anns = read_annotations(_need(args.annotations), strict=cfg["strict"])
    if not anns:
        raise DomainError("no annotations")
    rows = []
    for k, ann in enumerate(anns, start=1):
        r = ref if ref is not None else curate.box_mask(pred.meta, ann)
        rows.append([ann.series_id, k, repr(dice_in_voi(pred, r, ann, cfg["eval"]["margin_vox"]))])
    path = atomic_write(out / "dice_report.csv", _csv_text(["series_id", "nodule_index", "dice"], rows))
    _manifest(args, cfg, out, [p for p in (args.pred, args.ref, args.annotations) if p], [path])


def cmd_eval_froc(args, cfg):
    out = _out(args)
    dets = read_detections(_need(args.pred), strict=cfg["strict"])
    truths = read_annotations(_need(args.truth), strict=cfg["strict"])
    if args.scans < 1:
        raise UsageError("--scans must be >= 1")
    curves = froc_by_size(dets, truths, args.scans, cfg["eval"]["criterion"])
    emit_report({"froc": curves}, out, args.argv, cfg, [args.pred, args.truth], cfg["seed"])
    o = curves["overall"]
    print(f"average sensitivity {o.average_sensitivity:.3f}; detected {o.detected}/{o.total}")


def cmd_eval_fid(args, cfg):
    out = _out(args)
    fc = FeatureConfig()
    fa = [extract_features(_as_volume(_read(p), p), fc) for p in args.set_a]
    fb = [extract_features(_as_volume(_read(p), p), fc) for p in args.set_b]
    value = frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
    entry = {"pair": args.pair, "fid": value, "n_a": len(fa), "n_b": len(fb),
             "feature_config": {"bins": fc.bins, "hu_range": list(fc.hu_range),
                                "grad_percentiles": list(fc.grad_percentiles)}}
    emit_report({"fid": [entry]}, out, args.argv, cfg, [*args.set_a, *args.set_b], cfg["seed"])
    print(f"FID {value:.6g}")


def _read_scores(path):
    rows = []
    with open(_need(path), newline="") as f:
        reader = csv.DictReader(f)
        for col in ("score", "label"):
            if col not in (reader.fieldnames or []):
                raise FormatError(f"{path}: missing required column {col!r}")
        for i, row in enumerate(reader, start=1):
            try:
                rows.append((row.get("fraction") or "100", row.get("fold") or "1",
                             float(row["score"]), int(row["label"])))
            except ValueError as exc:
                raise FormatError(f"{path}: row {i}: {exc}") from exc
    return rows


def cmd_eval_auc(args, cfg):
    out = _out(args)
    rows = _read_scores(args.scores)
    if not rows:
        raise DomainError("no scores")
    groups = {}
    for frac, fold, s, y in rows:
        groups.setdefault((int(frac), int(fold)), []).append((s, y))
    e = cfg["eval"]
    results = []
    for frac in sorted({k[0] for k in groups}):
        vals = []
        for fold in sorted(k[1] for k in groups if k[0] == frac):
            s, y = zip(*groups[(frac, fold)])
            a = auc(s, y)
            lo, hi = bootstrap_ci(s, y, e["n_boot"], e["level"], cfg["seed"])
            results.append({"fold": fold, "fraction": frac, "auc": a, "ci_low": lo, "ci_high": hi})
            vals.append((a, lo, hi))
        m = np.mean(vals, axis=0)
        results.append({"fold": "mean", "fraction": frac, "auc": m[0], "ci_low": m[1], "ci_high": m[2]})
    emit_report({"auc": results}, out, args.argv, cfg, [args.scores], cfg["seed"])


def cmd_eval_folds(args, cfg):
    out = _out(args)
    labels = None
    if args.labels:
        with open(_need(args.labels), newline="") as f:
            labels = [int(r["label"]) for r in csv.DictReader(f)]
    n = args.n if args.n is not None else (len(labels) if labels is not None else None)
    if n is None:
        raise UsageError("give --n or --labels")
    plan = plan_folds(n, args.fraction, labels, cfg["seed"])
    rows = [[int(i), k + 1] for k, fold in enumerate(plan.folds) for i in fold]
    rows.sort()
    path = atomic_write(out / "folds.csv", _csv_text(["item", "fold"], rows))
    _manifest(args, cfg, out, [args.labels] if args.labels else [], [path])
    print(f"{len(plan.folds)} folds for the {args.fraction}% subset -> {path}")


# ---------------------------------------------------------------------------
# report

REPORT_FILES = ("froc_report.csv", "auc_report.csv", "fid_report.json")


def cmd_report(args, cfg):
    out = _out(args)
    rows = []
    for run in args.runs:
        run = Path(run)
        if not run.is_dir():
            raise FileNotFoundError(f"run directory not found: {run}")
        if (run / "froc_report.csv").exists():
            with open(run / "froc_report.csv", newline="") as f:
                for r in csv.DictReader(f):
                    if r["fp_per_scan"] == repr(0.125):
                        rows.append([str(run), "froc_avg", r["bin"], r["avg"]])
        if (run / "auc_report.csv").exists():
            with open(run / "auc_report.csv", newline="") as f:
                for r in csv.DictReader(f):
                    if r["fold"] == "mean":
                        rows.append([str(run), "auc_mean", r["fraction"], r["auc"]])
        if (run / "fid_report.json").exists():
            for e in json.loads((run / "fid_report.json").read_text()):
                rows.append([str(run), "fid", e["pair"], repr(float(e["fid"]))])
    if not rows:
        raise DomainError("nothing to report")
    path = atomic_write(out / "summary.csv", _csv_text(["run", "metric", "key", "value"], rows))
    inputs = [Path(r) / n for r in args.runs for n in REPORT_FILES if (Path(r) / n).exists()]
    _manifest(args, cfg, out, inputs, [path])


# ---------------------------------------------------------------------------
# parser

def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker threads (default: $NODKIT_JOBS or 1)")
    p.add_argument("--strict", dest="strict", action="store_true", default=None)
    p.add_argument("--lenient", dest="strict", action="store_false")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="nodkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nodkit {__version__}")
    top = parser.add_subparsers(dest="group", metavar="COMMAND", required=True)

    def sub(group, name, fn, help_):
        p = group.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    g = top.add_parser("curate", help="body masks, nodule masks, label integration")
    gs = g.add_subparsers(dest="cmd", metavar="SUBCOMMAND", required=True)
    p = sub(gs, "body", cmd_curate_body, "derive a body mask from a CT")
    p.add_argument("--ct", required=True)
    p.add_argument("--threshold-hu", dest="curate__threshold_hu", type=float)
    p = sub(gs, "nodule", cmd_curate_nodule, "point-driven nodule segmentation")
    p.add_argument("--ct", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--organs")
    p.add_argument("--series-id")
    p.add_argument("--method", dest="curate__method", choices=["kmeans", "otsu"])
    p.add_argument("--margin", dest="curate__margin_vox", type=int)
    p.add_argument("--dilate-mm", dest="curate__dilate_mm", type=float)
    p = sub(gs, "integrate", cmd_curate_integrate, "merge organ, body and nodule labels")
    p.add_argument("--organs", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--nodules", action="append")

    g = top.add_parser("augment", help="lesion-aware mask augmentation")
    gs = g.add_subparsers(dest="cmd", metavar="SUBCOMMAND", required=True)
    p = sub(gs, "shrink", cmd_augment_shrink, "shrink every nodule in a label map")
    p.add_argument("--labels", required=True)
    p.add_argument("--series-id")
    p.add_argument("--target-percent", dest="augment__target_percent", type=float)
    p.add_argument("--connectivity", dest="augment__connectivity", type=int, choices=[1, 2, 3])
    p.add_argument("--max-iter", dest="augment__max_iter", type=int)

    g = top.add_parser("flow", help="toy mask-conditioned rectified flow")
    gs = g.add_subparsers(dest="cmd", metavar="SUBCOMMAND", required=True)
    p = sub(gs, "train", cmd_flow_train, "train the control residual")
    p.add_argument("--grid", dest="flow__grid", type=int)
    p.add_argument("--epochs", dest="flow__epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="flow__steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="flow__batch_size", type=int)
    p.add_argument("--learning-rate", dest="flow__learning_rate", type=float)
    p.add_argument("--lambda-reg", dest="flow__lambda_reg", type=float)
    p = sub(gs, "sample", cmd_flow_sample, "sample from a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="directory written by 'flow train'")
    p.add_argument("--disk", default="8,8,2.5", help="cx,cy,radius of the nodule disk")
    p.add_argument("--mask", help="mask volume (grid x grid x 1) instead of --disk")
    p.add_argument("--steps", dest="flow__steps", type=int)
    p = sub(gs, "gradcheck", cmd_flow_gradcheck, "finite-difference gradient check")
    p.add_argument("--grid", type=int, default=4)

    g = top.add_parser("eval", help="evaluation metrics")
    gs = g.add_subparsers(dest="cmd", metavar="SUBCOMMAND", required=True)
    p = sub(gs, "dice", cmd_eval_dice, "Dice inside annotation VOIs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", help="reference mask (default: annotation boxes)")
    p.add_argument("--annotations", required=True)
    p.add_argument("--margin", dest="eval__margin_vox", type=int)
    p = sub(gs, "froc", cmd_eval_froc, "size-stratified FROC")
    p.add_argument("--pred", required=True, help="detection CSV")
    p.add_argument("--truth", required=True, help="annotation CSV")
    p.add_argument("--scans", type=int, required=True)
    p.add_argument("--criterion", dest="eval__criterion", choices=["box", "radius"])
    p = sub(gs, "fid", cmd_eval_fid, "Fréchet distance between two volume sets")
    p.add_argument("--set-a", nargs="+", required=True)
    p.add_argument("--set-b", nargs="+", required=True)
    p.add_argument("--pair", default="a-b")
    p = sub(gs, "auc", cmd_eval_auc, "per-fold AUC with bootstrap CIs")
    p.add_argument("--scores", required=True, help="CSV with score,label[,fold,fraction]")
    p.add_argument("--n-boot", dest="eval__n_boot", type=int)
    p = sub(gs, "folds", cmd_eval_folds, "plan data-fraction folds")
    p.add_argument("--n", type=int)
    p.add_argument("--fraction", type=int, required=True, choices=sorted(FOLD_COUNTS))
    p.add_argument("--labels", help="CSV with a label column for stratification")

    p = top.add_parser("report", parents=[common], help="summarise report directories")
    p.add_argument("runs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.argv = argv
    try:
        cfg = effective_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nodkit: error: {exc}", file=sys.stderr)
        return 2
    except (NodkitError, OSError, ValueError) as exc:
        print(f"nodkit: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
