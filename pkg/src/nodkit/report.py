"""Report files and run manifests.

Every file except ``run_manifest.json`` is a pure function of the inputs
and seed; the manifest isolates the wall-clock timestamp in one field.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

from . import __version__
from .errors import DomainError

MANIFEST = "run_manifest.json"


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x):
    return repr(float(x))


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file())
    for q in files:
        with open(q, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command=None, config=None, inputs=(), seed=None, outputs=()) -> Path:
    doc = {
        "tool": "nodkit",
        "version": __version__,
        "command": list(command or []),
        "config": config or {},
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": sorted(Path(o).name for o in outputs),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    return atomic_write(Path(out_dir) / MANIFEST, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def froc_rows(curves: dict):
    rows = []
    for name, c in curves.items():
        for f, s in zip(c.fp_rates, c.sensitivities):
            rows.append([name, _num(f), _num(s), _num(c.average_sensitivity), c.detected, c.total])
    return rows


def emit_report(results: dict, out_dir, command=None, config=None, inputs=(), seed=None) -> list:
    """Write report files for whichever of ``froc``, ``fid`` and ``auc`` are present.

    ``results["froc"]`` maps bin name to :class:`FrocCurve`; ``results["fid"]``
    is a list of dicts with pair, fid, n_a, n_b, feature_config;
    ``results["auc"]`` is a list of dicts with fold, fraction, auc, ci_low,
    ci_high. Raises :class:`DomainError` when there is nothing to write.
    """
    out = Path(out_dir)
    written = []
    froc = results.get("froc") or {}
    fid = results.get("fid") or []
    aucs = results.get("auc") or []
    if not (froc or fid or aucs):
        raise DomainError("nothing to report")
    if froc:
        written.append(atomic_write(out / "froc_report.csv", _csv_text(
            ["bin", "fp_per_scan", "sensitivity", "avg", "detected", "total"], froc_rows(froc))))
        plot = [[name, _num(f), _num(s)] for name, c in froc.items()
                for f, s in zip(c.fp_rates, c.sensitivities)]
        written.append(atomic_write(out / "froc_plot.csv", _csv_text(["series", "x", "y"], plot)))
    if fid:
        written.append(atomic_write(out / "fid_report.json",
                                    json.dumps(fid, indent=2, sort_keys=True) + "\n"))
    if aucs:
        rows = [[r["fold"], r["fraction"], _num(r["auc"]), _num(r["ci_low"]), _num(r["ci_high"])]
                for r in aucs]
        written.append(atomic_write(out / "auc_report.csv", _csv_text(
            ["fold", "fraction", "auc", "ci_low", "ci_high"], rows)))
        plot = [[r["fraction"], r["fold"], _num(r["auc"])] for r in aucs if r["fold"] != "mean"]
        written.append(atomic_write(out / "auc_plot.csv", _csv_text(["series", "x", "y"], plot)))
    written.append(write_manifest(out, command, config, inputs, seed, written))
    return written
