"""Detection matching and FROC analysis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
SIZE_BINS = (("<10", 0.0, 10.0), ("10-<20", 10.0, 20.0), (">=20", 20.0, np.inf))

TP, FP, IGNORED = "TP", "FP", "IGNORED"


@dataclass(frozen=True)
class MatchResult:
    tags: list          # per detection, input order
    truth_index: list   # credited (TP) or hit (IGNORED) truth, -1 for FP
    truth_hit: list     # per truth
    scores: list


def _hits(det, truth, criterion):
    d = np.asarray(det.center_mm)
    c = np.asarray(truth.center_mm)
    if criterion == "box":
        return bool(np.all(np.abs(d - c) <= np.asarray(truth.extent_mm) / 2.0))
    if criterion == "radius":
        return float(np.linalg.norm(d - c)) <= truth.diameter_mm / 2.0
    raise ValueError(f"unknown hit criterion {criterion!r}")


def match_detections(dets, truths, criterion: str = "box") -> MatchResult:
    """Tag detections TP/FP/IGNORED, crediting each truth at most once.

    Detections are visited by descending score (stable for ties). A
    detection hitting an uncredited truth of its own series is a TP for the
    nearest such truth; one that only hits credited truths is IGNORED; one
    that hits nothing is a FP.
    """
    dets, truths = list(dets), list(truths)
    tags = [FP] * len(dets)
    truth_index = [-1] * len(dets)
    hit = [False] * len(truths)
    by_series = {}
    for j, t in enumerate(truths):
        by_series.setdefault(t.series_id, []).append(j)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        d = dets[i]
        cands = [j for j in by_series.get(d.series_id, ()) if _hits(d, truths[j], criterion)]
        if not cands:
            continue
        dist = {j: float(np.linalg.norm(np.subtract(d.center_mm, truths[j].center_mm))) for j in cands}
        free = [j for j in cands if not hit[j]]
        pool = free or cands
        j = min(pool, key=lambda k: (dist[k], k))
        truth_index[i] = j
        if free:
            tags[i] = TP
            hit[j] = True
        else:
            tags[i] = IGNORED
    return MatchResult(tags, truth_index, hit, [d.score for d in dets])


@dataclass(frozen=True)
class FrocCurve:
    fp_rates: tuple
    sensitivities: tuple
    average_sensitivity: float
    detected: int
    total: int
    thresholds: tuple = field(default=())

    @property
    def detection_rate(self) -> float:
        return self.detected / self.total


def froc_curve(scores, tags, n_scans: int, n_truths: int, fp_rates=FP_RATES) -> FrocCurve:
    """Step-function FROC from tagged detections.

    At each FP/scan rate ``f`` the sensitivity is taken at the lowest score
    threshold whose FP count is at most ``f * n_scans``. Only ``TP`` and
    ``FP`` tags count; anything else is ignored.
    """
    if n_truths < 1:
        raise DomainError("FROC needs at least one truth")
    if n_scans < 1:
        raise DomainError("n_scans must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    tags = np.asarray(tags, dtype=object)
    keep = (tags == TP) | (tags == FP)
    scores, is_tp = scores[keep], (tags[keep] == TP)
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    # cumulative counts at each distinct threshold (last index of each score run)
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(~is_tp)
    if scores.size:
        last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
        thr, tp_at, fp_at = scores[last], cum_tp[last], cum_fp[last]
    else:
        thr = tp_at = fp_at = np.zeros(0)
    sens, chosen = [], []
    for f in fp_rates:
        ok = np.flatnonzero(fp_at <= f * n_scans)
        if ok.size:
            k = ok[-1]
            sens.append(float(tp_at[k]) / n_truths)
            chosen.append(float(thr[k]))
        else:
            sens.append(0.0)
            chosen.append(float("inf"))
    detected = int(is_tp.sum())
    return FrocCurve(tuple(float(f) for f in fp_rates), tuple(sens), float(np.mean(sens)),
                     detected, int(n_truths), tuple(chosen))


def size_bin(diameter_mm: float) -> str:
    for name, lo, hi in SIZE_BINS:
        if lo <= diameter_mm < hi:
            return name
    raise DomainError(f"diameter must be > 0, got {diameter_mm}")


def stratify_by_size(truths) -> dict:
    """Group truth indices into the <10, 10-<20 and >=20 mm bins."""
    groups = {name: [] for name, _, _ in SIZE_BINS}
    for j, t in enumerate(truths):
        groups[size_bin(t.diameter_mm)].append(j)
    return groups


def froc_by_size(dets, truths, n_scans: int, criterion: str = "box") -> dict:
    """Overall and per-size-bin FROC curves.

    Per bin, TPs credited to other bins are dropped while every FP of the
    full detection set still counts. Empty bins are omitted.
    """
    match = match_detections(dets, truths, criterion)
    out = {"overall": froc_curve(match.scores, match.tags, n_scans, len(truths))}
    for name, members in stratify_by_size(truths).items():
        if not members:
            continue
        member = set(members)
        tags = [t if (t == FP or (t == TP and match.truth_index[i] in member)) else IGNORED
                for i, t in enumerate(match.tags)]
        out[name] = froc_curve(match.scores, tags, n_scans, len(members))
    return out
