"""Flow and occlusion evaluation measures plus the flat report format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import UsageError

FL_THRESHOLD = 3.0
FL_NOTE = "fl = fraction of pixels with end-point error strictly greater than 3 px (no 5% relative criterion, unlike the official KITTI Fl)"


def _epe_map(flow, gt):
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape or flow.shape[-3] != 2:
        raise UsageError(f"flow {flow.shape} and ground truth {gt.shape} must match with 2 channels")
    return np.sqrt(((flow - gt) ** 2).sum(axis=-3))


def _mask(gamma, region, shape):
    m = np.ones(shape, bool) if gamma is None else np.asarray(gamma).reshape(shape) > 0
    if region is not None:
        m = m & (np.asarray(region).reshape(shape) > 0)
    return m


def epe(flow, gt, gamma=None, region=None):
    """Mean end-point error over gamma & region; ``None`` when that set is empty."""
    e = _epe_map(flow, gt)
    m = _mask(gamma, region, e.shape)
    return float(e[m].mean()) if m.any() else None


def fl(flow, gt, gamma=None, region=None):
    """Outlier fraction with end-point error strictly above 3 px; ``None`` on an empty set."""
    e = _epe_map(flow, gt)
    m = _mask(gamma, region, e.shape)
    return float((e[m] > FL_THRESHOLD).mean()) if m.any() else None


def confusion(pred_occ, occ_gt, rho=None, threshold=0.5):
    """(tp, fp, fn, tn) with occluded as the positive class."""
    if not 0 < threshold < 1:
        raise UsageError("threshold must lie in (0, 1)")
    gt = np.asarray(occ_gt) > 0
    pred = np.asarray(pred_occ, dtype=np.float64).reshape(gt.shape) > threshold
    valid = _mask(rho, None, gt.shape)
    tp = int((pred & gt & valid).sum())
    fp = int((pred & ~gt & valid).sum())
    fn = int((~pred & gt & valid).sum())
    tn = int((~pred & ~gt & valid).sum())
    return tp, fp, fn, tn


def scores_from_confusion(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None
    return precision, recall, f1


def occlusion_scores(pred_occ, occ_gt, rho=None, threshold=0.5):
    """(precision, recall, f1) of the occluded class; undefined entries are ``None``."""
    tp, fp, fn, _ = confusion(pred_occ, occ_gt, rho, threshold)
    return scores_from_confusion(tp, fp, fn)


@dataclass
class EvalReport:
    epe_all: float | None = None
    epe_occ: float | None = None
    epe_noc: float | None = None
    epe_bg: float | None = None
    epe_fg: float | None = None
    fl_all: float | None = None
    fl_occ: float | None = None
    fl_noc: float | None = None
    occ_precision: float | None = None
    occ_recall: float | None = None
    occ_f1: float | None = None
    n_all: int = 0
    n_occ: int = 0
    n_noc: int = 0
    n_bg: int = 0
    n_fg: int = 0
    occ_tp: int = 0
    occ_fp: int = 0
    occ_fn: int = 0

    def to_dict(self):
        return asdict(self)

    def partition_consistent(self, rtol=1e-9):
        """Check that region means recombine into the overall means."""
        pairs = [
            ("epe_all", ("epe_occ", "epe_noc"), ("n_occ", "n_noc")),
            ("epe_all", ("epe_bg", "epe_fg"), ("n_bg", "n_fg")),
            ("fl_all", ("fl_occ", "fl_noc"), ("n_occ", "n_noc")),
        ]
        for whole, parts, counts in pairs:
            if sum(getattr(self, c) for c in counts) != self.n_all:
                return False
            if self.n_all == 0:
                continue
            total = sum((getattr(self, p) or 0.0) * getattr(self, c) for p, c in zip(parts, counts))
            if not math.isclose(total / self.n_all, getattr(self, whole), rel_tol=rtol, abs_tol=1e-12):
                return False
        return True


def evaluate_pair(flow, gt, occ_prob=None, occ_gt=None, labels=None, gamma=None, rho=None, threshold=0.5):
    """Per-image report from full-resolution (2, H, W) predictions and ground truth."""
    e = _epe_map(flow, gt)
    shape = e.shape
    valid = _mask(gamma, None, shape)
    occ = np.zeros(shape, bool) if occ_gt is None else np.asarray(occ_gt).reshape(shape) > 0
    fg = np.zeros(shape, bool) if labels is None else np.asarray(labels).reshape(shape) > 0
    regions = {"all": valid, "occ": valid & occ, "noc": valid & ~occ, "bg": valid & ~fg, "fg": valid & fg}
    rep = EvalReport()
    for name, m in regions.items():
        n = int(m.sum())
        setattr(rep, f"n_{name}", n)
        if n:
            setattr(rep, f"epe_{name}", float(e[m].mean()))
            if name in ("all", "occ", "noc"):
                setattr(rep, f"fl_{name}", float((e[m] > FL_THRESHOLD).mean()))
    if occ_prob is not None and occ_gt is not None:
        tp, fp, fn, _ = confusion(occ_prob, occ, rho, threshold)
        rep.occ_tp, rep.occ_fp, rep.occ_fn = tp, fp, fn
        rep.occ_precision, rep.occ_recall, rep.occ_f1 = scores_from_confusion(tp, fp, fn)
    return rep


def aggregate(reports):
    """Merge per-image reports by count-weighted reduction."""
    reports = list(reports)
    out = EvalReport()
    for name in ("all", "occ", "noc", "bg", "fg"):
        n = sum(getattr(r, f"n_{name}") for r in reports)
        setattr(out, f"n_{name}", n)
        if not n:
            continue
        setattr(out, f"epe_{name}", sum((getattr(r, f"epe_{name}") or 0.0) * getattr(r, f"n_{name}") for r in reports) / n)
        if name in ("all", "occ", "noc"):
            setattr(out, f"fl_{name}", sum((getattr(r, f"fl_{name}") or 0.0) * getattr(r, f"n_{name}") for r in reports) / n)
    out.occ_tp = sum(r.occ_tp for r in reports)
    out.occ_fp = sum(r.occ_fp for r in reports)
    out.occ_fn = sum(r.occ_fn for r in reports)
    if any(r.occ_f1 is not None or r.occ_recall is not None or r.occ_precision is not None for r in reports):
        out.occ_precision, out.occ_recall, out.occ_f1 = scores_from_confusion(out.occ_tp, out.occ_fp, out.occ_fn)
    return out


REPORT_FIELDS = tuple(f.name for f in fields(EvalReport))


def format_reports(per_image, aggregate_report, meta=None):
    """Flat one-record-per-line JSON text: header, one line per image, aggregate."""
    header = {"record": "header", "fl_definition": FL_NOTE, "fields": list(REPORT_FIELDS)}
    if meta:
        header.update(meta)
    lines = [json.dumps(header, sort_keys=False)]
    for key, rep in per_image:
        rec = {"record": "image", **key, **rep.to_dict()}
        lines.append(json.dumps(rec))
    lines.append(json.dumps({"record": "aggregate", **aggregate_report.to_dict()}))
    return "\n".join(lines) + "\n"


def parse_reports(text):
    """Inverse of :func:`format_reports`: (header, [(key, report)], aggregate)."""
    header, images, agg = None, [], None
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("record")
        if kind == "header":
            header = rec
        elif kind == "aggregate":
            agg = EvalReport(**rec)
        else:
            vals = {k: rec.pop(k) for k in REPORT_FIELDS}
            images.append((rec, EvalReport(**vals)))
    return header, images, agg
