"""Overlap, surface-distance and border metrics, plus the PR/AUC sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateError, GeometryError, ParameterError
from .losses import boundary_mask
from .volgrid import BinaryMask

METRIC_FIELDS = ("dsc", "crd", "cad", "msd", "hd95")
CSV_COLUMNS = ("scan_id", "split", "tags", "dsc", "crd", "cad", "msd", "hd95", "flags")


@dataclass
class SegmentationMetrics:
    dsc: float
    msd: float = math.nan
    hd95: float = math.nan
    crd: float = math.nan
    cad: float = math.nan
    flags: Tuple[str, ...] = ()

    @property
    def degenerate(self) -> bool:
        return any(f in self.flags for f in ("empty_pred", "empty_gt"))

    def as_row(self, scan_id="", split="", tags=()) -> dict:
        row = {"scan_id": scan_id, "split": split, "tags": ";".join(sorted(tags)),
               "flags": ";".join(self.flags)}
        for name in METRIC_FIELDS:
            row[name] = getattr(self, name)
        return row


def _check_pair(pred: BinaryMask, gt: BinaryMask):
    if not pred.same_geometry(gt):
        raise GeometryError("prediction and ground truth differ in geometry")


def dice_coefficient(pred: BinaryMask, gt: BinaryMask) -> float:
    _check_pair(pred, gt)
    s, g = pred.voxels, gt.voxels
    total = int(s.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((s & g).sum()) / total


def surface_points(mask: BinaryMask) -> np.ndarray:
    """World coordinates (mm) of boundary voxel centres, shape (n, 3)."""
    if not mask.voxels.any():
        raise DegenerateError("surface of an empty mask")
    idx = np.argwhere(boundary_mask(mask.voxels))
    return mask.world(idx)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    d, _ = cKDTree(b).query(a, k=1)
    return np.asarray(d, dtype=np.float64)


def _surface_pair(pred, gt):
    _check_pair(pred, gt)
    a, b = surface_points(pred), surface_points(gt)
    return _directed(a, b), _directed(b, a)


def mean_surface_distance(pred: BinaryMask, gt: BinaryMask) -> float:
    d_ab, d_ba = _surface_pair(pred, gt)
    return 0.5 * (d_ab.mean() + d_ba.mean())


def hausdorff95(pred: BinaryMask, gt: BinaryMask) -> float:
    d_ab, d_ba = _surface_pair(pred, gt)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def hausdorff(pred: BinaryMask, gt: BinaryMask) -> float:
    d_ab, d_ba = _surface_pair(pred, gt)
    return float(max(d_ab.max(), d_ba.max()))


def _z_extent(mask: BinaryMask) -> Tuple[int, int]:
    zs = np.flatnonzero(mask.voxels.any(axis=(0, 1)))
    if zs.size == 0:
        raise DegenerateError("z-extent of an empty mask")
    return int(zs.min()), int(zs.max())


def cranial_caudal_errors(pred: BinaryMask, gt: BinaryMask) -> Tuple[float, float]:
    """(CrD, CaD) in mm; higher z index is cranial."""
    _check_pair(pred, gt)
    g_lo, g_hi = _z_extent(gt)
    p_lo, p_hi = _z_extent(pred)
    sz = gt.spacing[2]
    return (g_hi - p_hi) * sz, (g_lo - p_lo) * sz


def evaluate_scan(pred: BinaryMask, gt: BinaryMask) -> SegmentationMetrics:
    _check_pair(pred, gt)
    flags = []
    if not pred.voxels.any():
        flags.append("empty_pred")
    if not gt.voxels.any():
        flags.append("empty_gt")
    dsc = dice_coefficient(pred, gt)
    if flags:
        if len(flags) == 2:
            flags.append("dsc_by_convention")
        return SegmentationMetrics(dsc=dsc, flags=tuple(flags))
    d_ab, d_ba = _surface_pair(pred, gt)
    crd, cad = cranial_caudal_errors(pred, gt)
    return SegmentationMetrics(
        dsc=dsc,
        msd=float(0.5 * (d_ab.mean() + d_ba.mean())),
        hd95=float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))),
        crd=float(crd), cad=float(cad))


def per_slice_dice(pred: BinaryMask, gt: BinaryMask) -> np.ndarray:
    """2-D Dice per z slice; NaN where both slices are empty."""
    _check_pair(pred, gt)
    inter = (pred.voxels & gt.voxels).sum(axis=(0, 1)).astype(float)
    total = pred.voxels.sum(axis=(0, 1)) + gt.voxels.sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, 2 * inter / total, np.nan)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float


def default_thresholds(n: int = 101) -> np.ndarray:
    return np.linspace(1.0, 0.0, n)


def precision_recall_auc(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                         thresholds: Optional[Sequence[float]] = None) -> PRCurve:
    """Voxelwise PR curve pooled over scans; a voxel is positive when prob > threshold."""
    thr = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if len(probs) == 0 or len(probs) != len(gts):
        raise ParameterError("need one ground truth per probability volume and at least one scan")
    if thr.size == 0 or thr.min() < 0 or thr.max() > 1:
        raise ParameterError("thresholds must lie in [0, 1]")
    tp = np.zeros(thr.size)
    fp = np.zeros(thr.size)
    n_pos = 0
    for p, g in zip(probs, gts):
        p = np.asarray(getattr(p, "voxels", p), dtype=np.float64).ravel()
        g = np.asarray(getattr(g, "voxels", g), dtype=bool).ravel()
        if p.shape != g.shape:
            raise GeometryError("probability and ground-truth shapes differ")
        n_pos += int(g.sum())
        pos, neg = np.sort(p[g]), np.sort(p[~g])
        # count of values strictly above each threshold
        tp += pos.size - np.searchsorted(pos, thr, side="right")
        fp += neg.size - np.searchsorted(neg, thr, side="right")
    if n_pos == 0:
        raise DegenerateError("recall is undefined: ground truth is empty in every scan")
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
    recall = tp / n_pos
    # along recall; equal-recall points keep descending-threshold order
    order = np.lexsort((-thr, recall))
    auc = float(np.trapezoid(precision[order], recall[order]))
    return PRCurve(thr, precision, recall, auc)


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
