"""Overlap and surface metrics plus the per-case CSV report.

Conventions, documented because the source material leaves them open:
two empty masks score Dice = IoU = 1 (an absent target correctly
predicted absent); surface voxels use 6-connectivity; the surface
distance percentile pools both directed distance sets by default
(``mode='pooled'``) with linear interpolation, and distances are scaled
by the physical spacing and reported in centimeters.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import ContractError, DimensionError

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    iou: float
    hd95_cm: Optional[float]       # None when either mask is empty
    gpr_percent: Optional[float]   # prediction-volume ratio; None when pred empty
    gpr_label_percent: Optional[float] = None
    risk_group: str = ""
    center: str = ""
    n_stage: str = ""

    def __post_init__(self):
        if self.iou > self.dice + 1e-12:
            raise ContractError("iou must not exceed dice")


@dataclass
class SummaryStats:
    metric: str
    mean: float
    ci_low: float
    ci_high: float
    n: int
    bootstrap_seed: int

    def __post_init__(self):
        if not (self.ci_low <= self.mean + 1e-12 and self.mean - 1e-12 <= self.ci_high):
            raise ContractError("confidence interval must contain the mean")


def _check_grids(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask grids differ: {a.shape} vs {b.shape}")


def dice_iou(pred: np.ndarray, label: np.ndarray) -> tuple[float, float]:
    """Dice and IoU from voxel counts; both masks empty scores (1, 1)."""
    pred = np.asarray(pred).astype(bool)
    label = np.asarray(label).astype(bool)
    _check_grids(pred, label)
    p = int(pred.sum())
    y = int(label.sum())
    if p == 0 and y == 0:
        return 1.0, 1.0
    i = int((pred & label).sum())
    dice = 2.0 * i / (p + y)
    iou = i / (p + y - i)
    return dice, iou


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices [n, 3] of mask voxels with a 6-neighbour outside the mask."""
    mask = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return np.argwhere(mask & ~interior)


def hd95(pred: np.ndarray, label: np.ndarray, spacing=(1.0, 1.0, 3.0),
         mode: str = "pooled") -> Optional[float]:
    """95th percentile of symmetric surface distances, in centimeters.

    Returns None (undefined) when either mask is empty. ``mode`` selects
    whether the percentile is taken over the pooled directed distances
    (default) or as the max of the two per-direction percentiles.
    """
    pred = np.asarray(pred).astype(bool)
    label = np.asarray(label).astype(bool)
    _check_grids(pred, label)
    if not pred.any() or not label.any():
        return None
    if mode not in ("pooled", "max_directed"):
        raise ContractError(f"unknown hd95 mode {mode!r}")
    sp = np.asarray(spacing, dtype=np.float64)
    a = surface_voxels(pred) * sp
    b = surface_voxels(label) * sp
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    if mode == "pooled":
        value = np.percentile(np.concatenate([d_ab, d_ba]), 95)
    else:
        value = max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))
    return float(value) / 10.0


def gpr(gtv: np.ndarray, ptv: np.ndarray) -> Optional[float]:
    """100 * |GTV| / |PTV| by voxel volume; None when the PTV is empty."""
    gtv = np.asarray(gtv).astype(bool)
    ptv = np.asarray(ptv).astype(bool)
    _check_grids(gtv, ptv)
    denom = int(ptv.sum())
    if denom == 0:
        return None
    return 100.0 * int(gtv.sum()) / denom


def case_metrics(case_id: str, pred: np.ndarray, label: np.ndarray, *,
                 gtv: np.ndarray | None = None, spacing=(1.0, 1.0, 3.0),
                 risk: str = "", center: str = "", n_stage: str = "",
                 hd95_mode: str = "pooled") -> CaseMetrics:
    d, i = dice_iou(pred, label)
    return CaseMetrics(
        case_id=case_id, dice=d, iou=i,
        hd95_cm=hd95(pred, label, spacing, mode=hd95_mode),
        gpr_percent=None if gtv is None else gpr(gtv, pred),
        gpr_label_percent=None if gtv is None else gpr(gtv, label),
        risk_group=risk, center=center, n_stage=n_stage)


CSV_FIELDS = ("case_id", "dice", "iou", "hd95_cm", "gpr_percent",
              "gpr_label_percent", "risk_group", "center", "n_stage")


def write_report(path, cases: list[CaseMetrics], summaries: list[SummaryStats]) -> None:
    """One CSV row per case followed by summary rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for c in cases:
            writer.writerow([c.case_id, f"{c.dice:.6f}", f"{c.iou:.6f}",
                             "" if c.hd95_cm is None else f"{c.hd95_cm:.6f}",
                             "" if c.gpr_percent is None else f"{c.gpr_percent:.4f}",
                             "" if c.gpr_label_percent is None else f"{c.gpr_label_percent:.4f}",
                             c.risk_group, c.center, c.n_stage])
        writer.writerow([])
        writer.writerow(("metric", "mean", "ci_low", "ci_high", "n", "bootstrap_seed"))
        for s in summaries:
            writer.writerow([s.metric, f"{s.mean:.6f}", f"{s.ci_low:.6f}",
                             f"{s.ci_high:.6f}", s.n, s.bootstrap_seed])


def read_report(path) -> tuple[list[dict], list[dict]]:
    rows = list(csv.reader(open(path)))
    split = rows.index([])
    cases = [dict(zip(rows[0], r)) for r in rows[1:split]]
    summaries = [dict(zip(rows[split + 1], r)) for r in rows[split + 2:]]
    return cases, summaries
