"""
Segmentation similarity, rater agreement and slice selection.

All overlap ratios are normalised by the reference size:

    DSC = 2|S & R| / (|S| + |R|)
    FPE = |S \\ R| / |R|      FNE = |R \\ S| / |R|      VD = (|R| - |S|) / |R|

so FPE - FNE = -VD holds for every report. Surface distances are taken
between boundary voxels (6-connected in 3D, 4-connected per slice) in
millimetres.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage, stats

from src.errors import EmptyReference, LengthMismatch, TooFewRaters, TooFewSlices
from src.volume import BinaryMask, check_geometry, structure_for

logger = logging.getLogger(__name__)

METRIC_NAMES = ["dsc", "hd_mm", "hda_mm", "fpe", "fne", "vd"]
METRICS_COLUMNS = ["case", "slice", "method", "reference"] + METRIC_NAMES


class MetricsParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dsc_min: float = Field(0.7, ge=0, le=1)
    n_sigma: float = Field(3.0, gt=0)
    # quality tags on evaluation records
    low_dsc: float = Field(0.9, ge=0, le=1)
    high_hd_mm: float = Field(10.0, gt=0)
    over_segmentation: float = Field(0.1, ge=0)
    under_segmentation: float = Field(0.1, ge=0)


@dataclass
class MetricsReport:
    dsc: float
    hd_mm: float
    hda_mm: float
    fpe: float
    fne: float
    vd: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# ------------------------------- distances --------------------------------------


def _boundary(mask: np.ndarray) -> np.ndarray:
    inner = ndimage.binary_erosion(mask, structure=structure_for(2 * mask.ndim, mask.ndim), border_value=0)
    return mask & ~inner


def _directed(from_pts: np.ndarray, to_surface: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Distance from every boundary voxel of one mask to the nearest boundary voxel of the other."""
    dist = ndimage.distance_transform_edt(~to_surface, sampling=spacing)
    return dist[from_pts]


def _extent_mm(mask: np.ndarray, spacing: Sequence[float]) -> float:
    idx = np.argwhere(mask)
    return float(np.linalg.norm((idx.max(axis=0) - idx.min(axis=0)) * np.asarray(spacing)))


def _report(seg: np.ndarray, ref: np.ndarray, spacing: Sequence[float]) -> MetricsReport:
    n_ref = int(np.count_nonzero(ref))
    if n_ref == 0:
        raise EmptyReference("reference mask is empty")
    n_seg = int(np.count_nonzero(seg))
    inter = int(np.count_nonzero(seg & ref))
    dsc = 2.0 * inter / (n_seg + n_ref)
    fpe = (n_seg - inter) / n_ref
    fne = (n_ref - inter) / n_ref
    vd = (n_ref - n_seg) / n_ref
    if n_seg == 0:
        extent = _extent_mm(ref, spacing)
        return MetricsReport(dsc, extent, extent, fpe, fne, vd, ["empty_segmentation"])
    bs, br = _boundary(seg), _boundary(ref)
    d_sr = _directed(bs, br, spacing)
    d_rs = _directed(br, bs, spacing)
    hd = float(max(d_sr.max(), d_rs.max()))
    hda = float(0.5 * (d_sr.mean() + d_rs.mean()))
    return MetricsReport(dsc, hd, hda, fpe, fne, vd)


def compute_metrics(seg: BinaryMask, ref: BinaryMask) -> MetricsReport:
    check_geometry(seg, ref)
    return _report(seg.data, ref.data, seg.spacing)


def slice_metrics(seg: BinaryMask, ref: BinaryMask) -> List[Dict[str, object]]:
    """2D metrics per axial slice; slices with an empty reference are skipped."""
    check_geometry(seg, ref)
    rows = []
    for k in range(seg.data.shape[2]):
        r = ref.data[:, :, k]
        if not r.any():
            continue
        rep = _report(seg.data[:, :, k], r, seg.spacing[:2])
        rows.append({"slice": k, **rep.to_dict()})
    return rows


# ------------------------------- consensus / agreement --------------------------


def majority_consensus(masks: Sequence[BinaryMask]) -> BinaryMask:
    if len(masks) < 2:
        raise TooFewRaters(f"consensus needs at least 2 masks, got {len(masks)}")
    for m in masks[1:]:
        check_geometry(masks[0], m)
    votes = np.sum([m.data for m in masks], axis=0)
    return BinaryMask.like(masks[0], votes * 2 > len(masks))


@dataclass
class IccResult:
    icc: float
    ci_low: float
    ci_high: float
    p_value: float
    flags: List[str] = field(default_factory=list)


def icc_two_way_consistency(table: np.ndarray, alpha: float = 0.05) -> IccResult:
    """Single-measure consistency ICC(3,1) for a (slice x rater) table."""
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] < 2:
        raise TooFewRaters(f"need a (slices x raters) table with 2+ raters, got shape {t.shape}")
    n, k = t.shape
    if n < 2:
        raise TooFewSlices(f"need at least 2 slices, got {n}")
    if not np.isfinite(t).all():
        raise ValueError("rater table has missing or non-finite values")

    grand = t.mean()
    ss_rows = k * np.sum((t.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((t.mean(axis=0) - grand) ** 2)
    ss_err = max(np.sum((t - grand) ** 2) - ss_rows - ss_cols, 0.0)
    df1, df2 = n - 1, (n - 1) * (k - 1)
    msr, mse = ss_rows / df1, ss_err / df2

    if msr <= 0:
        logger.warning("no between-slice variance; ICC reported as 0")
        return IccResult(0.0, 0.0, 0.0, 1.0, ["degenerate"])
    if mse <= 1e-12 * msr:
        return IccResult(1.0, 1.0, 1.0, 0.0)

    icc = (msr - mse) / (msr + (k - 1) * mse)
    f_obs = msr / mse
    f_lo = f_obs / stats.f.ppf(1 - alpha / 2, df1, df2)
    f_hi = f_obs * stats.f.ppf(1 - alpha / 2, df2, df1)
    return IccResult(
        float(icc),
        float((f_lo - 1) / (f_lo + k - 1)),
        float((f_hi - 1) / (f_hi + k - 1)),
        float(stats.f.sf(f_obs, df1, df2)),
    )


def select_uncertain_slices(
    hd_pre: Sequence[float],
    hd_post: Sequence[float],
    dsc: Sequence[float],
    dsc_min: float = 0.7,
    n_sigma: float = 3.0,
) -> List[int]:
    """Slices whose |HD_pre - HD_post| exceeds mean + n_sigma * std of those differences.

    Only slices with dsc >= dsc_min take part, in the statistics and in the selection.
    """
    pre, post, d = (np.asarray(v, dtype=np.float64) for v in (hd_pre, hd_post, dsc))
    if not pre.shape == post.shape == d.shape:
        raise LengthMismatch(f"lengths differ: {pre.size}, {post.size}, {d.size}")
    keep = np.nonzero(d >= dsc_min)[0]
    if keep.size < 2:
        raise TooFewSlices(f"{keep.size} slices left with DSC >= {dsc_min}")
    delta = np.abs(pre[keep] - post[keep])
    if np.ptp(delta) == 0:
        return []
    thr = delta.mean() + n_sigma * delta.std()
    chosen = keep[delta > thr].tolist()
    logger.info("selected %d of %d slices (threshold %.3f mm)", len(chosen), keep.size, thr)
    return chosen


def paired_method_test(a: Sequence[float], b: Sequence[float]) -> Dict[str, float]:
    """Paired t-test between two methods scored on the same cases."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.size} vs {b.size} paired scores")
    if a.size < 2:
        raise ValueError("paired test needs at least 2 cases")
    diff = a - b
    if np.ptp(diff) == 0:
        # constant difference: t is 0 or infinite
        d = float(diff[0])
        t = 0.0 if d == 0 else math.copysign(math.inf, d)
        return {"t": t, "p_value": 1.0 if d == 0 else 0.0, "mean_diff": d, "n": int(a.size)}
    res = stats.ttest_rel(a, b)
    return {"t": float(res.statistic), "p_value": float(res.pvalue), "mean_diff": float(diff.mean()), "n": int(a.size)}


def significance_stars(p: Optional[float]) -> str:
    if p is None or not np.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
