"""
Lesion delimitation and texture descriptors.

- srm_segment: statistical region merging over 26-neighbour voxel pairs
- quantize:    per-ROI grey-level reduction to L levels (1..L)
- GLCM:        symmetric co-occurrence counts for the 13 unitary directions,
               averaged and normalised per ROI
- features:    f1..f26 plus max/mean/min/std of the raw ROI intensities

Two feature variants exist. ``tabulated`` takes the literal
forms (f5 with p^2, f16/f17 with i+j, f18/f19 with the
correlation f9, f20/f21 both over L, f25 centred on f8, f26 centred on nu).
``classical`` uses the usual Haralick forms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ConstantRoi, EmptyGlcm, EmptyRegion
from src.io_formats import write_report
from src.volume import BinaryMask, LabelMap, Volume3D, check_geometry

logger = logging.getLogger(__name__)

QUANT_EPS = 1e-6
LEVELS = (8, 16, 32, 64, 128, 256)
GLOBAL_NAMES = ["global_max", "global_mean", "global_min", "global_std"]
FEATURE_NAMES = [f"f{i}" for i in range(1, 27)] + GLOBAL_NAMES
FEATURE_COLUMNS = ["roi_id", "L", "label"] + FEATURE_NAMES

# one offset per +/- pair: first non-zero component positive
DIRECTIONS: List[Tuple[int, int, int]] = [
    d for d in product((-1, 0, 1), repeat=3) if any(d) and next(c for c in d if c != 0) > 0
]


class RadiomicsParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    srm_q: float = Field(32.0, gt=0)
    levels: List[int] = Field(default_factory=lambda: list(LEVELS))
    variant: Literal["tabulated", "classical"] = "tabulated"
    min_roi_voxels: int = Field(8, ge=2)
    strict_constant: bool = False


@dataclass
class QuantizedRoi:
    levels: int
    data: np.ndarray  # cropped to the ROI box; 0 outside the ROI, 1..L inside
    hu_min: float
    hu_max: float
    constant: bool = False


@dataclass
class FeatureVector:
    roi_id: str
    L: int
    label: str
    values: Dict[str, float]
    flags: List[str] = field(default_factory=list)

    def as_array(self, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        return np.array([self.values[n] for n in names], dtype=np.float64)

    def to_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"roi_id": self.roi_id, "L": self.L, "label": self.label}
        row.update({n: self.values[n] for n in FEATURE_NAMES})
        return row


# --------------------------------- region merging --------------------------------


def _pairs(index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (a, b) of 26-neighbours that both lie in the region (index >= 0)."""
    heads, tails = [], []
    for d in DIRECTIONS:
        src = tuple(slice(max(0, -c), index.shape[a] - max(0, c)) for a, c in enumerate(d))
        dst = tuple(slice(max(0, c), index.shape[a] - max(0, -c)) for a, c in enumerate(d))
        a, b = index[src].ravel(), index[dst].ravel()
        ok = (a >= 0) & (b >= 0)
        heads.append(a[ok])
        tails.append(b[ok])
    return np.concatenate(heads), np.concatenate(tails)


def srm_segment(vol: Volume3D, lung_mask: BinaryMask, q: float = 32.0) -> LabelMap:
    """
    Sort neighbour pairs by |dI| and merge their regions while

        |mean(R1) - mean(R2)| <= sqrt(b(R1)^2 + b(R2)^2)
        b(R)^2 = g^2 ln(2/delta) / (2 q |R|),  delta = 1 / (6 n^2)

    with g the intensity range and n the number of voxels in the mask.
    """
    check_geometry(vol, lung_mask)
    n = lung_mask.count
    if n == 0:
        raise EmptyRegion("lung mask is empty")
    index = np.full(vol.dims, -1, dtype=np.int64)
    index[lung_mask.data] = np.arange(n)
    values = vol.data[lung_mask.data].astype(np.float64)
    g = float(values.max() - values.min())
    scale = g * g * math.log(12.0 * n * n) / (2.0 * q)

    a, b = _pairs(index)
    order = np.argsort(np.abs(values[a] - values[b]), kind="stable")

    parent = list(range(n))
    size = [1] * n
    total = values.tolist()

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    merges = 0
    for e in order.tolist():
        ra, rb = find(int(a[e])), find(int(b[e]))
        if ra == rb:
            continue
        na, nb = size[ra], size[rb]
        diff = abs(total[ra] / na - total[rb] / nb)
        if diff * diff <= scale / na + scale / nb:
            if na < nb:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            total[ra] += total[rb]
            merges += 1

    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    _, compact = np.unique(roots, return_inverse=True)
    labels = np.zeros(vol.dims, dtype=np.int32)
    labels[lung_mask.data] = compact.astype(np.int32) + 1
    out = LabelMap(labels, vol.spacing, vol.origin)
    logger.info("SRM q=%g: %d voxels into %d regions", q, n, n - merges)
    return out


def lesion_rois(label_map: LabelMap, min_voxels: int = 8) -> List[Tuple[int, BinaryMask]]:
    counts = np.bincount(label_map.data.ravel())
    return [
        (int(k), label_map.region(int(k)))
        for k in np.flatnonzero(counts)
        if k > 0 and counts[k] >= min_voxels
    ]


# ---------------------------------- quantization ----------------------------------


def _roi_box(mask: np.ndarray) -> Tuple[slice, ...]:
    nz = np.argwhere(mask)
    lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
    return tuple(slice(int(x), int(y)) for x, y in zip(lo, hi))


def quantize(vol: Volume3D, roi: BinaryMask, L: int, strict: bool = False) -> QuantizedRoi:
    """level = 1 + floor((I - min) L / (max - min + eps)), clamped to 1..L; min/max over the ROI."""
    check_geometry(vol, roi)
    if L < 2:
        raise ValueError(f"quantization needs at least 2 levels, got {L}")
    if not roi.data.any():
        raise EmptyRegion("ROI is empty")
    box = _roi_box(roi.data)
    inside = roi.data[box]
    values = vol.data[box].astype(np.float64)
    lo, hi = float(values[inside].min()), float(values[inside].max())
    out = np.zeros(inside.shape, dtype=np.int32)
    if hi - lo <= 0:
        if strict:
            raise ConstantRoi(f"ROI intensity is constant ({lo:.1f} HU)")
        logger.warning("constant ROI at %.1f HU; every voxel gets level 1", lo)
        out[inside] = 1
        return QuantizedRoi(L, out, lo, hi, constant=True)
    levels = 1 + np.floor((values[inside] - lo) * L / (hi - lo + QUANT_EPS)).astype(np.int64)
    out[inside] = np.clip(levels, 1, L)
    return QuantizedRoi(L, out, lo, hi)


# -------------------------------------- GLCM --------------------------------------


def glcm_direction(q: QuantizedRoi, offset: Sequence[int]) -> np.ndarray:
    """Symmetric raw counts for one unitary offset; both voxels must be in the ROI."""
    d = tuple(int(c) for c in offset)
    if len(d) != 3 or not any(d) or any(c not in (-1, 0, 1) for c in d):
        raise ValueError(f"offset must be unitary, got {offset}")
    L = q.levels
    shape = q.data.shape
    src = tuple(slice(max(0, -c), shape[a] - max(0, c)) for a, c in enumerate(d))
    dst = tuple(slice(max(0, c), shape[a] - max(0, -c)) for a, c in enumerate(d))
    a, b = q.data[src].ravel(), q.data[dst].ravel()
    ok = (a > 0) & (b > 0)
    counts = np.bincount((a[ok] - 1) * L + (b[ok] - 1), minlength=L * L).reshape(L, L).astype(np.float64)
    return counts + counts.T


@dataclass
class GlcmMatrix:
    L: int
    p: np.ndarray
    direction_counts: Optional[np.ndarray] = None  # (13, L, L) raw symmetric counts

    @classmethod
    def from_counts(cls, counts: np.ndarray, direction_counts: Optional[np.ndarray] = None) -> "GlcmMatrix":
        total = float(counts.sum())
        if total <= 0:
            raise EmptyGlcm("co-occurrence matrix has no pairs")
        return cls(L=int(counts.shape[0]), p=counts / total, direction_counts=direction_counts)

    @cached_property
    def grid(self) -> Tuple[np.ndarray, np.ndarray]:
        i, j = np.indices(self.p.shape, dtype=np.float64)
        return i + 1.0, j + 1.0

    @cached_property
    def px(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @cached_property
    def py(self) -> np.ndarray:
        return self.p.sum(axis=0)

    @cached_property
    def p_sum(self) -> np.ndarray:
        """p_{x+y}(k) at index k, k = 2..2L."""
        i, j = self.grid
        return np.bincount((i + j).astype(np.int64).ravel(), weights=self.p.ravel(), minlength=2 * self.L + 1)

    @cached_property
    def p_diff(self) -> np.ndarray:
        """p_{x-y}(k), k = 0..L-1."""
        i, j = self.grid
        return np.bincount(np.abs(i - j).astype(np.int64).ravel(), weights=self.p.ravel(), minlength=self.L)

    @cached_property
    def mu_x(self) -> float:
        return float((np.arange(1, self.L + 1) * self.px).sum())

    @cached_property
    def mu_y(self) -> float:
        return float((np.arange(1, self.L + 1) * self.py).sum())

    @cached_property
    def sigma_x(self) -> float:
        k = np.arange(1, self.L + 1)
        return math.sqrt(float(((k - self.mu_x) ** 2 * self.px).sum()))

    @cached_property
    def sigma_y(self) -> float:
        k = np.arange(1, self.L + 1)
        return math.sqrt(float(((k - self.mu_y) ** 2 * self.py).sum()))

    @cached_property
    def hx(self) -> float:
        return _entropy(self.px)

    @cached_property
    def hy(self) -> float:
        return _entropy(self.py)

    @cached_property
    def hxy(self) -> float:
        return _entropy(self.p)

    @cached_property
    def hxy1(self) -> float:
        return -float(_plog(self.p, np.outer(self.px, self.py)).sum())

    @cached_property
    def hxy2(self) -> float:
        return _entropy(np.outer(self.px, self.py))

    @property
    def nu(self) -> float:
        return float(self.p.sum()) / self.L


def _plog(weight: np.ndarray, arg: np.ndarray) -> np.ndarray:
    """weight * log(arg) with 0 log 0 = 0."""
    out = np.zeros(np.broadcast(weight, arg).shape, dtype=np.float64)
    ok = (weight > 0) & (arg > 0)
    out[ok] = (weight * np.log(np.where(ok, arg, 1.0)))[ok]
    return out


def _entropy(p: np.ndarray) -> float:
    return -float(_plog(p, p).sum())


def glcm_averaged(q: QuantizedRoi) -> GlcmMatrix:
    """Mean of the 13 direction matrices, normalised to sum 1."""
    stack = np.stack([glcm_direction(q, d) for d in DIRECTIONS])
    mean = stack.mean(axis=0)
    if mean.sum() <= 0:
        raise EmptyGlcm("ROI has no voxel pair in any direction")
    return GlcmMatrix.from_counts(mean, direction_counts=stack)


# ------------------------------------ features ------------------------------------


def texture_features(
    g: GlcmMatrix,
    intensities: np.ndarray,
    variant: str = "tabulated",
    roi_id: str = "",
    label: str = "",
) -> FeatureVector:
    if variant not in ("tabulated", "classical"):
        raise ValueError(f"unknown feature variant {variant!r}")
    tabulated = variant == "tabulated"
    p, L = g.p, g.L
    i, j = g.grid
    k_sum = np.arange(2 * L + 1, dtype=np.float64)
    k_diff = np.arange(L, dtype=np.float64)
    flags: List[str] = []
    f: Dict[str, float] = {}

    f["f1"] = float(p.max())
    if tabulated:
        f["f2"] = float(p.sum()) / (2 * L)
        f["f4"] = math.sqrt(float(((p - f["f2"]) ** 2).sum())) / (2 * L)
    else:
        f["f2"] = float(p.mean())
        f["f4"] = float(p.std())
    f["f3"] = float(p.min())
    f["f5"] = float((i * j * (p * p if tabulated else p)).sum())
    centred = i + j - g.mu_x - g.mu_y
    f["f6"] = float((centred ** 4 * p).sum())
    f["f7"] = float((centred ** 3 * p).sum())
    f["f8"] = float(((i - j) ** 2 * p).sum())

    sxy = g.sigma_x * g.sigma_y
    if sxy > 0:
        f["f9"] = float(((i - g.mu_x) * (j - g.mu_y) * p).sum()) / sxy
        f["f10"] = (float((i * j * p).sum()) - g.mu_x * g.mu_y) / sxy
    else:
        f["f9"] = f["f10"] = 0.0
        flags.append("zero_sigma")

    f["f11"] = _entropy(g.p_diff)
    if tabulated:
        f["f12"] = float((k_diff ** 2 * g.p_diff).sum())
    else:
        mean_d = float((k_diff * g.p_diff).sum())
        f["f12"] = float(((k_diff - mean_d) ** 2 * g.p_diff).sum())
    f["f13"] = float((np.abs(i - j) * p).sum())
    f["f14"] = float((p * p).sum())
    f["f15"] = g.hxy
    if tabulated:
        f["f16"] = float((p / (1.0 + np.abs(i + j))).sum())
        f["f17"] = float((p / (1.0 + np.abs(i + j) ** 2)).sum())
    else:
        f["f16"] = float((p / (1.0 + np.abs(i - j))).sum())
        f["f17"] = float((p / (1.0 + (i - j) ** 2)).sum())

    h_max = max(g.hx, g.hy)
    ref = f["f9"] if tabulated else g.hxy
    if h_max > 0:
        f["f18"] = (ref - g.hxy1) / h_max
    else:
        f["f18"] = 0.0
        flags.append("f18_zero_entropy")
    inner = 1.0 - math.exp(-2.0 * (g.hxy2 - ref))
    if inner < 0:
        flags.append("f19_clipped")
    f["f19"] = math.sqrt(max(inner, 0.0))

    if tabulated:
        f["f20"] = float((p / (1.0 + np.abs(i - j) ** 2 / L)).sum())
        f["f21"] = float((p / (1.0 + (i - j) ** 2 / L)).sum())
    else:
        f["f20"] = float((p / (1.0 + np.abs(i - j) / L)).sum())
        f["f21"] = float((p / (1.0 + (i - j) ** 2 / L ** 2)).sum())
    f["f22"] = float(p.max())
    f["f23"] = float((k_sum * g.p_sum).sum())
    f["f24"] = _entropy(g.p_sum)
    centre = f["f8"] if tabulated else f["f23"]
    f["f25"] = float(((k_sum - centre) ** 2 * g.p_sum).sum())
    nu = g.nu if tabulated else g.mu_x
    f["f26"] = float(((i - nu) ** 2 * p).sum())

    raw = np.asarray(intensities, dtype=np.float64).ravel()
    if raw.size == 0:
        raise EmptyRegion("no ROI intensities for the global descriptors")
    f["global_max"] = float(raw.max())
    f["global_mean"] = float(raw.mean())
    f["global_min"] = float(raw.min())
    f["global_std"] = float(raw.std())

    values = {n: f[n] for n in FEATURE_NAMES}
    bad = [n for n, v in values.items() if not math.isfinite(v)]
    if bad:
        raise ValueError(f"non-finite features: {bad}")
    return FeatureVector(roi_id=roi_id, L=L, label=label, values=values, flags=flags)


def extract_roi_features(
    vol: Volume3D,
    roi: BinaryMask,
    levels: Sequence[int] = LEVELS,
    variant: str = "tabulated",
    roi_id: str = "",
    label: str = "",
    strict: bool = False,
) -> List[FeatureVector]:
    """One feature vector per quantization level."""
    raw = vol.data[roi.data]
    out = []
    for L in levels:
        q = quantize(vol, roi, L, strict=strict)
        vec = texture_features(glcm_averaged(q), raw, variant, roi_id=roi_id, label=label)
        if q.constant:
            vec.flags.append("constant_roi")
        out.append(vec)
    return out


def feature_rows(vectors: Sequence[FeatureVector]) -> List[Dict[str, object]]:
    return [v.to_row() for v in vectors]


def write_feature_csv(rows: Sequence[Dict[str, object]], path: str | Path) -> Path:
    return write_report(rows, FEATURE_COLUMNS, path)
