"""
Volume types and the voxel operations every stage builds on.

Arrays are indexed (x, y, z). Axial slices are ``data[:, :, k]`` with k = 0
the most cephalic slice. Physical coordinates are ``index * spacing + origin``
in millimetres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.errors import DegenerateHistogram, EmptyRegion, GeometryMismatch, OutOfBounds

logger = logging.getLogger(__name__)

HU_MIN = -1024
HU_MAX = 3071
OTSU_EPS = 1e-12

Triple = Tuple[float, float, float]


def _triple(values: Sequence[float], name: str) -> Triple:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} needs 3 components, got {len(out)}")
    return out  # type: ignore[return-value]


# ------------------------------- grid types ------------------------------------


@dataclass
class _Grid:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = _triple(self.spacing, "spacing")
        self.origin = _triple(self.origin, "origin")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_mm(self, index: np.ndarray) -> np.ndarray:
        """Voxel indices (..., 3) to physical millimetres."""
        return np.asarray(index, dtype=np.float64) * np.asarray(self.spacing) + np.asarray(self.origin)

    def same_geometry(self, other: "_Grid") -> bool:
        return (
            self.data.shape == other.data.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass
class Volume3D(_Grid):
    """Scalar CT grid in Hounsfield Units, clamped to [HU_MIN, HU_MAX]."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.data.dtype == bool:
            raise ValueError("Volume3D holds intensities; use BinaryMask for boolean data")
        if np.issubdtype(self.data.dtype, np.integer):
            info = np.iinfo(self.data.dtype)
            lo, hi = max(HU_MIN, int(info.min)), min(HU_MAX, int(info.max))
            self.data = np.clip(self.data, lo, hi).astype(self.data.dtype, copy=False)
        else:
            self.data = np.clip(self.data, HU_MIN, HU_MAX)


@dataclass
class BinaryMask(_Grid):
    def __post_init__(self) -> None:
        super().__post_init__()
        self.data = self.data.astype(bool, copy=False)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @property
    def volume_mm3(self) -> float:
        return self.count * self.voxel_volume_mm3

    @classmethod
    def like(cls, grid: _Grid, data: np.ndarray | None = None) -> "BinaryMask":
        if data is None:
            data = np.zeros(grid.data.shape, dtype=bool)
        return cls(data, grid.spacing, grid.origin)


@dataclass
class LabelMap(_Grid):
    """Integer labels, 0 = background, regions 1..n_regions."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if np.any(self.data < 0):
            raise ValueError("labels must be non-negative")
        self.data = self.data.astype(np.int32, copy=False)

    @property
    def n_regions(self) -> int:
        return int(self.data.max()) if self.data.size else 0

    def relabel(self) -> "LabelMap":
        """Make labels contiguous 1..n keeping their relative order."""
        present = np.unique(self.data)
        present = present[present > 0]
        lut = np.zeros(int(self.data.max()) + 1, dtype=np.int32)
        lut[present] = np.arange(1, present.size + 1, dtype=np.int32)
        return LabelMap(lut[self.data], self.spacing, self.origin)

    def region(self, label: int) -> BinaryMask:
        return BinaryMask(self.data == label, self.spacing, self.origin)


def check_geometry(a: _Grid, b: _Grid) -> None:
    if not a.same_geometry(b):
        raise GeometryMismatch(
            f"geometry mismatch: {a.dims}/{a.spacing}/{a.origin} vs {b.dims}/{b.spacing}/{b.origin}"
        )


# ------------------------------- histograms ------------------------------------


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bins(self) -> int:
        return int(self.counts.size)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


@dataclass
class ThresholdResult:
    threshold: float
    objective: float
    bin_index: int
    iterations: int = 0


def compute_histogram(vol: Volume3D, roi: BinaryMask | None = None, bins: int = 256) -> Histogram:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if roi is not None:
        check_geometry(vol, roi)
        values = vol.data[roi.data]
    else:
        values = vol.data.ravel()
    if values.size == 0:
        raise EmptyRegion("histogram region is empty")
    lo, hi = float(values.min()), float(values.max())
    value_range = (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return Histogram(bin_edges=edges, counts=counts.astype(np.int64))


def _otsu_objective(counts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Criterion for every boundary t = 1..bins-1 (class one = bins[:t])."""
    c = counts.astype(np.float64)
    cx = c * centers
    cxx = cx * centers
    w1 = np.cumsum(c)[:-1]
    s1 = np.cumsum(cx)[:-1]
    q1 = np.cumsum(cxx)[:-1]
    w2 = c.sum() - w1
    s2 = cx.sum() - s1
    q2 = cxx.sum() - q1
    with np.errstate(divide="ignore", invalid="ignore"):
        m1 = s1 / w1
        m2 = s2 / w2
        v1 = np.clip(q1 / w1 - m1 * m1, 0.0, None)
        v2 = np.clip(q2 / w2 - m2 * m2, 0.0, None)
        obj = (m2 - m1) ** 2 / (v1 + v2 + OTSU_EPS)
    obj[(w1 <= 0) | (w2 <= 0)] = -np.inf
    return obj


def otsu_threshold(hist: Histogram) -> ThresholdResult:
    if np.count_nonzero(hist.counts) < 2:
        raise DegenerateHistogram("histogram has mass in fewer than two bins")
    obj = _otsu_objective(hist.counts, hist.centers)
    t = int(np.argmax(obj)) + 1  # argmax keeps the lowest maximizer
    return ThresholdResult(threshold=float(hist.bin_edges[t]), objective=float(obj[t - 1]), bin_index=t)


def _snap(centers: np.ndarray, value: float) -> int:
    return int(np.clip(np.searchsorted(centers, value, side="left"), 1, centers.size - 1))


def iterative_midpoint_threshold(hist: Histogram) -> ThresholdResult:
    """T <- (mean below T + mean above T) / 2 until the bin boundary stops moving."""
    if np.count_nonzero(hist.counts) < 2:
        raise DegenerateHistogram("histogram has mass in fewer than two bins")
    c = hist.counts.astype(np.float64)
    x = hist.centers
    threshold = float((c * x).sum() / c.sum())
    t = _snap(x, threshold)
    iterations = 0
    for iterations in range(1, hist.bins + 2):
        lo, hi = c[:t], c[t:]
        mu_a = float((lo * x[:t]).sum() / lo.sum())
        mu_na = float((hi * x[t:]).sum() / hi.sum())
        threshold = 0.5 * (mu_a + mu_na)
        t_next = _snap(x, threshold)
        if t_next == t:
            break
        t = t_next
    else:
        logger.warning("midpoint threshold did not settle after %d iterations", iterations)
    obj = _otsu_objective(hist.counts, x)
    return ThresholdResult(threshold=threshold, objective=float(obj[t - 1]), bin_index=t, iterations=iterations)


# ------------------------- components and morphology ---------------------------


def structure_for(connectivity: int, ndim: int = 3) -> np.ndarray:
    if connectivity in (6, 4):
        return ndimage.generate_binary_structure(ndim, 1)
    if connectivity in (26, 8):
        return ndimage.generate_binary_structure(ndim, ndim)
    raise ValueError(f"unsupported connectivity {connectivity}")


def connected_components(mask: BinaryMask, connectivity: int = 26) -> LabelMap:
    labels, _ = ndimage.label(mask.data, structure=structure_for(connectivity))
    return LabelMap(labels, mask.spacing, mask.origin)


def ellipsoid_element(spacing: Sequence[float], radius_mm: float) -> np.ndarray:
    """Discrete ellipsoid of physical radius ``radius_mm`` on an anisotropic grid."""
    half = [int(np.floor(radius_mm / s + 1e-9)) for s in spacing]
    grids = np.ogrid[tuple(slice(-h, h + 1) for h in half)]
    d2 = sum((g * s) ** 2 for g, s in zip(grids, spacing))
    return d2 <= radius_mm * radius_mm + 1e-9


def morphology(mask: BinaryMask, op: str, radius_mm: float) -> BinaryMask:
    if radius_mm < 0:
        raise ValueError("radius_mm must be >= 0")
    if op not in ("erode", "dilate", "open", "close"):
        raise ValueError(f"unknown morphology op {op!r}")
    if radius_mm == 0:
        return BinaryMask(mask.data.copy(), mask.spacing, mask.origin)
    se = ellipsoid_element(mask.spacing, radius_mm)
    data = mask.data
    if op == "erode":
        out = ndimage.binary_erosion(data, structure=se, border_value=0)
    elif op == "dilate":
        out = ndimage.binary_dilation(data, structure=se)
    elif op == "open":
        out = ndimage.binary_dilation(ndimage.binary_erosion(data, structure=se, border_value=0), structure=se)
    else:
        out = ndimage.binary_erosion(ndimage.binary_dilation(data, structure=se), structure=se, border_value=1)
    return BinaryMask(out, mask.spacing, mask.origin)


# ------------------------------ region growing ----------------------------------


def _as_index_array(seeds: Sequence[Sequence[int]] | np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    idx = np.asarray(seeds, dtype=np.int64)
    if idx.size == 0:
        raise EmptyRegion("no seeds given")
    idx = idx.reshape(-1, 3)
    if np.any(idx < 0) or np.any(idx >= np.asarray(shape)):
        raise OutOfBounds("seed outside the volume")
    return idx


def confidence_connected_grow(
    vol: Volume3D,
    seeds: Sequence[Sequence[int]] | np.ndarray,
    multiplier: float = 2.5,
    iterations: int = 4,
    connectivity: int = 26,
) -> BinaryMask:
    """
    Grow from ``seeds`` through voxels inside mean +/- multiplier * std of the
    current region; statistics start from the seed voxels and are refitted at
    most ``iterations`` times.
    """
    idx = _as_index_array(seeds, vol.data.shape)
    where = tuple(idx.T)
    seed_mask = np.zeros(vol.data.shape, dtype=bool)
    seed_mask[where] = True
    structure = structure_for(connectivity)

    values = vol.data[where].astype(np.float64)
    mean, std = float(values.mean()), float(values.std())
    region: np.ndarray | None = None
    for _ in range(iterations + 1):
        lo, hi = mean - multiplier * std, mean + multiplier * std
        inside = ((vol.data >= lo) & (vol.data <= hi)) | seed_mask
        labels, _ = ndimage.label(inside, structure=structure)
        keep = np.unique(labels[where])
        grown = np.isin(labels, keep[keep > 0])
        if region is not None and np.array_equal(grown, region):
            break
        region = grown
        values = vol.data[region].astype(np.float64)
        mean, std = float(values.mean()), float(values.std())
    assert region is not None
    return BinaryMask(region, vol.spacing, vol.origin)
