"""
Trachea detection and wavefront airway extraction.

The tree is grown segment by segment. A segment advances its front one
26-neighbour layer per step, admitting voxels dark enough for the adaptive
threshold. A front that splits in two with a radius jump spawns two children;
more than two pieces is treated as leakage. A finished segment is kept only if
its growth rate, compactness and front-size drift pass.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from skimage.measure import label as label2d, regionprops

from src.errors import DegenerateFront, DegenerateSegment, OutOfBounds, TracheaNotFound
from src.volume import BinaryMask, Volume3D, compute_histogram, otsu_threshold, structure_for

logger = logging.getLogger(__name__)

_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
    dtype=np.int64,
)


class AirwayParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    time_step: float = Field(0.8, gt=0, le=1)
    t_intensity: float = -625.0
    alpha: float = Field(1.4, ge=0)
    t_sobel: float = Field(2.5, gt=0)
    beta: float = Field(2.0, ge=1)
    t_gr: float = Field(1.0, gt=0)
    gr_slack: float = Field(0.1, ge=0)
    t_compact: float = Field(0.72, ge=0, le=1)
    t_wave: float = Field(0.10, gt=0, le=1)
    diameter_range_mm: Tuple[float, float] = (5.5, 8.5)
    roundness_min: float = Field(0.9, ge=0)
    min_region_px: int = Field(4, ge=1)
    min_subfront_fraction: float = Field(0.05, ge=0, lt=1)
    re_smoothing: float = Field(0.1, ge=0, le=1)
    max_steps: int = Field(5000, ge=1)
    max_segments: int = Field(255, ge=1)


# ------------------------------- state types -----------------------------------


@dataclass
class WavefrontState:
    voxels: np.ndarray  # (m, 3) indices of the current front
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    sizes: List[int] = field(default_factory=list)
    mu_s: float = 0.0
    sigma_hist: Tuple[float, float] = (0.0, 0.0)
    r_expected: float = 1.0


@dataclass
class FrontCheck:
    outcome: str  # none | bifurcate | leak
    r_actual: float
    subfronts: List[np.ndarray]


@dataclass
class AirwaySegment:
    id: int
    parent: Optional[int]
    voxels: np.ndarray  # (n, 3)
    sizes: List[int] = field(default_factory=list)
    child_ids: List[int] = field(default_factory=list)
    accepted: bool = False
    reason: str = ""
    compactness: Optional[float] = None
    growth: Optional[float] = None

    @property
    def n(self) -> int:
        return int(len(self.voxels))

    @property
    def surface_faces(self) -> int:
        return exposed_faces(self.voxels)

    def to_json(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "parent": self.parent,
            "n": self.n,
            "A": self.surface_faces,
            "C": self.compactness,
            "GR": self.growth,
            "accepted": self.accepted,
            "reason": self.reason,
        }


@dataclass
class AirwayTree:
    segments: List[AirwaySegment]
    mask: BinaryMask

    def to_rows(self) -> List[Dict[str, Any]]:
        return [s.to_json() for s in self.segments]

    def to_json(self) -> Dict[str, Any]:
        return {"segments": self.to_rows()}

    def children(self, seg_id: int) -> List[AirwaySegment]:
        return [s for s in self.segments if s.parent == seg_id]


@dataclass
class TracheaDetection:
    seed: Tuple[int, int, int]
    dome: BinaryMask
    slice_index: int
    diameter_mm: float
    roundness: float
    region: np.ndarray  # (m, 3) voxels of the detected cross-section


# ------------------------------ shape measures ----------------------------------


def exposed_faces(voxels: np.ndarray) -> int:
    """Number of voxel faces not shared with another voxel of the set."""
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if v.size == 0:
        return 0
    lo = v.min(axis=0)
    grid = np.zeros(tuple(v.max(axis=0) - lo + 3), dtype=np.int8)
    grid[tuple((v - lo + 1).T)] = 1
    return int(sum(np.count_nonzero(np.diff(grid, axis=a)) for a in range(3)))


def growth_rate(sizes: List[int]) -> float:
    if len(sizes) < 2:
        raise DegenerateFront("growth rate needs at least two front sizes")
    s = np.asarray(sizes, dtype=np.float64)
    if np.any(s[:-1] == 0):
        raise DegenerateFront("zero-sized front")
    return float(np.mean(s[1:] / s[:-1]))


def _exact_cbrt(n: int) -> float:
    r = round(n ** (1.0 / 3.0))
    return float(r) if r ** 3 == n else n ** (1.0 / 3.0)


def discrete_compactness(seg: AirwaySegment) -> float:
    n = seg.n
    if n <= 1:
        raise DegenerateSegment("compactness is undefined for fewer than two voxels")
    r = _exact_cbrt(n)
    return (n - seg.surface_faces / 6.0) / (n - r * r)


def _trim_taper(sizes: List[int]) -> List[int]:
    """Drop the trailing strictly decreasing run of front sizes (keeps its peak)."""
    j = len(sizes) - 1
    while j > 0 and sizes[j - 1] > sizes[j]:
        j -= 1
    return list(sizes[: j + 1])


def accept_segment(seg: AirwaySegment, sizes: List[int], params: AirwayParams) -> Tuple[bool, str]:
    trimmed = _trim_taper(sizes)
    if len(trimmed) >= 2:
        seg.growth = growth_rate(trimmed)
        if seg.growth >= params.t_gr * (1.0 + params.gr_slack):
            return False, "growth"
    try:
        seg.compactness = discrete_compactness(seg)
    except DegenerateSegment:
        return False, "degenerate"
    if seg.compactness <= params.t_compact:
        return False, "compactness"
    first, last = trimmed[0], trimmed[-1]
    if abs(last - first) >= params.t_wave * max(first, 1):
        return False, "size_diff"
    return True, ""


def check_bifurcation(
    front: WavefrontState, beta: float, min_subfront_fraction: float = 0.05
) -> FrontCheck:
    v = np.asarray(front.voxels, dtype=np.int64).reshape(-1, 3)
    if front.r_expected <= 0:
        raise ValueError("r_expected must be > 0")
    pts = v * np.asarray(front.spacing)
    r_a = float(np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).max())) if len(v) else 0.0

    lo = v.min(axis=0)
    grid = np.zeros(tuple(v.max(axis=0) - lo + 1), dtype=bool)
    local = v - lo
    grid[tuple(local.T)] = True
    labels, n = ndimage.label(grid, structure=structure_for(26))
    lab = labels[tuple(local.T)]
    sizes = np.bincount(lab, minlength=n + 1)
    min_size = max(1, math.ceil(min_subfront_fraction * len(v)))
    big = [k for k in range(1, n + 1) if sizes[k] >= min_size]
    subfronts = [v[lab == k] for k in big]

    if len(big) > 2:
        return FrontCheck("leak", r_a, subfronts)
    if len(big) == 2 and r_a > beta * front.r_expected:
        return FrontCheck("bifurcate", r_a, subfronts)
    return FrontCheck("none", r_a, subfronts)


# ------------------------------ trachea search ----------------------------------


def _air_mask(vol: Volume3D) -> np.ndarray:
    return vol.data < otsu_threshold(compute_histogram(vol)).threshold


def detect_trachea(
    vol: Volume3D,
    diameter_range_mm: Tuple[float, float] = (5.5, 8.5),
    roundness_min: float = 0.9,
    air: Optional[BinaryMask] = None,
    min_region_px: int = 4,
) -> TracheaDetection:
    """First round, trachea-sized, isolated air region scanning from slice 0."""
    air_data = air.data if air is not None else _air_mask(vol)
    sx, sy, _ = vol.spacing
    nx, ny, nz = vol.dims
    d_lo, d_hi = diameter_range_mm
    for k in range(nz):
        sl = air_data[:, :, k]
        if not sl.any():
            continue
        for region in regionprops(label2d(sl, connectivity=1)):
            r0, c0, r1, c1 = region.bbox
            if r0 == 0 or c0 == 0 or r1 == nx or c1 == ny or region.area < min_region_px:
                continue
            area_mm2 = region.area * sx * sy
            diameter = 2.0 * math.sqrt(area_mm2 / math.pi)
            if not d_lo <= diameter <= d_hi:
                continue
            perimeter = region.perimeter * math.sqrt(sx * sy)
            if perimeter <= 0:
                continue
            roundness = 4.0 * math.pi * area_mm2 / perimeter ** 2
            if roundness < roundness_min:
                continue
            coords = region.coords
            c = np.rint(region.centroid).astype(int)
            if not sl[c[0], c[1]]:
                c = coords[np.argmin(((coords - region.centroid) ** 2).sum(axis=1))]
            seed = (int(c[0]), int(c[1]), k)
            dome = np.zeros(vol.dims, dtype=bool)
            x0, y0 = seed[0], seed[1]
            win = (slice(max(x0 - 1, 0), x0 + 2), slice(max(y0 - 1, 0), y0 + 2), slice(max(k - 1, 0), k + 2))
            dome[win] = air_data[win]
            dome[seed] = True
            logger.info("trachea at slice %d, seed %s, diameter %.2f mm, roundness %.2f", k, seed, diameter, roundness)
            region_voxels = np.column_stack([coords, np.full(len(coords), k)])
            return TracheaDetection(
                seed=seed,
                dome=BinaryMask(dome, vol.spacing, vol.origin),
                slice_index=k,
                diameter_mm=diameter,
                roundness=roundness,
                region=region_voxels,
            )
    raise TracheaNotFound("no round trachea-sized air region in any slice")


# ------------------------------ propagation -------------------------------------


def sobel_magnitude(vol: Volume3D) -> np.ndarray:
    data = vol.data.astype(np.float32)
    mag = np.zeros_like(data)
    for axis, s in enumerate(vol.spacing):
        g = ndimage.sobel(data, axis=axis) / s
        mag += g * g
    return np.sqrt(mag)


class _Propagator:
    def __init__(self, vol: Volume3D, air: np.ndarray, params: AirwayParams):
        self.vol = vol
        self.shape = vol.dims
        self.flat = vol.data.ravel().astype(np.float64)
        self.grad = sobel_magnitude(vol).ravel()
        self.air = air.ravel()
        self.visited = np.zeros(self.flat.size, dtype=bool)
        self.p = params
        self.spacing = vol.spacing

    def to_flat(self, v: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(v).T), self.shape)

    def to_idx(self, f: np.ndarray) -> np.ndarray:
        return np.column_stack(np.unravel_index(f, self.shape))

    def neighbours(self, front: np.ndarray) -> np.ndarray:
        idx = self.to_idx(front)
        cand = (idx[:, None, :] + _OFFSETS[None, :, :]).reshape(-1, 3)
        ok = np.all((cand >= 0) & (cand < np.asarray(self.shape)), axis=1)
        return np.unique(self.to_flat(cand[ok]))

    def grow(self, front: np.ndarray, r_e: float) -> Tuple[AirwaySegment, List[np.ndarray], float, str]:
        """Grow one segment from ``front`` (flat indices, already visited)."""
        p = self.p
        parts = [front]
        sizes = [int(front.size)]
        values = self.flat[front]
        total, count = float(values.sum()), int(values.size)
        sigma = (float(values.std()), float(values.std()))
        grads = [self.grad[front]]
        grad_scale = float(np.median(grads[0]))
        pending = np.empty(0, dtype=np.int64)
        children: List[np.ndarray] = []
        outcome = "end"

        for _ in range(p.max_steps):
            cand = np.union1d(self.neighbours(front), pending)
            cand = cand[~self.visited[cand] & self.air[cand]]
            if cand.size == 0:
                break
            intensity = self.flat[cand]
            base = total / count + p.alpha * max(sigma)
            limit = max(p.t_intensity, base)
            certain = intensity <= base
            uncertain = ~certain & (intensity <= limit) & (self.grad[cand] <= p.t_sobel * grad_scale)
            unc_idx = np.flatnonzero(uncertain)
            take = math.ceil(p.time_step * unc_idx.size)
            order = unc_idx[np.lexsort((cand[unc_idx], intensity[unc_idx]))]
            admitted = np.union1d(cand[certain], cand[order[:take]])
            pending = cand[order[take:]]
            if admitted.size == 0:
                break
            self.visited[admitted] = True

            check = check_bifurcation(
                WavefrontState(voxels=self.to_idx(admitted), spacing=self.spacing, r_expected=r_e),
                p.beta,
                p.min_subfront_fraction,
            )
            if check.outcome == "leak":
                parts.append(admitted)
                sizes.append(int(admitted.size))
                outcome = "leak"
                logger.warning("front split into %d pieces; segment treated as a leak", len(check.subfronts))
                break
            if check.outcome == "bifurcate":
                children = [self.to_flat(sf) for sf in check.subfronts]
                spare = np.setdiff1d(admitted, np.concatenate(children))
                if spare.size:
                    parts.append(spare)
                outcome = "bifurcate"
                break

            parts.append(admitted)
            sizes.append(int(admitted.size))
            vals = self.flat[admitted]
            total += float(vals.sum())
            count += int(vals.size)
            sigma = (float(vals.std()), sigma[0])
            grads.append(self.grad[admitted])
            grad_scale = float(np.median(np.concatenate(grads)))
            if len(check.subfronts) <= 1:
                r_e = (1.0 - p.re_smoothing) * r_e + p.re_smoothing * check.r_actual
            front = admitted
        else:
            logger.warning("segment stopped after max_steps=%d", p.max_steps)

        seg = AirwaySegment(id=-1, parent=None, voxels=self.to_idx(np.concatenate(parts)), sizes=sizes)
        return seg, children, r_e, outcome


def propagate_airways(
    vol: Volume3D,
    seed: Tuple[int, int, int],
    params: AirwayParams | None = None,
    air: Optional[BinaryMask] = None,
    initial_front: Optional[np.ndarray] = None,
) -> AirwayTree:
    """
    Grow the airway tree from ``seed``. The initial front is ``initial_front``
    (voxel indices) when given, else the seed's 2D air region in its slice.
    """
    p = params or AirwayParams()
    air_data = air.data if air is not None else _air_mask(vol)
    if any(s < 0 or s >= n for s, n in zip(seed, vol.dims)):
        raise OutOfBounds(f"seed {seed} outside volume {vol.dims}")
    if not air_data[tuple(seed)]:
        raise OutOfBounds(f"seed {seed} is not an air voxel")

    prop = _Propagator(vol, air_data, p)
    if initial_front is None:
        labels = label2d(air_data[:, :, seed[2]], connectivity=1)
        xy = np.argwhere(labels == labels[seed[0], seed[1]])
        initial_front = np.column_stack([xy, np.full(len(xy), seed[2])])
    front = np.unique(prop.to_flat(np.asarray(initial_front, dtype=np.int64).reshape(-1, 3)))
    front = front[prop.air[front]]
    prop.visited[front] = True

    pts = prop.to_idx(front) * np.asarray(vol.spacing)
    r0 = float(np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).max()))
    r0 = max(r0, 0.5 * min(vol.spacing))

    segments: List[AirwaySegment] = []
    queue: Deque[Tuple[Optional[int], np.ndarray, float]] = deque([(None, front, r0)])
    while queue and len(segments) < p.max_segments:
        parent_id, fr, r_e = queue.popleft()
        seg, children, r_e_out, outcome = prop.grow(fr, r_e)
        seg.id = len(segments)
        seg.parent = parent_id
        if parent_id is not None:
            segments[parent_id].child_ids.append(seg.id)
        if outcome == "leak":
            seg.accepted, seg.reason = False, "leak"
        else:
            seg.accepted, seg.reason = accept_segment(seg, seg.sizes, p)
        segments.append(seg)
        logger.info(
            "segment %d (parent %s): n=%d steps=%d %s%s",
            seg.id, parent_id, seg.n, len(seg.sizes), "accepted" if seg.accepted else "rejected:", seg.reason,
        )
        if seg.accepted and outcome == "bifurcate":
            for child in children[:2]:
                queue.append((seg.id, child, r_e_out))
    if queue:
        logger.warning("segment limit %d reached; %d fronts dropped", p.max_segments, len(queue))

    mask = np.zeros(vol.dims, dtype=bool)
    for seg in segments:
        if seg.accepted:
            mask[tuple(seg.voxels.T)] = True
    return AirwayTree(segments=segments, mask=BinaryMask(mask, vol.spacing, vol.origin))


def extract_airways(vol: Volume3D, params: AirwayParams | None = None, air: Optional[BinaryMask] = None) -> AirwayTree:
    """Detect the trachea and grow the tree from its cross-section."""
    p = params or AirwayParams()
    found = detect_trachea(vol, p.diameter_range_mm, p.roundness_min, air=air, min_region_px=p.min_region_px)
    return propagate_airways(vol, found.seed, p, air=air, initial_front=found.region)
