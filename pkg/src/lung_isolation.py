"""
Air segmentation, rib-cage context and lung candidate selection.

    air      = voxels below the Otsu threshold of the whole volume
    ribcage  = confidence-connected growth from bone voxels, hulled per slice
    prelim   = air components inside the hull, large enough, nearest the
               rib-cage centroid
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.spatial import QhullError
from skimage.morphology import convex_hull_image

from src.errors import NoBoneVoxels, NoLungCandidate
from src.volume import (
    BinaryMask,
    Volume3D,
    check_geometry,
    compute_histogram,
    confidence_connected_grow,
    otsu_threshold,
    structure_for,
)

logger = logging.getLogger(__name__)


class LungParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    otsu_bins: int = Field(256, ge=2)
    bone_seed_hu: float = 900.0
    ribcage_multiplier: float = Field(2.5, ge=0)
    ribcage_iterations: int = Field(4, ge=0)
    min_volume_mm3: float = Field(10.0, ge=0)
    second_lung_factor: float = Field(1.5, ge=1.0)
    min_hull_fraction: float = Field(0.5, gt=0, le=1)


@dataclass
class RibcageContext:
    ribcage_mask: BinaryMask
    hull_mask: BinaryMask
    centroid: Tuple[float, float, float]


@dataclass
class PreliminaryLungs:
    air: BinaryMask
    ribcage: RibcageContext
    prelim: BinaryMask
    threshold: float


def segment_air_structures(vol: Volume3D, bins: int = 256) -> Tuple[BinaryMask, float]:
    """Return (air mask, Otsu threshold in HU)."""
    res = otsu_threshold(compute_histogram(vol, bins=bins))
    air = vol.data < res.threshold
    logger.info("air threshold %.1f HU, %d air voxels", res.threshold, int(air.sum()))
    return BinaryMask(air, vol.spacing, vol.origin), res.threshold


def slice_convex_hull(mask: np.ndarray) -> np.ndarray:
    """Stack of 2D convex hulls, one per axial slice."""
    hull = np.zeros(mask.shape, dtype=bool)
    for k in range(mask.shape[2]):
        sl = mask[:, :, k]
        if not sl.any():
            continue
        try:
            hull[:, :, k] = convex_hull_image(sl) | sl
        except (QhullError, ValueError):  # collinear points
            logger.warning("convex hull failed on slice %d, keeping raw voxels", k)
            hull[:, :, k] = sl
    return hull


def extract_ribcage(
    vol: Volume3D, seed_hu: float = 900.0, multiplier: float = 2.5, iterations: int = 4
) -> RibcageContext:
    seeds = np.argwhere(vol.data > seed_hu)
    if seeds.size == 0:
        raise NoBoneVoxels(f"no voxel above {seed_hu} HU")
    rib = confidence_connected_grow(vol, seeds, multiplier=multiplier, iterations=iterations)
    hull = slice_convex_hull(rib.data)
    centroid = rib.index_to_mm(np.argwhere(rib.data).mean(axis=0))
    logger.info("ribcage: %d voxels from %d seeds", rib.count, len(seeds))
    return RibcageContext(
        ribcage_mask=rib,
        hull_mask=BinaryMask(hull, vol.spacing, vol.origin),
        centroid=tuple(float(c) for c in centroid),  # type: ignore[arg-type]
    )


def _border_labels(labels: np.ndarray) -> np.ndarray:
    """Labels touching an in-plane face; the trachea may leave through the first or last slice."""
    faces = [labels[0], labels[-1], labels[:, 0], labels[:, -1]]
    present = np.unique(np.concatenate([f.ravel() for f in faces]))
    return present[present > 0]


def isolate_lungs(
    air: BinaryMask,
    ctx: RibcageContext,
    min_volume_mm3: float = 10.0,
    second_lung_factor: float = 1.5,
    min_hull_fraction: float = 0.5,
) -> BinaryMask:
    check_geometry(air, ctx.hull_mask)
    labels, n = ndimage.label(air.data, structure=structure_for(26))
    if n == 0:
        raise NoLungCandidate("air mask is empty")

    nz = np.nonzero(labels)
    lab = labels[nz]
    counts = np.bincount(lab, minlength=n + 1).astype(np.float64)
    in_hull = np.bincount(lab, weights=ctx.hull_mask.data[nz], minlength=n + 1)
    coords = np.stack([np.bincount(lab, weights=c, minlength=n + 1) for c in nz], axis=1)

    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = True
    keep[_border_labels(labels)] = False
    with np.errstate(invalid="ignore", divide="ignore"):
        keep &= in_hull / np.maximum(counts, 1) >= min_hull_fraction
    keep &= counts * air.voxel_volume_mm3 >= min_volume_mm3
    keep[0] = False
    candidates = np.flatnonzero(keep)
    if candidates.size == 0:
        raise NoLungCandidate("no air component survives the hull and size filters")

    centroids = air.index_to_mm(coords[candidates] / counts[candidates, None])
    dist = np.linalg.norm(centroids - np.asarray(ctx.centroid), axis=1)
    chosen = candidates[dist <= second_lung_factor * dist.min()]
    out = np.isin(labels, chosen) & ctx.hull_mask.data
    if not out.any():
        raise NoLungCandidate("selected components vanish inside the hull")
    logger.info("lung candidates: kept %d of %d components", chosen.size, n)
    return BinaryMask(out, air.spacing, air.origin)


def preliminary_lungs(vol: Volume3D, params: LungParams | None = None) -> PreliminaryLungs:
    p = params or LungParams()
    air, threshold = segment_air_structures(vol, bins=p.otsu_bins)
    ctx = extract_ribcage(vol, p.bone_seed_hu, p.ribcage_multiplier, p.ribcage_iterations)
    prelim = isolate_lungs(air, ctx, p.min_volume_mm3, p.second_lung_factor, p.min_hull_fraction)
    return PreliminaryLungs(air=air, ribcage=ctx, prelim=prelim, threshold=threshold)
