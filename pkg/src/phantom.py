"""
Synthetic chest phantoms with exact ground truth.

Coordinates in a spec are millimetres: x and y relative to the volume's axial
centre, z measured caudally from the first slice. The generator is pure for a
given spec and seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy import ndimage

from src.errors import InputNotFound, InvalidPhantomSpec
from src.volume import BinaryMask, LabelMap, Volume3D

logger = logging.getLogger(__name__)

HU_BACKGROUND = -1000
HU_BODY = 40
HU_LUNG = -850
HU_BONE = 1000
HU_AIRWAY = -1000
HU_WALL = 40

Vec3 = Tuple[float, float, float]


class LesionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center_mm: Vec3
    radius_mm: float = Field(gt=0)
    hu: float = 0.0
    attached_to_pleura: bool = False


class BubbleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center_mm: Vec3 = (-10.0, 5.0, 96.0)
    radius_mm: float = Field(5.0, gt=0)


class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int] = (256, 256, 128)
    spacing: Vec3 = (0.4, 0.4, 0.8)
    body_axes_mm: Tuple[float, float] = (45.0, 38.0)
    rib_inner_axes_mm: Tuple[float, float] = (36.0, 29.0)
    rib_thickness_mm: float = Field(2.0, gt=0)
    rib_z_mm: Tuple[float, float] = (15.0, 100.0)
    lung_offset_mm: float = 18.0
    lung_center_z_mm: float = 55.0
    lung_axes_mm: Vec3 = (12.0, 20.0, 32.0)
    trachea_radius_mm: float = Field(3.5, gt=0)
    carina_z_mm: float = 30.0
    bronchus_angle_deg: float = Field(35.0, gt=0, lt=90)
    bronchus_length_mm: float = Field(22.0, ge=0)
    wall_thickness_mm: float = Field(1.5, ge=0)
    stomach_bubble: Optional[BubbleSpec] = BubbleSpec()
    lesions: List[LesionSpec] = Field(
        default_factory=lambda: [
            LesionSpec(center_mm=(28.5, 0.0, 55.0), radius_mm=3.0, hu=0.0, attached_to_pleura=True),
            LesionSpec(center_mm=(-20.0, 8.0, 62.0), radius_mm=4.92, hu=0.0),
        ]
    )
    diaphragm_blur_mm: float = Field(2.0, ge=0)
    psf_mm: float = Field(0.4, ge=0)
    noise_sigma_hu: float = Field(20.0, ge=0)
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _dims_positive(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(v) < 1:
            raise ValueError("dims must be >= 1")
        return v

    @field_validator("spacing", "lung_axes_mm", "body_axes_mm", "rib_inner_axes_mm")
    @classmethod
    def _positive(cls, v: Tuple[float, ...]) -> Tuple[float, ...]:
        if min(v) <= 0:
            raise ValueError("values must be > 0")
        return v

    @model_validator(mode="after")
    def _lesions_inside_lungs(self) -> "PhantomSpec":
        for lesion in self.lesions:
            if not any(self._in_lung(lesion.center_mm, side) for side in (-1, 1)):
                raise ValueError(f"lesion centre {lesion.center_mm} is outside both lungs")
        return self

    def _in_lung(self, p: Vec3, side: int) -> bool:
        c = (side * self.lung_offset_mm, 0.0, self.lung_center_z_mm)
        return sum(((pi - ci) / ai) ** 2 for pi, ci, ai in zip(p, c, self.lung_axes_mm)) <= 1.0

    @property
    def bronchus_radius_mm(self) -> float:
        """Radius keeping the axial lumen area of both bronchi equal to the trachea's."""
        return self.trachea_radius_mm * float(np.sqrt(np.cos(np.radians(self.bronchus_angle_deg)) / 2.0))


@dataclass
class Phantom:
    volume: Volume3D
    lung: BinaryMask
    airway: BinaryMask
    lesions: LabelMap
    spec: PhantomSpec


# ---------------------------- spec loading -------------------------------------


def load_phantom_spec(source: str | Path | Dict[str, Any] | None = None, **overrides: Any) -> PhantomSpec:
    """Build a spec from a dict, a JSON/YAML file, or defaults."""
    if source is None:
        data: Dict[str, Any] = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        path = Path(source)
        if not path.exists():
            raise InputNotFound(f"phantom spec not found: {path}")
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else (yaml.safe_load(text) or {})
    data.update(overrides)
    try:
        return PhantomSpec(**data)
    except ValidationError as e:
        raise InvalidPhantomSpec(str(e)) from e


def phantom_preset(name: str, presets_path: str | Path = "configs/phantoms.yaml") -> PhantomSpec:
    path = Path(presets_path)
    if not path.exists():
        raise InputNotFound(f"phantom presets not found: {path}")
    presets = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if name not in presets:
        raise InvalidPhantomSpec(f"unknown phantom preset {name!r}; have {sorted(presets)}")
    return load_phantom_spec(presets[name] or {})


# ----------------------------- rasterization -----------------------------------


class _Grid:
    def __init__(self, spec: PhantomSpec):
        self.dims = spec.dims
        self.spacing = np.asarray(spec.spacing, dtype=np.float64)
        self.center = np.array([(spec.dims[0] - 1) * spec.spacing[0] / 2, (spec.dims[1] - 1) * spec.spacing[1] / 2, 0.0])

    def box(self, lo_mm: np.ndarray, hi_mm: np.ndarray) -> Tuple[Tuple[slice, ...], List[np.ndarray]]:
        """Index window covering [lo_mm, hi_mm] and its open-grid coordinates."""
        lo = np.floor((lo_mm + self.center) / self.spacing).astype(int)
        hi = np.ceil((hi_mm + self.center) / self.spacing).astype(int) + 1
        lo = np.clip(lo, 0, self.dims)
        hi = np.clip(hi, 0, self.dims)
        window = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
        coords = np.ogrid[window]
        mm = [c * s - o for c, s, o in zip(coords, self.spacing, self.center)]
        return window, mm

    def full(self) -> List[np.ndarray]:
        coords = np.ogrid[tuple(slice(0, n) for n in self.dims)]
        return [c * s - o for c, s, o in zip(coords, self.spacing, self.center)]


def rasterize_ellipsoid(
    dims: Tuple[int, int, int], spacing: Vec3, center_mm: Vec3, axes_mm: Vec3
) -> np.ndarray:
    """Voxels whose centre lies inside the ellipsoid, in phantom coordinates."""
    spec = PhantomSpec.model_construct(dims=tuple(dims), spacing=tuple(spacing))
    grid = _Grid(spec)
    return _ellipsoid(grid, np.asarray(center_mm, float), np.asarray(axes_mm, float))


def _ellipsoid(grid: _Grid, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    out = np.zeros(grid.dims, dtype=bool)
    window, (x, y, z) = grid.box(center - axes, center + axes)
    if any(w.start >= w.stop for w in window):
        return out
    out[window] = ((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 + (
        (z - center[2]) / axes[2]
    ) ** 2 <= 1.0
    return out


def _capsule(grid: _Grid, p0: np.ndarray, p1: np.ndarray, radius: float) -> np.ndarray:
    out = np.zeros(grid.dims, dtype=bool)
    lo = np.minimum(p0, p1) - radius
    hi = np.maximum(p0, p1) + radius
    window, (x, y, z) = grid.box(lo, hi)
    if any(w.start >= w.stop for w in window):
        return out
    d = p1 - p0
    length2 = float(d @ d)
    rx, ry, rz = x - p0[0], y - p0[1], z - p0[2]
    t = np.clip((rx * d[0] + ry * d[1] + rz * d[2]) / max(length2, 1e-12), 0.0, 1.0)
    dist2 = (rx - t * d[0]) ** 2 + (ry - t * d[1]) ** 2 + (rz - t * d[2]) ** 2
    out[window] = dist2 <= radius * radius
    return out


def _airway_tubes(grid: _Grid, spec: PhantomSpec, extra: float) -> np.ndarray:
    carina = np.array([0.0, 0.0, spec.carina_z_mm])
    top = np.array([0.0, 0.0, -spec.trachea_radius_mm - extra])
    tubes = _capsule(grid, top, carina, spec.trachea_radius_mm + extra)
    if spec.bronchus_length_mm > 0:
        a = np.radians(spec.bronchus_angle_deg)
        for side in (-1, 1):
            end = carina + spec.bronchus_length_mm * np.array([side * np.sin(a), 0.0, np.cos(a)])
            tubes |= _capsule(grid, carina, end, spec.bronchus_radius_mm + extra)
    return tubes


def generate_phantom(spec: PhantomSpec | None = None, seed: int | None = None) -> Phantom:
    spec = spec or PhantomSpec()
    seed = spec.seed if seed is None else seed
    grid = _Grid(spec)
    x, y, z = grid.full()

    body = (x / spec.body_axes_mm[0]) ** 2 + (y / spec.body_axes_mm[1]) ** 2 <= 1.0
    body = np.broadcast_to(body, spec.dims)
    ai, bi = spec.rib_inner_axes_mm
    t = spec.rib_thickness_mm
    ring = ((x / (ai + t)) ** 2 + (y / (bi + t)) ** 2 <= 1.0) & ((x / ai) ** 2 + (y / bi) ** 2 > 1.0)
    ribs = ring & (z >= spec.rib_z_mm[0]) & (z <= spec.rib_z_mm[1])

    lungs = np.zeros(spec.dims, dtype=bool)
    for side in (-1, 1):
        center = np.array([side * spec.lung_offset_mm, 0.0, spec.lung_center_z_mm])
        lungs |= _ellipsoid(grid, center, np.asarray(spec.lung_axes_mm, float))

    lumen = _airway_tubes(grid, spec, 0.0)
    wall = _airway_tubes(grid, spec, spec.wall_thickness_mm) & ~lumen if spec.wall_thickness_mm > 0 else np.zeros_like(lumen)

    lesion_labels = np.zeros(spec.dims, dtype=np.int32)
    for i, lesion in enumerate(spec.lesions, start=1):
        r = lesion.radius_mm
        sphere = _ellipsoid(grid, np.asarray(lesion.center_mm, float), np.array([r, r, r]))
        lesion_labels[sphere & (lesion_labels == 0)] = i
    lesions = lesion_labels > 0

    img = np.full(spec.dims, HU_BACKGROUND, dtype=np.float32)
    img[body] = HU_BODY
    img[ribs] = HU_BONE
    img[lungs] = HU_LUNG
    if spec.stomach_bubble is not None:
        b = spec.stomach_bubble
        img[_ellipsoid(grid, np.asarray(b.center_mm, float), np.full(3, b.radius_mm))] = HU_BACKGROUND
    for i, lesion in enumerate(spec.lesions, start=1):
        img[lesion_labels == i] = lesion.hu
    img[wall] = HU_WALL
    img[lumen] = HU_AIRWAY

    if spec.psf_mm > 0:
        img = ndimage.gaussian_filter(img, sigma=[spec.psf_mm / s for s in spec.spacing])
    if spec.diaphragm_blur_mm > 0:
        img = _diaphragm_blur(img, lungs, spec)
    if spec.noise_sigma_hu > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, spec.noise_sigma_hu, size=img.shape).astype(np.float32)
    data = np.clip(np.rint(img), -1024, 3071).astype(np.int16)

    gt_lung = (lungs | lesions) & ~(lumen | wall)
    logger.info("phantom %s: lung %d voxels, airway %d voxels", spec.dims, int(gt_lung.sum()), int(lumen.sum()))
    sp = tuple(spec.spacing)
    return Phantom(
        volume=Volume3D(data, sp),
        lung=BinaryMask(gt_lung, sp),
        airway=BinaryMask(lumen, sp),
        lesions=LabelMap(lesion_labels, sp),
        spec=spec,
    )


def _diaphragm_blur(img: np.ndarray, lungs: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Smear the caudal lung/diaphragm interface over a band of about two sigma."""
    sampling = spec.spacing
    sigma = [spec.diaphragm_blur_mm / s for s in spec.spacing]
    d_in = ndimage.distance_transform_edt(lungs, sampling=sampling)
    d_out = ndimage.distance_transform_edt(~lungs, sampling=sampling)
    z = np.arange(spec.dims[2]) * spec.spacing[2]
    caudal = (z >= spec.lung_center_z_mm + 0.5 * spec.lung_axes_mm[2])[None, None, :]
    band = (np.maximum(d_in, d_out) <= 2.0 * spec.diaphragm_blur_mm) & caudal
    blurred = ndimage.gaussian_filter(img, sigma=sigma)
    out = img.copy()
    out[band] = blurred[band]
    return out
