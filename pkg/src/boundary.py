"""
Boundary refinement of the preliminary lung mask.

Steps: fill holes, seed on unusually bright border voxels, grow coarse regions
from the seeds, refine each with a geodesic active contour, then keep round
regions as lesions and subtract the rest as boundary artefacts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from skimage.measure import marching_cubes, mesh_surface_area
from skimage.morphology import convex_hull_object

from src.errors import EmptyRegion, InvalidLevelSet, NoVarianceOnBorder, NumericalDivergence
from src.volume import BinaryMask, Volume3D, check_geometry, morphology, structure_for

logger = logging.getLogger(__name__)

SIGMA_EPS = 1e-9
LAMBDA_FLOOR = 1.0


class GacParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 2.0
    max_iters: int = Field(100, ge=1)
    convergence_tol: float = Field(1e-3, ge=0)
    edge_sigma_mm: float = Field(0.5, gt=0)
    band_voxels: int = Field(6, ge=2)
    cfl: float = Field(0.5, gt=0, le=1)
    reinit_every: int = Field(10, ge=1)
    energy_tolerance: float = Field(1e-3, ge=0)


class RefineParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fill_neighborhood_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    iterative_fill: bool = False
    fill_majority: int = Field(1, ge=0)
    fill_max_iterations: int = Field(50, ge=1)
    seed_k: float = 2.5
    border_erosion_mm: float = Field(1.0, gt=0)
    band_hu: float = Field(300.0, ge=0)
    # growth never enters voxels darker than mu_sp + grow_k * sigma_sp
    grow_k: float = 2.5
    max_distance_mm: float = Field(10.0, gt=0)
    gac: GacParams = GacParams()
    sphericity_threshold: float = Field(0.85, ge=0, le=1)
    sphericity_method: str = Field("mesh", pattern="^(mesh|faces)$")
    min_region_voxels: int = Field(8, ge=1)


@dataclass
class BorderStats:
    mu_sp: float
    sigma_sp: float
    k_sigma: float
    n_border: int = 0
    n_seeds: int = 0


@dataclass
class LevelSetField:
    phi: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    narrow_band: Optional[np.ndarray] = None
    iterations: int = 0
    energy_trace: List[float] = field(default_factory=list)

    @property
    def inside(self) -> np.ndarray:
        return self.phi < 0

    @classmethod
    def from_mask(cls, mask: np.ndarray, spacing: Sequence[float]) -> "LevelSetField":
        return cls(phi=signed_distance(mask, spacing), spacing=tuple(spacing))  # type: ignore[arg-type]


@dataclass
class RefineResult:
    final: BinaryMask
    filled: BinaryMask
    lesions: List[BinaryMask]
    artifacts: List[BinaryMask]
    seeds: np.ndarray
    stats: Optional[BorderStats]
    sphericities: List[float] = field(default_factory=list)


# ------------------------------- hole filling ----------------------------------


def iterative_hole_fill(
    mask: BinaryMask,
    neighborhood_mm: Sequence[float] = (1.0, 1.0, 1.0),
    majority: int = 1,
    max_iterations: int = 50,
) -> BinaryMask:
    """Voting fill: a background voxel turns on when enough of its box neighbours are on."""
    radius = [max(1, int(round(r / s))) for r, s in zip(neighborhood_mm, mask.spacing)]
    box = np.ones([2 * r + 1 for r in radius], dtype=np.int32)
    needed = (box.size - 1) // 2 + majority
    data = mask.data.copy()
    for it in range(max_iterations):
        votes = ndimage.convolve(data.astype(np.int32), box, mode="constant", cval=0) - data
        turn_on = ~data & (votes >= needed)
        if not turn_on.any():
            break
        data |= turn_on
    else:
        logger.warning("iterative hole fill stopped at max_iterations=%d", max_iterations)
    return BinaryMask(data, mask.spacing, mask.origin)


def fill_holes_3d(
    mask: BinaryMask,
    neighborhood_mm: Sequence[float] = (1.0, 1.0, 1.0),
    iterative: bool = False,
    majority: int = 1,
    max_iterations: int = 50,
) -> BinaryMask:
    if iterative:
        return iterative_hole_fill(mask, neighborhood_mm, majority, max_iterations)
    filled = ndimage.binary_fill_holes(mask.data, structure=structure_for(6))
    return BinaryMask(filled, mask.spacing, mask.origin)


# ------------------------------- border seeds ----------------------------------


def extract_border_seeds(
    vol: Volume3D, mask: BinaryMask, stats_k: float = 2.5, erosion_mm: float = 1.0
) -> Tuple[np.ndarray, BorderStats]:
    """Border voxels at least ``stats_k`` standard deviations above the border mean."""
    check_geometry(vol, mask)
    if not mask.data.any():
        raise EmptyRegion("mask is empty")
    border = mask.data & ~morphology(mask, "erode", erosion_mm).data
    if not border.any():
        raise EmptyRegion("mask has no border voxels")
    values = vol.data[border].astype(np.float64)
    mu, sigma = float(values.mean()), float(values.std())
    stats = BorderStats(mu_sp=mu, sigma_sp=sigma, k_sigma=stats_k, n_border=int(values.size))
    if sigma < SIGMA_EPS:
        raise NoVarianceOnBorder(f"border intensity is constant ({mu:.1f} HU)")
    seeds = np.argwhere(border & (vol.data >= mu + stats_k * sigma))
    stats.n_seeds = int(len(seeds))
    logger.info("border seeds: %d of %d border voxels (mu %.1f, sigma %.1f)", len(seeds), values.size, mu, sigma)
    return seeds, stats


def lung_envelope(mask: BinaryMask) -> BinaryMask:
    """Per-slice, per-component convex hull."""
    out = np.zeros(mask.data.shape, dtype=bool)
    for k in range(mask.data.shape[2]):
        sl = mask.data[:, :, k]
        if sl.any():
            out[:, :, k] = convex_hull_object(sl, connectivity=2) | sl
    return BinaryMask(out, mask.spacing, mask.origin)


# --------------------------- bounded region growth ------------------------------


def fast_marching_grow(
    vol: Volume3D,
    seeds: np.ndarray,
    band_hu: float,
    max_distance_mm: float = 10.0,
    domain: Optional[BinaryMask] = None,
    floor_hu: Optional[float] = None,
) -> List[BinaryMask]:
    """
    Grow one region per seed through voxels no darker than the seed minus
    ``band_hu`` (and no darker than ``floor_hu`` when given) and within
    ``max_distance_mm``. Seeds are visited brightest first; a seed that lands
    in an existing region joins it. Touching regions whose seed intensities
    differ by at most ``band_hu`` merge.
    """
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 3)
    if seeds.size == 0:
        raise EmptyRegion("no seeds to grow from")
    shape = np.asarray(vol.dims)
    spacing = np.asarray(vol.spacing)
    reach = np.ceil(max_distance_mm / spacing).astype(int)
    structure = structure_for(26)

    owner = np.zeros(vol.dims, dtype=np.int32)
    refs: List[float] = [0.0]  # index 0 = background
    alias: List[int] = [0]

    def root(i: int) -> int:
        while alias[i] != i:
            i = alias[i]
        return i

    intensity = vol.data[tuple(seeds.T)].astype(np.float64)
    order = np.lexsort((np.ravel_multi_index(tuple(seeds.T), vol.dims), -intensity))
    for si in order:
        s = seeds[si]
        if owner[tuple(s)] > 0:
            continue
        ref = float(intensity[si])
        lo = np.maximum(s - reach, 0)
        hi = np.minimum(s + reach + 1, shape)
        win = tuple(slice(a, b) for a, b in zip(lo, hi))
        grids = np.ogrid[win]
        dist2 = sum(((g - c) * h) ** 2 for g, c, h in zip(grids, s, spacing))
        lowest = ref - band_hu if floor_hu is None else max(ref - band_hu, floor_hu)
        ok = (vol.data[win] >= lowest) & (dist2 <= max_distance_mm ** 2) & (owner[win] == 0)
        if domain is not None:
            ok &= domain.data[win]
        ok[tuple(s - lo)] = True
        labels, _ = ndimage.label(ok, structure=structure)
        grown = labels == labels[tuple(s - lo)]

        new_id = len(refs)
        refs.append(ref)
        alias.append(new_id)
        sub = owner[win]
        sub[grown] = new_id
        touching = np.unique(sub[ndimage.binary_dilation(grown, structure=structure) & ~grown])
        for t in touching[touching > 0]:
            rt, rn = root(int(t)), root(new_id)
            if rt != rn and abs(refs[int(t)] - ref) <= band_hu:
                alias[rt] = rn

    roots = np.array([root(i) for i in range(len(refs))], dtype=np.int32)
    merged = roots[owner]
    ids = [i for i in np.unique(merged) if i > 0]
    logger.info("fast marching: %d seeds grew into %d regions", len(seeds), len(ids))
    return [BinaryMask(merged == i, vol.spacing, vol.origin) for i in ids]


# --------------------------- geodesic active contour -----------------------------


def signed_distance(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Negative inside, positive outside, in millimetres."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or not mask.any():
        raise InvalidLevelSet("mask has no boundary")
    d_out = ndimage.distance_transform_edt(~mask, sampling=spacing)
    d_in = ndimage.distance_transform_edt(mask, sampling=spacing)
    return (d_out - d_in + np.where(mask, 0.5, -0.5) * min(spacing)).astype(np.float64)


def gradient_magnitude(data: np.ndarray, spacing: Sequence[float], sigma_mm: float) -> np.ndarray:
    """|grad(G_sigma * I)| in HU per mm."""
    sigma = [sigma_mm / s for s in spacing]
    img = data.astype(np.float64)
    grad2 = np.zeros(data.shape, dtype=np.float64)
    for axis, s in enumerate(spacing):
        order = [0, 0, 0]
        order[axis] = 1
        d = ndimage.gaussian_filter(img, sigma=sigma, order=order) / s
        grad2 += d * d
    return np.sqrt(grad2)


def edge_map_from_gradient(grad: np.ndarray, lam: float) -> np.ndarray:
    """lambda is floored at 1 HU/mm so flat images keep g close to 1."""
    if not lam >= LAMBDA_FLOOR:
        lam = LAMBDA_FLOOR
    return 1.0 / (1.0 + (grad / lam) ** 2)


def edge_map(data: np.ndarray, spacing: Sequence[float], sigma_mm: float, lam: Optional[float] = None) -> np.ndarray:
    """g = 1 / (1 + (|grad(G_sigma * I)| / lambda)^2); lambda defaults to the median gradient."""
    grad = gradient_magnitude(data, spacing, sigma_mm)
    return edge_map_from_gradient(grad, float(np.median(grad)) if lam is None else lam)


def _one_sided(phi: np.ndarray, spacing: Sequence[float]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    p = np.pad(phi, 1, mode="edge")
    core = p[1:-1, 1:-1, 1:-1]
    minus, plus = [], []
    for a, h in enumerate(spacing):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        minus.append((core - p[tuple(lo)]) / h)
        plus.append((p[tuple(hi)] - core) / h)
    return minus, plus


def _curvature_term(phi: np.ndarray, spacing: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (kappa * |grad phi|, |grad phi|) from central differences."""
    grads = np.gradient(phi, *spacing)
    norm = np.sqrt(sum(g * g for g in grads))
    safe = np.maximum(norm, 1e-12)
    div = sum(np.gradient(g / safe, h, axis=a) for a, (g, h) in enumerate(zip(grads, spacing)))
    return div * norm, norm


def _energy(phi: np.ndarray, g: np.ndarray, params: GacParams, spacing: Sequence[float]) -> float:
    eps = 1.5 * min(spacing)
    delta = np.where(np.abs(phi) < eps, (1.0 + np.cos(np.pi * phi / eps)) / (2.0 * eps), 0.0)
    _, norm = _curvature_term(phi, spacing)
    vox = float(np.prod(spacing))
    surface = float((g * delta * norm).sum()) * vox
    inside = float((g * (phi < 0)).sum()) * vox
    return 0.5 * (params.alpha + params.gamma) * surface - params.beta * inside


def geodesic_active_contour(
    vol: Volume3D | np.ndarray,
    init: LevelSetField,
    params: GacParams | None = None,
    edge_lambda: Optional[float] = None,
) -> LevelSetField:
    """
    Explicit narrow-band evolution of

        d(phi)/dt = -alpha A.grad(phi) - beta g |grad(phi)| + gamma g kappa |grad(phi)|,  A = -grad(g)

    with upwind differences for the first two terms. A step that raises the
    energy proxy by more than ``energy_tolerance`` (relative) is undone and
    evolution stops.
    """
    p = params or GacParams()
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    spacing = tuple(float(s) for s in init.spacing)
    phi = np.array(init.phi, dtype=np.float64)
    if phi.shape != data.shape:
        raise ValueError(f"level set shape {phi.shape} does not match image {data.shape}")
    if not np.all(np.isfinite(phi)):
        raise NumericalDivergence("initial level set is not finite")
    if not ((phi < 0).any() and (phi > 0).any()):
        raise InvalidLevelSet("initial level set has no zero crossing")
    if p.alpha == 0 and p.beta == 0 and p.gamma == 0:
        return LevelSetField(phi=phi, spacing=spacing, narrow_band=np.abs(phi) <= p.band_voxels * min(spacing))

    h_min = min(spacing)
    band_width = p.band_voxels * h_min
    grad = gradient_magnitude(data, spacing, p.edge_sigma_mm)
    if edge_lambda is None:
        edge_lambda = float(np.median(grad[np.abs(phi) <= band_width]))
    g = edge_map_from_gradient(grad, edge_lambda)
    grad_g = np.gradient(g, *spacing)
    velocity = [-p.alpha * gg for gg in grad_g]  # V = alpha * A = -alpha * grad(g)

    inv_h = sum(1.0 / h for h in spacing)
    inv_h2 = sum(1.0 / (h * h) for h in spacing)
    speed = (
        max(float(np.abs(v).max()) for v in velocity) * inv_h
        + abs(p.beta) * float(g.max()) * math.sqrt(inv_h2)
        + 2.0 * abs(p.gamma) * float(g.max()) * inv_h2
    )
    dt = p.cfl / max(speed, 1e-12)

    energy = _energy(phi, g, p, spacing)
    trace = [energy]
    it = 0
    for it in range(1, p.max_iters + 1):
        band = np.abs(phi) <= band_width
        minus, plus = _one_sided(phi, spacing)
        advect = sum(np.maximum(v, 0) * m + np.minimum(v, 0) * q for v, m, q in zip(velocity, minus, plus))
        F = p.beta * g
        grad_plus = np.sqrt(sum(np.maximum(m, 0) ** 2 + np.minimum(q, 0) ** 2 for m, q in zip(minus, plus)))
        grad_minus = np.sqrt(sum(np.minimum(m, 0) ** 2 + np.maximum(q, 0) ** 2 for m, q in zip(minus, plus)))
        propagate = np.maximum(F, 0) * grad_plus + np.minimum(F, 0) * grad_minus
        kappa_norm, _ = _curvature_term(phi, spacing)
        update = dt * (-advect - propagate + p.gamma * g * kappa_norm)
        update[~band] = 0.0

        candidate = phi + update
        if not np.all(np.isfinite(candidate)):
            raise NumericalDivergence(f"level set diverged at iteration {it}")
        if not ((candidate < 0).any() and (candidate > 0).any()):
            logger.warning("contour vanished at iteration %d; keeping the previous state", it)
            break
        new_energy = _energy(candidate, g, p, spacing)
        if new_energy - energy > p.energy_tolerance * max(abs(energy), 1e-12):
            logger.debug("energy rose %.4g -> %.4g at iteration %d; step undone", energy, new_energy, it)
            it -= 1
            break
        change = float(np.abs(update[band]).mean()) if band.any() else 0.0
        phi, energy = candidate, new_energy
        trace.append(energy)
        if change < p.convergence_tol:
            break
        if it % p.reinit_every == 0:
            # keep sub-voxel values next to the interface
            far = np.abs(phi) >= h_min
            phi = np.where(far, signed_distance(phi < 0, spacing), phi)
            energy = _energy(phi, g, p, spacing)

    return LevelSetField(phi=phi, spacing=spacing, narrow_band=np.abs(phi) <= band_width, iterations=it, energy_trace=trace)


# ---------------------------------- shape ---------------------------------------


def _face_area(mask: np.ndarray, spacing: Sequence[float]) -> float:
    sx, sy, sz = spacing
    face = (sy * sz, sx * sz, sx * sy)
    padded = np.pad(mask.astype(np.int8), 1)
    return float(sum(np.count_nonzero(np.diff(padded, axis=a)) * face[a] for a in range(3)))


def sphericity(region: BinaryMask, method: str = "mesh") -> float:
    """pi^(1/3) (6V)^(2/3) / A with V from the voxel count."""
    n = region.count
    if n == 0:
        raise EmptyRegion("sphericity of an empty region")
    volume = n * region.voxel_volume_mm3
    if method == "faces":
        area = _face_area(region.data, region.spacing)
    elif method == "mesh":
        nz = np.argwhere(region.data)
        lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
        crop = np.pad(region.data[tuple(slice(a, b) for a, b in zip(lo, hi))].astype(np.float32), 1)
        verts, faces, _, _ = marching_cubes(crop, level=0.5, spacing=region.spacing)
        area = float(mesh_surface_area(verts, faces))
    else:
        raise ValueError(f"unknown sphericity method {method!r}")
    value = math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area
    return min(value, 1.0)


# -------------------------------- refinement ------------------------------------


def _crop(mask: np.ndarray, margin: int) -> Tuple[slice, ...]:
    nz = np.argwhere(mask)
    lo = np.maximum(nz.min(axis=0) - margin, 0)
    hi = np.minimum(nz.max(axis=0) + margin + 1, mask.shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def refine_region(vol: Volume3D, region: BinaryMask, params: GacParams) -> BinaryMask:
    win = _crop(region.data, params.band_voxels + 2)
    local = region.data[win]
    if local.all():
        return region
    init = LevelSetField.from_mask(local, vol.spacing)
    out = geodesic_active_contour(vol.data[win], init, params)
    refined = np.zeros(vol.dims, dtype=bool)
    refined[win] = out.inside
    return BinaryMask(refined, vol.spacing, vol.origin)


def refine_lung_mask(
    vol: Volume3D,
    prelim: BinaryMask,
    params: RefineParams | None = None,
    airway: Optional[BinaryMask] = None,
) -> RefineResult:
    p = params or RefineParams()
    check_geometry(vol, prelim)
    filled = fill_holes_3d(prelim, p.fill_neighborhood_mm, p.iterative_fill, p.fill_majority, p.fill_max_iterations)
    airway_data = airway.data if airway is not None else np.zeros(vol.dims, dtype=bool)

    try:
        seeds, stats = extract_border_seeds(vol, filled, p.seed_k, p.border_erosion_mm)
    except NoVarianceOnBorder:
        logger.warning("constant border intensity; no refinement seeds")
        seeds, stats = np.empty((0, 3), dtype=np.int64), None
    if len(seeds) == 0:
        final = filled.data & ~airway_data
        return RefineResult(BinaryMask(final, vol.spacing, vol.origin), filled, [], [], seeds, stats)

    envelope = lung_envelope(filled)
    floor = stats.mu_sp + p.grow_k * stats.sigma_sp
    coarse = fast_marching_grow(vol, seeds, p.band_hu, p.max_distance_mm, domain=envelope, floor_hu=floor)
    lesions: List[BinaryMask] = []
    artifacts: List[BinaryMask] = []
    sph_values: List[float] = []
    assigned = np.zeros(vol.dims, dtype=bool)
    for region in coarse:
        refined = refine_region(vol, region, p.gac) if region.count >= p.min_region_voxels else region
        data = refined.data & envelope.data & ~assigned
        if not data.any():
            continue
        refined = BinaryMask(data, vol.spacing, vol.origin)
        assigned |= data
        if refined.count < p.min_region_voxels:
            artifacts.append(refined)
            sph_values.append(float("nan"))
            continue
        s = sphericity(refined, p.sphericity_method)
        sph_values.append(s)
        (lesions if s > p.sphericity_threshold else artifacts).append(refined)

    final = filled.data.copy()
    for m in lesions:
        final |= m.data
    for m in artifacts:
        final &= ~m.data
    final &= ~airway_data
    logger.info("refinement: %d lesions, %d artefacts from %d seeds", len(lesions), len(artifacts), len(seeds))
    return RefineResult(
        final=BinaryMask(final, vol.spacing, vol.origin),
        filled=filled,
        lesions=lesions,
        artifacts=artifacts,
        seeds=seeds,
        stats=stats,
        sphericities=sph_values,
    )
