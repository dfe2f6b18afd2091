"""
End-to-end lung segmentation.

Stages, in order:
    air      dark structures after background removal
    ribcage  bone grown from the brightest voxels
    prelim   lung components inside the ribcage hull
    airways  trachea and bronchi grown from the detected trachea
    filled   prelim with 3D holes filled
    final    filled plus recovered lesions, minus artefacts and airways
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from src.airway import AirwayTree, extract_airways
from src.boundary import RefineResult, refine_lung_mask
from src.config import PipelineConfig
from src.errors import DegenerateFront, OutOfBounds, TracheaNotFound
from src.io_formats import write_volume
from src.lung_isolation import preliminary_lungs
from src.radiomics import FeatureVector, extract_roi_features, lesion_rois, srm_segment
from src.tb_quant import QuantResult, quantify_lung
from src.volume import BinaryMask, Volume3D, check_geometry

logger = logging.getLogger(__name__)

STAGES = ("air", "ribcage", "prelim", "airways", "filled", "final")


@dataclass
class SegmentationResult:
    stages: Dict[str, BinaryMask]
    refine: RefineResult
    threshold: float
    airway_tree: Optional[AirwayTree] = None
    timings: Dict[str, float] = field(default_factory=dict)
    status: Dict[str, str] = field(default_factory=dict)

    @property
    def final(self) -> BinaryMask:
        return self.stages["final"]

    def to_record(self) -> Dict[str, object]:
        return {
            "threshold_hu": self.threshold,
            "lung_mm3": round(self.final.volume_mm3, 3),
            "airway_mm3": round(self.stages["airways"].volume_mm3, 3),
            "n_lesions": len(self.refine.lesions),
            "n_artifacts": len(self.refine.artifacts),
            "n_seeds": int(len(self.refine.seeds)),
            "n_airway_segments": len(self.airway_tree.segments) if self.airway_tree else 0,
            "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
            "status": dict(self.status),
        }


class LungPipeline:
    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()

    def segment(self, vol: Volume3D) -> SegmentationResult:
        cfg = self.config
        timings: Dict[str, float] = {}
        status = {s: "ok" for s in STAGES}

        t0 = time.perf_counter()
        pre = preliminary_lungs(vol, cfg.lung)
        timings["prelim"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        tree: Optional[AirwayTree] = None
        try:
            tree = extract_airways(vol, cfg.airway, air=pre.air)
            airways = tree.mask
        except (TracheaNotFound, DegenerateFront, OutOfBounds) as e:
            logger.warning("airway stage skipped: %s", e)
            status["airways"] = f"skipped: {e}"
            airways = BinaryMask.like(vol)
        timings["airways"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        refined = refine_lung_mask(vol, pre.prelim, cfg.refine, airway=airways)
        timings["refine"] = time.perf_counter() - t0

        stages = {
            "air": pre.air,
            "ribcage": pre.ribcage.ribcage_mask,
            "prelim": pre.prelim,
            "airways": airways,
            "filled": refined.filled,
            "final": refined.final,
        }
        logger.info(
            "segmentation done: lung %.0f mm3, %d lesions recovered (%.2fs)",
            refined.final.volume_mm3, len(refined.lesions), sum(timings.values()),
        )
        return SegmentationResult(stages, refined, pre.threshold, tree, timings, status)

    def quantify(self, vol: Volume3D, mask: BinaryMask) -> QuantResult:
        return quantify_lung(vol, mask, self.config.quant)

    def radiomics(self, vol: Volume3D, mask: BinaryMask, prefix: str = "roi") -> List[FeatureVector]:
        """SRM regions inside ``mask``, one feature vector per region and quantization level."""
        check_geometry(vol, mask)
        p = self.config.radiomics
        labels = srm_segment(vol, mask, p.srm_q)
        vectors: List[FeatureVector] = []
        for k, roi in lesion_rois(labels, p.min_roi_voxels):
            vectors.extend(
                extract_roi_features(vol, roi, p.levels, p.variant, roi_id=f"{prefix}{k}", strict=p.strict_constant)
            )
        return vectors


def emit_stages(result: SegmentationResult, out_dir: str | Path, suffix: str = ".mha") -> Dict[str, Path]:
    """Write every stage mask as ``<out_dir>/<stage><suffix>``."""
    out = Path(out_dir)
    return {name: write_volume(result.stages[name], out / f"{name}{suffix}") for name in STAGES}
