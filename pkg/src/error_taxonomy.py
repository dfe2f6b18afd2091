from typing import Dict, Mapping, Union

from src.eval_metrics import MetricsParams


def tag_errors(report: Mapping[str, object], thresholds: Union[MetricsParams, Mapping[str, float], None] = None) -> Dict[str, bool]:
    """Simple rule-based quality tags for one segmentation report."""
    if not isinstance(thresholds, MetricsParams):
        thresholds = MetricsParams(**(thresholds or {}))
    flags = report.get("flags") or []
    tags = {}
    tags["empty_segmentation"] = "empty_segmentation" in flags
    tags["low_dsc"] = float(report.get("dsc", 0.0)) < thresholds.low_dsc
    tags["high_hd"] = float(report.get("hd_mm", 0.0)) > thresholds.high_hd_mm
    tags["over_segmentation"] = float(report.get("fpe", 0.0)) > thresholds.over_segmentation
    tags["under_segmentation"] = float(report.get("fne", 0.0)) > thresholds.under_segmentation
    return tags
