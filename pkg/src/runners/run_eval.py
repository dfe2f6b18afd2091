"""
Run the phantom segmentation evaluation.

- Loads the pipeline config (YAML) plus optional --set overrides.
- Generates every phantom case listed in data/eval_cases.json.
- Segments it, scores the result against the phantom ground truth,
  quantifies tissue burden inside the segmented lungs.
- Writes artifacts to reports/:
    * eval_report.jsonl  (per-case metrics, tags, timings, stage status)
    * eval_report.csv    (metrics table)
    * report.html        (HTML summary)
    * eval_config.json   (effective config after overrides)

A failing case is recorded with its error and does not stop the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from src.config import DEFAULT_CONFIG, PipelineConfig, config_dict, load_config
from src.error_taxonomy import tag_errors
from src.errors import CtAnalysisError
from src.eval_metrics import METRICS_COLUMNS, compute_metrics
from src.io_formats import write_report
from src.phantom import generate_phantom, load_phantom_spec, phantom_preset
from src.pipeline import LungPipeline
from src.reporting.report_html import main as build_html_report
from src.utils.io import ensure_dir, read_json, write_json, write_jsonl
from src.utils.seed import fix_seed

logger = logging.getLogger(__name__)


# ----------------------------------- cases -------------------------------------


def run_case(case: Dict[str, Any], cfg: PipelineConfig) -> Dict[str, Any]:
    """One phantom case -> JSON record. Typed errors are recorded, not raised."""
    cid = case["id"]
    record: Dict[str, Any] = {"id": cid, "preset": case.get("preset", "default"), "seed": case.get("seed")}
    t0 = time.perf_counter()
    try:
        spec = phantom_preset(record["preset"], cfg.paths.phantoms)
        if case.get("overrides"):
            spec = load_phantom_spec(spec.model_dump(), **case["overrides"])
        ph = generate_phantom(spec, seed=case.get("seed"))
        pipe = LungPipeline(cfg)
        seg = pipe.segment(ph.volume)
        report = compute_metrics(seg.final, ph.lung)
    except CtAnalysisError as e:
        logger.error("case %s failed: %s", cid, e)
        record.update(error=f"{type(e).__name__}: {e}", exit_code=e.exit_code)
        record["runtime_s"] = round(time.perf_counter() - t0, 3)
        return record

    gt_air = ph.airway.data
    pred_air = seg.stages["airways"].data
    planted = float(ph.lesions.data.astype(bool).sum() * ph.volume.voxel_volume_mm3)
    metrics = report.to_dict()
    try:
        quant = pipe.quantify(ph.volume, seg.final)
        record.update(diseased_mm3=quant.diseased_mm3, relative_diseased=quant.relative_diseased)
    except CtAnalysisError as e:
        logger.warning("case %s: quantification failed: %s", cid, e)
        record["quant_error"] = f"{type(e).__name__}: {e}"
    record.update(
        metrics=metrics,
        tags=tag_errors(metrics, cfg.metrics),
        airway_recall=float((pred_air & gt_air).sum() / gt_air.sum()) if gt_air.any() else None,
        airway_leak_voxels=int((pred_air & ~gt_air).sum()),
        planted_lesion_mm3=planted,
        segmentation=seg.to_record(),
        runtime_s=round(time.perf_counter() - t0, 3),
    )
    return record


# ----------------------------------- CLI ---------------------------------------


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run the phantom segmentation evaluation")
    parser.add_argument("--config", type=str, default=str(DEFAULT_CONFIG), help="Path to YAML config.")
    parser.add_argument("--cases", type=str, default=None, help="Override paths.cases.")
    parser.add_argument("--out_jsonl", type=str, default=None, help="Else <out_dir>/eval_report.jsonl.")
    parser.add_argument("--out_csv", type=str, default=None, help="Else <out_dir>/eval_report.csv.")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args(argv)


# ---------------------------------- MAIN ---------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.overrides)
    fix_seed(args.seed)

    out_dir = ensure_dir(cfg.paths.out_dir)
    out_jsonl = Path(args.out_jsonl) if args.out_jsonl else out_dir / "eval_report.jsonl"
    out_csv = Path(args.out_csv) if args.out_csv else out_dir / "eval_report.csv"
    cases: List[Dict[str, Any]] = read_json(args.cases or cfg.paths.cases)

    records = [run_case(c, cfg) for c in cases]
    csv_rows = [
        {"case": r["id"], "slice": "", "method": "auto", "reference": "phantom", **r["metrics"]}
        for r in records
        if r.get("metrics")
    ]

    write_jsonl(records, out_jsonl)
    write_report(csv_rows, METRICS_COLUMNS, out_csv)
    out_html = out_dir / "report.html"
    build_html_report(str(out_jsonl), str(out_html))
    out_config = write_json(config_dict(cfg), out_dir / "eval_config.json")

    failed = sum(1 for r in records if "error" in r)
    print("=== Lung CT evaluation complete ===")
    print(f"Cases: {len(records)} ({failed} failed)")
    print(f"JSONL: {out_jsonl}")
    print(f"CSV:   {out_csv}")
    print(f"HTML:  {out_html}")
    print(f"Config: {out_config}")

    return {
        "jsonl": str(out_jsonl),
        "csv": str(out_csv),
        "html": str(out_html),
        "config": str(out_config),
        "n": len(records),
        "failed": failed,
    }


if __name__ == "__main__":
    try:
        main()
    except CtAnalysisError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
