"""
Command line entry point.

    python -m src.runners.cli segment --input ct.mha --output-mask lung.mha
    python -m src.runners.cli evaluate --seg lung.mha --ref gt.mha --out metrics.csv

Exit codes: 0 success, 1 usage or configuration, 2 input-output,
3 degenerate input. Logs and error messages go to stderr; row summaries
go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from src.airway import extract_airways
from src.classifier import (
    ForestModel,
    anova_across_levels,
    feature_count_curve,
    grid_search_cv,
    importance_ranking,
    predict,
    read_feature_table,
    tomek_links_filter,
    train_forest,
    write_score_table,
)
from src.config import PipelineConfig, load_config
from src.errors import CtAnalysisError, InputNotFound, LengthMismatch, UsageError
from src.eval_metrics import (
    METRICS_COLUMNS,
    compute_metrics,
    majority_consensus,
    select_uncertain_slices,
    slice_metrics,
)
from src.io_formats import read_report, read_volume, write_report, write_volume
from src.lung_isolation import segment_air_structures
from src.phantom import generate_phantom, load_phantom_spec, phantom_preset
from src.pipeline import LungPipeline, emit_stages
from src.radiomics import FEATURE_COLUMNS, FEATURE_NAMES, feature_rows
from src.reporting.report_html import main as build_html_report
from src.tb_quant import log2_fold_change
from src.volume import BinaryMask, Volume3D

logger = logging.getLogger(__name__)

VOLUME_SUFFIXES = (".mha", ".mhd", ".nii", ".nii.gz")
UNCERTAIN_COLUMNS = ["slice", "hd_pre_mm", "hd_post_mm", "delta_mm", "dsc"]
PREDICTION_COLUMNS = ["roi_id", "L", "predicted", "confidence"]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# ----------------------------- small utilities ---------------------------------


def _require(*paths: Optional[str]) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise InputNotFound(f"no such file: {p}")


def _read_image(path: str) -> Volume3D:
    img = read_volume(path)
    if isinstance(img, BinaryMask):
        return Volume3D(img.data.astype(np.int16), img.spacing, img.origin)
    return img


def _read_mask(path: str) -> BinaryMask:
    img = read_volume(path)
    if isinstance(img, BinaryMask):
        return img
    return BinaryMask(img.data != 0, img.spacing, img.origin)


def _csv_list(text: str, cast: Callable[[str], Any] = str) -> List[Any]:
    try:
        return [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"cannot parse list {text!r}: {e}") from e


def _is_volume(path: Path) -> bool:
    return path.is_file() and path.name.lower().endswith(VOLUME_SUFFIXES)


def _stem(path: Path) -> str:
    name = path.name
    for suf in sorted(VOLUME_SUFFIXES, key=len, reverse=True):
        if name.lower().endswith(suf):
            return name[: -len(suf)]
    return path.stem


def _column(rows: Sequence[Dict[str, str]], key: str, path: str) -> List[float]:
    if rows and key not in rows[0]:
        raise LengthMismatch(f"{path} has no {key!r} column")
    return [float(r[key]) for r in rows]


# --------------------------------- commands -------------------------------------


def cmd_segment(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    pipe = LungPipeline(cfg)
    if args.input_dir:
        return _segment_batch(args, pipe)
    if not args.input or not args.output_mask:
        raise UsageError("segment needs --input and --output-mask (or --input-dir and --output-dir)")
    _require(args.input)
    vol = _read_image(args.input)
    res = pipe.segment(vol)
    write_volume(res.final, args.output_mask)
    if args.emit_stages:
        emit_stages(res, args.emit_stages)
    print(json.dumps({"input": args.input, **res.to_record()}))
    return 0


def _segment_batch(args: argparse.Namespace, pipe: LungPipeline) -> int:
    in_dir = Path(args.input_dir)
    if not in_dir.is_dir():
        raise InputNotFound(f"no such directory: {in_dir}")
    if not args.output_dir:
        raise UsageError("--input-dir needs --output-dir")
    inputs = sorted(p for p in in_dir.iterdir() if _is_volume(p))
    out_dir = Path(args.output_dir)

    def one(path: Path) -> Dict[str, Any]:
        try:
            res = pipe.segment(_read_image(str(path)))
            write_volume(res.final, out_dir / f"{_stem(path)}_lung.mha")
            return {"input": str(path), "exit_code": 0, **res.to_record()}
        except CtAnalysisError as e:
            logger.error("%s: %s", path.name, e)
            return {"input": str(path), "exit_code": e.exit_code, "error": str(e)}

    with ThreadPoolExecutor(max_workers=args.jobs) as ex:
        records = list(ex.map(one, inputs))
    for rec in records:
        print(json.dumps(rec))
    return max((r["exit_code"] for r in records), default=0)


def cmd_airways(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.input)
    vol = _read_image(args.input)
    air, _ = segment_air_structures(vol, bins=cfg.lung.otsu_bins)
    tree = extract_airways(vol, cfg.airway, air=air)
    write_volume(tree.mask, args.output)
    if args.tree_json:
        Path(args.tree_json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.tree_json).write_text(json.dumps(tree.to_json(), indent=2), encoding="utf-8")
    accepted = sum(s.accepted for s in tree.segments)
    print(f"segments: {len(tree.segments)} accepted: {accepted} voxels: {tree.mask.count}")
    return 0


def cmd_quantify(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.input, args.mask, args.baseline)
    vol, mask = _read_image(args.input), _read_mask(args.mask)
    baseline = None
    if args.baseline:
        rows = read_report(args.baseline)
        if not rows:
            raise LengthMismatch(f"{args.baseline} holds no rows")
        baseline = float(rows[0]["relative_diseased"])
    res = LungPipeline(cfg).quantify(vol, mask)
    row: Dict[str, Any] = {"subject": args.subject, "week": args.week, "treatment": args.treatment}
    row.update(res.to_row())
    row["log2_change"] = log2_fold_change(res.relative_diseased, baseline) if baseline is not None else ""
    write_report([row], list(row), args.report)
    print(json.dumps({k: row[k] for k in ("subject", "week", "diseased_mm3", "relative_diseased", "log2_change")}))
    return 0


def cmd_radiomics(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.input, args.mask)
    if args.levels:
        levels = _csv_list(args.levels, int)
        if any(L < 2 for L in levels):
            raise UsageError(f"quantization levels must be >= 2, got {levels}")
        cfg = cfg.model_copy(update={"radiomics": cfg.radiomics.model_copy(update={"levels": levels})})
    vol, mask = _read_image(args.input), _read_mask(args.mask)
    vectors = LungPipeline(cfg).radiomics(vol, mask, prefix=args.roi_prefix)
    for v in vectors:
        v.label = args.label
    write_report(feature_rows(vectors), FEATURE_COLUMNS, args.features)
    print(f"feature vectors: {len(vectors)} -> {args.features}")
    return 0


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.features, args.grid)
    cv = cfg.classifier.cv
    grid = cv.grid
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.grid}: {e}") from e
    repeats = args.repeats or cv.repeats
    tables = read_feature_table(args.features, FEATURE_NAMES)
    if args.level is not None:
        tables = {L: ds for L, ds in tables.items() if L == args.level}
    if not tables:
        raise LengthMismatch(f"{args.features} holds no labelled rows")

    results = {
        L: grid_search_cv(ds, grid, repeats, cv.train_frac, cv.seed, cv.tomek, level=L, n_jobs=cv.n_jobs)
        for L, ds in tables.items()
    }
    rows = [r for res in results.values() for r in res.table()]

    best_L = max(results, key=lambda L: (results[L].best_mean, -L))
    best = results[best_L]
    ds = tables[best_L]
    train_ds = tomek_links_filter(ds) if cv.tomek else ds
    model = train_forest(train_ds, best.best, seed=cv.seed, n_jobs=cv.n_jobs)
    model.save(args.model)

    if args.scores:
        ranking = importance_ranking(model)
        curve = feature_count_curve(
            ds, best.best, ranking, range(1, ds.n_features + 1), repeats, cv.seed, cv.train_frac, cv.tomek
        )
        hyper = best.best.model_dump()
        rows += [{"L": best_L, "n_features": c["k"], "k": c["k"], **hyper, **c} for c in curve]
        write_score_table(rows, args.scores)

    print("=== Forest training complete ===")
    print(f"best L: {best_L}  hyper: {best.best.model_dump()}")
    if len(results) >= 2:
        anova = anova_across_levels({L: np.concatenate(r.scores) for L, r in results.items()})
        print(f"ANOVA across levels: F={anova['F']:.3f} p={anova['p_value']:.3g}")
    print(f"Model: {args.model}")
    return 0


def cmd_classify(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.model, args.features)
    model = ForestModel.load(args.model)
    rows = read_report(args.features)
    names = model.feature_names or FEATURE_NAMES
    if rows:
        missing = [n for n in names if n not in rows[0]]
        if missing:
            raise LengthMismatch(f"{args.features} lacks feature columns {missing}")
    X = np.array([[float(r[n]) for n in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    out: List[Dict[str, Any]] = []
    if rows:
        labels, fractions = predict(model, X)
        out = [
            {"roi_id": r.get("roi_id", ""), "L": r.get("L", ""), "predicted": lab, "confidence": float(f.max())}
            for r, lab, f in zip(rows, labels, fractions)
        ]
    write_report(out, PREDICTION_COLUMNS, args.out)
    print(f"classified: {len(out)} -> {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.seg, args.ref)
    seg, ref = _read_mask(args.seg), _read_mask(args.ref)
    base = {"case": args.case, "method": args.method, "reference": args.reference}
    rep = compute_metrics(seg, ref).to_dict()
    rows = [{**base, "slice": "", **rep}]
    if args.per_slice:
        rows += [{**base, **r} for r in slice_metrics(seg, ref)]
    write_report(rows, METRICS_COLUMNS, args.out)
    print(",".join(f"{k}={rep[k]:.4f}" for k in ("dsc", "hd_mm", "hda_mm", "fpe", "fne", "vd")))
    return 0


def cmd_consensus(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    paths = _csv_list(args.masks)
    _require(*paths)
    out = majority_consensus([_read_mask(p) for p in paths])
    write_volume(out, args.out)
    print(f"consensus of {len(paths)} masks: {out.count} voxels")
    return 0


def cmd_select_uncertain(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.hd_pre, args.hd_post, args.dsc)
    pre_rows, post_rows, dsc_rows = (
        [r for r in read_report(p) if str(r.get("slice", "")) != ""] for p in (args.hd_pre, args.hd_post, args.dsc)
    )
    slices = [int(r["slice"]) for r in pre_rows]
    for rows, p in ((post_rows, args.hd_post), (dsc_rows, args.dsc)):
        if [int(r["slice"]) for r in rows] != slices:
            raise LengthMismatch(f"{p} does not cover the same slices as {args.hd_pre}")
    pre = _column(pre_rows, "hd_mm", args.hd_pre)
    post = _column(post_rows, "hd_mm", args.hd_post)
    dsc = _column(dsc_rows, "dsc", args.dsc)
    m = cfg.metrics
    chosen = select_uncertain_slices(pre, post, dsc, m.dsc_min, m.n_sigma)
    out = [
        {"slice": slices[i], "hd_pre_mm": pre[i], "hd_post_mm": post[i], "delta_mm": abs(pre[i] - post[i]), "dsc": dsc[i]}
        for i in chosen
    ]
    write_report(out, UNCERTAIN_COLUMNS, args.out)
    print(f"uncertain slices: {[r['slice'] for r in out]}")
    return 0


def cmd_phantom(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if args.spec:
        spec = load_phantom_spec(args.spec)
    else:
        spec = phantom_preset(args.preset, cfg.paths.phantoms)
    ph = generate_phantom(spec, seed=args.seed)
    prefix = args.out_prefix
    suffix = args.suffix
    write_volume(ph.volume, f"{prefix}_ct{suffix}")
    write_volume(ph.lung, f"{prefix}_lung{suffix}")
    write_volume(ph.airway, f"{prefix}_airway{suffix}")
    write_volume(Volume3D(ph.lesions.data.astype(np.int16), ph.lesions.spacing), f"{prefix}_lesions{suffix}")
    print(f"phantom {spec.dims} -> {prefix}_*{suffix}")
    return 0


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    _require(args.in_jsonl)
    build_html_report(args.in_jsonl, args.out_html)
    return 0


# ----------------------------------- CLI ---------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="YAML/JSON pipeline config (default: built-in values).")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    parser = _Parser(prog="python -m src.runners.cli", description="Lung CT analysis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="full lung segmentation")
    p.add_argument("--input")
    p.add_argument("--output-mask")
    p.add_argument("--emit-stages", default=None, metavar="DIR")
    p.add_argument("--input-dir", default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("airways", parents=[common], help="airway tree only")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tree-json", default=None)
    p.set_defaults(func=cmd_airways)

    p = sub.add_parser("quantify", parents=[common], help="tissue partition and burden")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--baseline", default=None, help="report of the baseline scan")
    p.add_argument("--subject", default="")
    p.add_argument("--week", type=int, default=0)
    p.add_argument("--treatment", default="")
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("radiomics", parents=[common], help="SRM regions and texture features")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--levels", default=None, help="comma separated, e.g. 8,16,32")
    p.add_argument("--label", default="")
    p.add_argument("--roi-prefix", default="roi")
    p.set_defaults(func=cmd_radiomics)

    p = sub.add_parser("train", parents=[common], help="grid search, CV and final forest")
    p.add_argument("--features", required=True)
    p.add_argument("--grid", default=None, help="JSON object of hyper-parameter lists")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--scores", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common], help="predict lesion classes")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", parents=[common], help="segmentation metrics")
    p.add_argument("--seg", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-slice", action="store_true")
    p.add_argument("--case", default="")
    p.add_argument("--method", default="auto")
    p.add_argument("--reference", default="manual")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("consensus", parents=[common], help="majority vote of rater masks")
    p.add_argument("--masks", required=True, help="comma separated mask paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("select-uncertain", parents=[common], help="slices where refinement moved the boundary most")
    p.add_argument("--hd-pre", required=True)
    p.add_argument("--hd-post", required=True)
    p.add_argument("--dsc", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_uncertain)

    p = sub.add_parser("phantom", parents=[common], help="synthetic chest CT with ground truth")
    p.add_argument("--spec", default=None, help="JSON/YAML phantom spec")
    p.add_argument("--preset", default="default")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--suffix", default=".mha", choices=list(VOLUME_SUFFIXES))
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("report", parents=[common], help="HTML dashboard from an evaluation JSONL")
    p.add_argument("--in-jsonl", required=True)
    p.add_argument("--out-html", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.verbose)
        cfg = load_config(args.config, args.overrides)
        return int(args.func(args, cfg))
    except CtAnalysisError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
