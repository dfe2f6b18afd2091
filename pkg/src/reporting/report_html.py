from __future__ import annotations

import argparse
import html
import json
from pathlib import Path
from statistics import mean
from typing import Any, Dict, List

KPI_METRICS = ("dsc", "hd_mm", "hda_mm", "vd")


def load_jsonl(path: Path) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rows.append(json.loads(line))
    return rows


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return html.escape("" if value is None else str(value))


def render_html(rows: List[Dict[str, Any]]) -> str:
    ok = [r for r in rows if r.get("metrics")]
    averages = {k: mean(r["metrics"][k] for r in ok) if ok else 0.0 for k in KPI_METRICS}

    tr_html: List[str] = []
    for r in rows:
        m = r.get("metrics") or {}
        tags = ", ".join(k for k, v in (r.get("tags") or {}).items() if v)
        status = "ok" if m else f"failed: {r.get('error', '')}"
        tr_html.append(
            "<tr>"
            f"<td>{_fmt(r.get('id', ''))}</td>"
            + "".join(f"<td>{_fmt(m.get(k))}</td>" for k in ("dsc", "hd_mm", "hda_mm", "fpe", "fne", "vd"))
            + f"<td>{_fmt(r.get('airway_recall'))}</td>"
            f"<td>{_fmt(r.get('runtime_s'))}</td>"
            f"<td>{_fmt(tags)}</td>"
            f"<td>{_fmt(status)}</td>"
            "</tr>"
        )

    kpis = "".join(f'<span class="kpi"><b>avg {k}:</b> {v:.3f}</span>' for k, v in averages.items())
    return f"""<!doctype html>
<html lang="en">
<head>
  <meta charset="utf-8">
  <title>Lung CT segmentation: evaluation report</title>
  <style>
    :root {{
      --bg: #0b1220; --fg: #e9eefb; --muted: #9db0cf; --accent: #6cc4ff; --row: #121b2e;
    }}
    body {{
      margin: 0; padding: 24px; background: var(--bg); color: var(--fg);
      font-family: -apple-system, BlinkMacSystemFont, Segoe UI, Roboto, Helvetica, Arial, sans-serif;
    }}
    h1 {{ margin: 0 0 8px 0; font-size: 22px; }}
    .summary {{ margin: 6px 0 18px 0; color: var(--muted); }}
    table {{ width: 100%; border-collapse: collapse; background: #091126; }}
    th, td {{ padding: 8px 10px; text-align: left; border-bottom: 1px solid #1b2a4a; }}
    tr:nth-child(even) {{ background: var(--row); }}
    th {{ color: var(--accent); font-weight: 600; }}
    .kpi {{ display: inline-block; margin-right: 16px; }}
  </style>
</head>
<body>
  <h1>Lung CT segmentation: evaluation report</h1>
  <div class="summary">
    <span class="kpi"><b>Cases:</b> {len(rows)} ({len(ok)} ok)</span>
    {kpis}
  </div>
  <table>
    <thead>
      <tr>
        <th>Case</th><th>DSC</th><th>HD (mm)</th><th>HDA (mm)</th><th>FPE</th><th>FNE</th><th>VD</th>
        <th>Airway recall</th><th>Runtime (s)</th><th>Tags</th><th>Status</th>
      </tr>
    </thead>
    <tbody>
      {''.join(tr_html)}
    </tbody>
  </table>
</body>
</html>"""


def main(in_jsonl: str, out_html: str) -> Path:
    rows = load_jsonl(Path(in_jsonl))
    out = Path(out_html)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_html(rows), encoding="utf-8")
    print(f"HTML report written to {out}")
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--in_jsonl", required=True, help="Path to reports/eval_report.jsonl")
    ap.add_argument("--out_html", required=True, help="Path to write HTML summary")
    args = ap.parse_args()
    main(args.in_jsonl, args.out_html)
