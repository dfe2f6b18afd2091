import json
import os
import subprocess
import sys


def test_run_eval_smoke(tmp_path):
    cases = tmp_path / "cases.json"
    cases.write_text(json.dumps([
        {"id": "coarse", "preset": "coarse", "seed": 0},
        {"id": "broken", "preset": "no_such_preset"},
    ]), encoding="utf-8")
    out_dir = tmp_path / "reports"
    cmd = [
        sys.executable, "-m", "src.runners.run_eval", "--config", "configs/default.yaml",
        "--cases", str(cases), "--set", f"paths.out_dir={out_dir}",
    ]
    res = subprocess.run(cmd, cwd=os.getcwd(), capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "=== Lung CT evaluation complete ===" in res.stdout
    assert (out_dir / "eval_report.csv").exists()
    assert (out_dir / "report.html").exists()

    records = [json.loads(line) for line in (out_dir / "eval_report.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [r["id"] for r in records] == ["coarse", "broken"]
    assert records[0]["metrics"]["dsc"] >= 0.85
    assert records[0]["airway_leak_voxels"] >= 0
    assert "InvalidPhantomSpec" in records[1]["error"] and records[1]["exit_code"] == 1

    config = json.loads((out_dir / "eval_config.json").read_text(encoding="utf-8"))
    assert config["paths"]["out_dir"] == str(out_dir)
    assert config["metrics"]["dsc_min"] == 0.7
