import json

import pytest

from kflow.cli import main

from conftest import SEED


def write_cfg(tmp_path, **kw):
    cfg = {"samples": 2000, "depth": 6, "schedule_jmax": 4, "seed": SEED,
           "output_dir": str(tmp_path / "out")}
    cfg.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.mark.parametrize("suite", ["semigroup", "consistency", "presentation", "tower", "evolution", "increments",
                                   "convergence", "tanaka", "coalescing"])
def test_run_suites_pass(tmp_path, capsys, suite):
    code = main(["run", write_cfg(tmp_path), "--suite", suite])
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.startswith("PASS")
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["schema"] == "kflow.report/1"
    assert all(r["passed"] or r.get("warning") for r in report["records"])


def test_negative_suite_fails(tmp_path, capsys):
    assert main(["run", write_cfg(tmp_path), "--suite", "negative"]) == 1
    assert capsys.readouterr().out.startswith("FAIL")


def test_config_errors(tmp_path, capsys):
    assert main(["run", write_cfg(tmp_path, bogus=1)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_capacity_error(tmp_path, capsys):
    assert main(["oracle", write_cfg(tmp_path), "--order", "13"]) == 3
    assert "capacity" in capsys.readouterr().err


def test_oracle_and_sample(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["oracle", cfg, "--order", "2", "--t", "0.6931471805599453"]) == 0
    files = sorted(p.name for p in (tmp_path / "out").iterdir())
    js = [f for f in files if f.endswith(".json")]
    data = json.loads((tmp_path / "out" / js[0]).read_text())
    assert abs(data["entries"][0] - 0.75) < 1e-12 and abs(data["entries"][3] - 0.25) < 1e-12
    assert main(["sample", cfg, "--towers", "1", "--kernels", "5", "--t", "0.5"]) == 0


def test_calibrate(tmp_path):
    assert main(["calibrate", write_cfg(tmp_path)]) == 0
    sched = json.loads((tmp_path / "out" / "schedule.json").read_text())
    n = sched["n_j"]
    assert len(n) == 4 and all(b > a for a, b in zip(n, n[1:]))
