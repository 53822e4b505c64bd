from __future__ import annotations

import json
import shutil
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest

from cli_pipeline import golden, run_pipeline
from conftest import DATA
from occuray.cli import run


def schema(name: str) -> dict:
    return json.loads(resources.files("occuray").joinpath("schemas", f"{name}.json").read_text(encoding="utf-8"))


def run_json(capsys, argv) -> tuple[int, dict]:
    code = run([*argv, "--json", "--jobs", "1"])
    return code, json.loads(capsys.readouterr().out)


@pytest.fixture
def work(tmp_path):
    for name in ("corpus.json", "corpus_dets.json", "two_squares.json"):
        shutil.copy(DATA / name, tmp_path / name)
    return tmp_path


# ---------------------------------------------------------------------------
# exit codes


def test_no_args_is_usage_error(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


def test_console_script_no_args():
    proc = subprocess.run([sys.executable, "-m", "occuray"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


@pytest.mark.parametrize("argv", [["frobnicate"], ["stats", "--bogus"], ["stats"], ["annotate", "--in", "missing.json", "--out", "x"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == 2


def test_invalid_dataset_exit_one(work, capsys):
    data = json.loads((work / "corpus.json").read_text())
    data["annotations"][0]["image_id"] = 404
    (work / "bad.json").write_text(json.dumps(data))
    code, report = run_json(capsys, ["validate", "--in", str(work / "bad.json")])
    assert code == 1 and not report["valid"]
    assert run(["annotate", "--in", str(work / "bad.json"), "--out", str(work / "o.json"), "--jobs", "1"]) == 1
    assert not (work / "o.json").exists()


def test_malformed_json_exit_one(work, capsys):
    (work / "broken.json").write_text('{"images": [')
    assert run(["stats", "--in", str(work / "broken.json")]) == 1
    assert "byte" in capsys.readouterr().err


def test_strict_validation_fails_on_warnings(work, capsys):
    data = json.loads((work / "corpus.json").read_text())
    data["annotations"][0]["area"] += 1
    (work / "warn.json").write_text(json.dumps(data))
    assert run_json(capsys, ["validate", "--in", str(work / "warn.json")])[0] == 0
    assert run_json(capsys, ["validate", "--in", str(work / "warn.json"), "--strict"])[0] == 1


# ---------------------------------------------------------------------------
# configuration


def test_flags_override_config_override_defaults(work, capsys):
    cfg = work / "occuray.ini"
    cfg.write_text("[occuray]\nseed = 7\n\n[annotate]\nthreshold = 0.25\nclip = bbox\n")
    args = ["annotate", "--in", str(work / "corpus.json"), "--out", str(work / "a.json")]

    _, rep = run_json(capsys, args)
    assert rep["config"]["coverage_threshold"] == 0.05 and rep["config"]["clip_mode"] == "mask"
    _, rep = run_json(capsys, [*args, "--config", str(cfg)])
    assert rep["config"]["coverage_threshold"] == 0.25 and rep["config"]["clip_mode"] == "bbox"
    _, rep = run_json(capsys, [*args, "--config", str(cfg), "--threshold", "0.5"])
    assert rep["config"]["coverage_threshold"] == 0.5 and rep["config"]["clip_mode"] == "bbox"


def test_config_seed_reaches_split(work, capsys):
    run(["annotate", "--in", str(work / "corpus.json"), "--out", str(work / "a.json"), "--jobs", "1"])
    capsys.readouterr()
    cfg = work / "c.ini"
    cfg.write_text("[occuray]\nseed = 3\n")
    _, via_config = run_json(capsys, ["split", "--in", str(work / "a.json"), "--config", str(cfg)])
    _, via_flag = run_json(capsys, ["split", "--in", str(work / "a.json"), "--seed", "3"])
    assert via_config == via_flag


def test_log_level_from_environment(work):
    env = {"OCCURAY_LOG": "INFO", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run(
        [sys.executable, "-m", "occuray", "annotate", "--in", "corpus.json", "--out", "a.json", "--jobs", "1"],
        cwd=work, capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert "INFO occuray" in proc.stderr


# ---------------------------------------------------------------------------
# JSON reports


def test_every_subcommand_matches_its_schema(work, capsys):
    a = str(work / "a.json")
    (work / "cases.json").write_text(json.dumps([
        {"pred": [[0.9, 0.1], [0.8, 0.2]], "target": [[1, 0], [1, 0]]},
        {"pred": [[0.5, 0.5]], "target": [[1, 0]], "pred_occluder": [[0.3, 0.6]], "target_occluder": None},
    ]))
    runs = {
        "annotate": ["annotate", "--in", str(work / "corpus.json"), "--out", a],
        "validate": ["validate", "--in", a],
        "stats": ["stats", "--in", a],
        "split": ["split", "--in", a, "--out", str(work / "m.json")],
        "eval": ["eval", "--gt", a, "--dets", str(work / "corpus_dets.json"), "--split", str(work / "m.json")],
        "loss-check": ["loss-check", "--in", str(work / "cases.json")],
        "decoder-demo": ["decoder-demo", "--width", "8", "--grid", "4", "--prompts", "2"],
    }
    for name, argv in runs.items():
        code, report = run_json(capsys, argv)
        assert code == 0, name
        jsonschema.validate(report, schema(name))


def test_report_file_matches_stdout(work, capsys):
    code = run(["stats", "--in", str(work / "two_squares.json"), "--json", "--report", str(work / "r.json")])
    assert code == 0
    assert json.loads(capsys.readouterr().out) == json.loads((work / "r.json").read_text())


def test_stats_text_table(work, capsys):
    assert run(["stats", "--in", str(DATA / "stats_six.json")]) == 0
    rows = [ln.split() for ln in capsys.readouterr().out.splitlines()]
    assert [r[-1] for r in rows[1:]] == ["6", "4", "3", "2", "9", "3"]


def test_split_subset_files(work, capsys):
    run(["annotate", "--in", str(work / "corpus.json"), "--out", str(work / "a.json"), "--jobs", "1"])
    assert run(["split", "--in", str(work / "a.json"), "--subset-dir", str(work / "sub"), "--jobs", "1"]) == 0
    capsys.readouterr()
    everything = {im["id"] for im in json.loads((work / "a.json").read_text())["images"]}
    seen = []
    for name in ("train", "val", "occ"):
        sub = json.loads((work / "sub" / f"{name}.json").read_text())
        ids = {im["id"] for im in sub["images"]}
        assert ids <= everything and {a["image_id"] for a in sub["annotations"]} <= ids
        seen.extend(ids)
    assert len(seen) == len(set(seen))


def test_loss_check_values(work, capsys):
    (work / "cases.json").write_text(json.dumps({"cases": [{"pred": [[0.5, 0.5]], "target": [[1, 0]]}]}))
    _, rep = run_json(capsys, ["loss-check", "--in", str(work / "cases.json")])
    assert abs(rep["cases"][0]["bce"] - 0.6931471805599453) <= 1e-12
    assert rep["max_grad_check"] <= 1e-6


# ---------------------------------------------------------------------------
# golden pipeline


@pytest.mark.parametrize("jobs", [1, 8])
def test_pipeline_reproduces_golden_bytes(tmp_path, jobs):
    out = run_pipeline(tmp_path / f"j{jobs}", jobs)
    expected = golden()
    for name, blob in expected.items():
        assert out[name] == blob, name


def test_golden_annotated_file_matches_oracle():
    produced = json.loads((DATA / "golden" / "cli" / "corpus-A.json").read_text())
    assert produced == json.loads((DATA / "golden" / "corpus-A-mask.json").read_text())


def test_pipeline_idempotent(tmp_path):
    first = run_pipeline(tmp_path / "a", 1)
    assert run_pipeline(tmp_path / "a", 1) == first
