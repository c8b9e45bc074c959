import json
import os
import subprocess
import sys

import pytest

from ovscene.cli import run, write_atomic
from ovscene.core import dumps_dataset, load_dataset
from ovscene.resources import _text, toy_dataset


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(_text("toy_dataset.json"))
    (tmp_path / "concepts.json").write_text(_text("toy_concepts.json"))
    return path


def manifest(path):
    return json.loads(open(path).read())


def test_validate_exit_codes(toy, tmp_path):
    out = tmp_path / "report.json"
    assert run(["validate", str(toy), "--concepts", str(tmp_path / "concepts.json"),
                "--out", str(out)]) == 0
    assert json.loads(out.read_text())["n_violations"] == 0
    m = manifest(str(out) + ".manifest.json")
    assert m["status"] == "ok" and m["exit_code"] == 0
    assert set(m["inputs"]) == {str(toy), str(tmp_path / "concepts.json")}

    obj = json.loads(toy.read_text())
    obj["images"][0]["edges"].append({"sub": 0, "obj": 0, "predicate": "near"})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(obj))
    assert run(["validate", str(bad), "--out", str(out)]) == 1
    assert [v["rule"] for v in json.loads(out.read_text())["violations"]] == ["self-loop"]
    assert manifest(str(out) + ".manifest.json")["status"] == "domain-failure"

    assert run(["validate", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "garbage.json").write_text("{")
    assert run(["validate", str(tmp_path / "garbage.json")]) == 2


def test_split_outputs_and_census(toy, tmp_path, capsys):
    out = tmp_path / "ovr"
    split_file = tmp_path / "split.json"
    split_file.write_text(_text("toy_split_ovr.json"))
    assert run(["split", str(toy), "--split-file", str(split_file), "--out-dir", str(out)]) == 0
    census = json.loads((out / "census.json").read_text())
    assert (census["images"], census["nodes"], census["edges"]) == (20, 55, 25)
    assert census["detection_only_images"] == 5
    m = manifest(out / "manifest.json")
    assert set(m["outputs"]) == {str(out / n) for n in
                                 ("relation.json", "detection.json", "split.json", "census.json")}

    closed = tmp_path / "closed"
    assert run(["split", str(toy), "--setting", "closed", "--out-dir", str(closed)]) == 0
    assert (closed / "relation.json").read_text() == dumps_dataset(toy_dataset())
    assert run(["split", str(toy), "--out-dir", str(closed)]) == 1


def test_split_with_config_file_and_flag_override(toy, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"setting": "ovd", "seed": 3}))
    out = tmp_path / "o"
    assert run(["split", str(toy), "--config", str(cfg), "--seed", "4", "--out-dir", str(out)]) == 0
    m = manifest(out / "manifest.json")
    assert m["config"]["setting"] == "ovd" and m["seed"] == 4
    cfg.write_text("setting = 'ovd'")
    assert run(["split", str(toy), "--config", str(cfg), "--out-dir", str(out)]) == 2


def test_evaluate_and_report(toy, tmp_path, capsys):
    out = tmp_path / "ev"
    split_file = tmp_path / "split.json"
    split_file.write_text(_text("toy_split_ovd_r.json"))
    assert run(["evaluate", "--gt", str(toy), "--pred", str(toy), "--split", str(split_file),
                "--out-dir", str(out)]) == 0
    reports = json.loads((out / "report.json").read_text())["reports"]
    assert [r["partition"] for r in reports] == ["base_plus_novel", "novel_object",
                                                 "novel_relation", "joint"]
    assert all(r["recall"]["50"] == 1.0 for r in reports)
    capsys.readouterr()
    assert run(["report", str(out / "report.json")]) == 0
    assert "novel_relation" in capsys.readouterr().out


def test_parse_captions_and_prompt(tmp_path, capsys):
    caps = tmp_path / "caps.jsonl"
    caps.write_text(json.dumps({"image_id": "x", "caption": "a man is on a skateboard"}) + "\n")
    out = tmp_path / "trips.jsonl"
    assert run(["parse-captions", str(caps), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["triplets"] == [["man", "on", "skateboard"]]

    prefix = tmp_path / "prompt"
    assert run(["prompt", "--positives", "man,riding,horse", "--seed", "1",
                "--out", str(prefix)]) == 0
    text = (tmp_path / "prompt.txt").read_text()
    assert text.startswith("[CLS] ") and text.rstrip().endswith("[PAD]")
    assert run(["prompt", "--positives", "no such word", "--out", str(prefix)]) == 1


def test_ingest_synth_reports_rejected_records(tmp_path):
    doc = {"images": [
        {"image_id": "ok", "nodes": [{"category": "a"}, {"category": "b"}],
         "edges": [{"sub": 0, "obj": 1, "predicate": "near"}], "provenance": {"pipeline": "llm"}},
        {"image_id": "bad", "nodes": [{"category": "a"}],
         "edges": [{"sub": 0, "obj": 3, "predicate": "near"}], "provenance": {"pipeline": "llm"}}]}
    src = tmp_path / "synth.json"
    src.write_text(json.dumps(doc))
    out, errs = tmp_path / "clean.json", tmp_path / "errors.json"
    assert run(["ingest-synth", str(src), "--out", str(out), "--errors", str(errs)]) == 1
    assert [r["image_id"] for r in json.loads(out.read_text())["images"]] == ["ok"]
    assert json.loads(errs.read_text())["errors"][0]["image_id"] == "bad"


def test_finetune_small_run(tmp_path):
    cfg = tmp_path / "world.json"
    cfg.write_text(json.dumps({"hidden": 16, "n_pretrain": 6, "n_finetune": 4, "n_test": 4,
                               "pretrain_steps": 3, "steps": 4, "eval_every": 2}))
    out = tmp_path / "ft"
    assert run(["finetune", "--config", str(cfg), "--seed", "2", "--out-dir", str(out)]) == 0
    traj = json.loads((out / "trajectory.json").read_text())["trajectory"]
    assert [p["step"] for p in traj] == [0, 2, 4]
    m = manifest(out / "manifest.json")
    assert m["seed"] == 2 and m["status"] == "ok" and len(m["outputs"]) == 3
    assert run(["finetune", "--config", str(cfg), "--step-size", "1e300",
                "--out-dir", str(tmp_path / "div")]) == 1


def test_write_atomic_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    write_atomic(target, "first\n")

    with pytest.raises(TypeError):
        write_atomic(target, 12345)  # fails inside the write
    assert target.read_text() == "first\n"
    assert os.listdir(tmp_path) == ["out.txt"]


def test_module_entry_point_and_thread_env(toy, tmp_path):
    env = dict(os.environ, OVSCENE_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "ovscene", "validate", str(toy)],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0 and json.loads(r.stdout)["n_violations"] == 0
    r = subprocess.run([sys.executable, "-m", "ovscene", "validate", str(tmp_path / "nope")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "nope" in r.stderr
    assert load_dataset(toy) == toy_dataset()
