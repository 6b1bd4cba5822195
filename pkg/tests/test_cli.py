import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from losc import io
from losc.cli import main
from losc.dataset import load_manifest, write_labelings

FAST = ["--N", "1000", "--rounds", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def label_files(d: Path):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*.label"))}


@pytest.fixture(scope="module")
def pipeline_out(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline", "--manifest", str(small_dataset), "--out", str(out), *FAST]) == 0
    return out


def test_synth_writes_a_manifest(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--sequences", 1, "--scans", 2, "--points", 500)
    assert code == 0
    manifest = Path(json.loads(out)["manifest"])
    ds = load_manifest(manifest)
    assert ds.sequence_ids == ["00"] and ds.has_gt()


def test_pipeline_artifacts(pipeline_out):
    for name in ("vlm", "tim", "abc", "aug", "atc", "round-1", "round-2", "panoptic"):
        assert (pipeline_out / name / "labeling.json").exists(), name
    summary = io.read_json(pipeline_out / "summary.json")
    assert summary["rounds"] == 2 and 0 < summary["final_mIoU"] <= 1
    for f in ("stages.png", "per_class_iou.png", "rounds.png", "robustness.png", "stages.csv", "robustness.csv"):
        assert (pipeline_out / "figures" / f).stat().st_size > 0, f
    meta = io.read_json(pipeline_out / "panoptic" / "labeling.json")
    assert meta["panoptic"] and meta["provenance"] == "model-round-2"


def test_robustness_report_columns(pipeline_out):
    rep = io.read_json(pipeline_out / "robustness.json")
    assert rep["columns"] == ["class", "N_aug", "N_tim", "N_aug/N_tim", "robust"]
    header = (pipeline_out / "figures" / "robustness.csv").read_text().splitlines()[0]
    assert header == "class,N_aug,N_tim,N_aug/N_tim,robust"


def test_chained_subcommands_match_pipeline(small_dataset, pipeline_out, tmp_path, capsys):
    m = ["--manifest", small_dataset, *FAST]
    t = tmp_path
    assert run(capsys, "backproject", *m, "--out", t / "vlm")[0] == 0
    assert run(capsys, "tbc", *m, "--labels", t / "vlm", "--out", t / "tim")[0] == 0
    assert run(capsys, "abc", *m, "--out", t / "aug", "--abc-out", t / "abc")[0] == 0
    code, out, err = run(capsys, "combine", *m, "--aug", t / "aug", "--tim", t / "tim", "--out", t / "atc")
    assert code == 0 and "N_aug/N_tim" in err
    assert (t / "atc" / "robustness.csv").exists()
    assert run(capsys, "iterate", *m, "--labels", t / "atc", "--out", t)[0] == 0
    assert run(capsys, "panoptic", *m, "--labels", t / "round-2", "--out", t / "panoptic")[0] == 0
    for name in ("vlm", "tim", "abc", "aug", "atc", "round-1", "round-2", "panoptic"):
        mine, theirs = label_files(t / name), label_files(pipeline_out / name)
        assert mine and mine == theirs, name
    rounds = io.read_json(t / "rounds.json")
    assert set(rounds["stages"]) == {"round-1", "round-2"}


def test_eval_ground_truth_is_perfect(small_dataset, tmp_path, capsys):
    ds = load_manifest(small_dataset)
    gt = {s: ds.load_gt(s) for s in ds.sequence_ids}
    write_labelings(tmp_path / "gt", gt, ds, provenance="gt", panoptic=True)
    code, out, _ = run(capsys, "eval", "--manifest", small_dataset, "--pred", tmp_path / "gt",
                       "--out", tmp_path / "eval.json", "--figures", tmp_path / "fig")
    res = json.loads(out)
    assert code == 0 and res["mIoU"] == 1.0 and res["PQ"] == 1.0 and res["coverage"] == 1.0
    assert (tmp_path / "eval.txt").exists() and (tmp_path / "fig" / "stages.png").exists()


def test_eval_refuses_wrong_provenance(small_dataset, pipeline_out, capsys):
    code, _, err = run(capsys, "eval", "--manifest", small_dataset, "--pred", pipeline_out / "vlm",
                       "--expect-provenance", "atc")
    assert code == 3 and json.loads(err.splitlines()[-1])["error"] == "FormatError"


def test_unknown_config_key(small_dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"voxel_size": 0.1, "voxle_size": 0.2}))
    code, _, err = run(capsys, "backproject", "--manifest", small_dataset, "--config", cfg, "--out", tmp_path / "x")
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_bad_flag_value(small_dataset, tmp_path, capsys):
    code, _, err = run(capsys, "tbc", "--manifest", small_dataset, "--labels", tmp_path, "--voxel-size", "-1",
                       "--out", tmp_path / "x")
    assert code == 2 and json.loads(err)["command"] == "tbc"


def test_missing_inputs(tmp_path, capsys):
    code, _, err = run(capsys, "backproject", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "x")
    assert code != 0 and "message" in json.loads(err)
    (tmp_path / "bad.json").write_text("{not json")
    code, _, err = run(capsys, "backproject", "--manifest", tmp_path / "bad.json", "--out", tmp_path / "x")
    assert code == 3


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "losc", "synth", "--out", str(tmp_path), "--sequences", "1",
                        "--scans", "1", "--points", "200"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert Path(json.loads(r.stdout)["manifest"]).exists()
