import json

import numpy as np
import pytest

from losc import pipeline
from losc.core import IGNORE_ID, ConfigError, Labeling
from losc.metrics import coverage
from losc.pipeline import PipelineConfig, Run, agreement_weights


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.voxel_size, cfg.N, cfg.rounds) == (0.1, 200_000, 3)
    assert cfg.tau == pytest.approx(1 / 3)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.override(N=5, window_length=4).to_json()))
    back = PipelineConfig.load(p)
    assert back.N == 5 and back.window_length == 4
    assert cfg.override(N=None) == cfg


@pytest.mark.parametrize("bad", [{"voxel_size": 0}, {"tau": 2}, {"rounds": 0}, {"workers": 0},
                                 {"eval_mode": "x"}, {"window_length": 0}, {"unknown": 1}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_json(bad)


def test_agreement_weights():
    base = Labeling((np.array([1, 2, IGNORE_ID], dtype=np.uint16),), "vlm")
    v1 = Labeling((np.array([1, 3, IGNORE_ID], dtype=np.uint16),), "vlm")
    v2 = Labeling((np.array([1, 2, 0], dtype=np.uint16),), "vlm")
    assert agreement_weights(base, {"a": v1, "b": v2})[0].tolist() == [1.0, 0.5, 0.5]
    assert agreement_weights(base, {})[0].tolist() == [1.0, 1.0, 1.0]


def _front_flat(front):
    return {s: {k: v.flat().tolist() for k, v in d.items()} for s, d in front.items()}


def test_parallel_paths_match_serial(small_dataset, monkeypatch):
    serial = Run(small_dataset, PipelineConfig(N=1000))
    front = serial.front()
    atc, _ = serial.combine({s: front[s]["aug"] for s in front}, {s: front[s]["tim"] for s in front})
    rounds = serial.iterate(atc)
    pan = serial.panoptic(rounds[-1].predictions)

    monkeypatch.setattr(pipeline, "available_cpus", lambda: 4)
    par = Run(small_dataset, PipelineConfig(N=1000, workers=8))
    assert par.workers == 4
    front_p = par.front()
    assert _front_flat(front_p) == _front_flat(front)
    rounds_p = par.iterate(atc)
    for s in atc:
        assert rounds_p[-1].predictions[s].equals(rounds[-1].predictions[s])
    pan_p = par.panoptic(rounds[-1].predictions)
    assert all(np.array_equal(a, b) for s in pan for a, b in zip(pan[s], pan_p[s]))


def test_workers_are_capped(small_dataset, monkeypatch):
    monkeypatch.setattr(pipeline, "available_cpus", lambda: 1)
    assert Run(small_dataset, PipelineConfig(workers=8)).workers == 1


def test_weighted_vote_and_windows(small_dataset):
    run = Run(small_dataset, PipelineConfig())
    vlm = run.backproject()
    plain = run.tbc(vlm)
    weighted = run.tbc(vlm, weighted=True)
    for s in vlm:
        assert weighted[s].provenance == "tim"
        assert coverage(weighted[s]) <= coverage(plain[s]) + 0.05
    windowed = Run(small_dataset, PipelineConfig(window_length=2)).tbc(vlm)
    assert any(not windowed[s].equals(plain[s]) for s in vlm)


def test_evaluation_layout(small_dataset):
    run = Run(small_dataset, PipelineConfig())
    res = run.evaluate(run.backproject())
    assert set(res) >= {"coverage", "points", "unlabeled-as-error", "unlabeled-excluded", "superclass"}
    assert 0 < res["coverage"] < 1
    assert res["unlabeled-excluded"]["mIoU"] >= res["unlabeled-as-error"]["mIoU"]
