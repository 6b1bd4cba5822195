import numpy as np
import pytest

from conftest import random_labeling, random_sequence
from losc import io
from losc.core import IGNORE_ID, ConfigError, FormatError, Labeling, pack_keys, voxel_keys
from losc.refine import KNNSegmenter, import_predictions, iterate, knn_fit, knn_predict
from losc.synth import NoiseModel, corrupt
from losc.projection import backproject_sequence
from losc.metrics import semantic_scores


def test_fit_examples():
    m = knn_fit(np.zeros((1, 3)), np.array([4]), k=3)
    assert len(m) == 1 and knn_predict(m, np.ones((2, 3))).tolist() == [4, 4]
    assert len(knn_fit(np.random.rand(50, 3), np.zeros(50, dtype=np.uint16), max_reference_points=100)) == 50
    with pytest.raises(ConfigError):
        knn_fit(np.zeros((2, 3)), np.array([IGNORE_ID, IGNORE_ID]))
    with pytest.raises(ConfigError):
        knn_fit(np.zeros((1, 3)), np.array([1]), k=0)


def test_subsampling_is_deterministic(rng):
    pts = rng.random((1_000_000, 3))
    lab = rng.integers(0, 5, 1_000_000).astype(np.uint16)
    a = knn_fit(pts, lab, max_reference_points=100_000, seed=7)
    b = knn_fit(pts, lab, max_reference_points=100_000, seed=7)
    assert len(a) == 100_000
    np.testing.assert_array_equal(a.points, b.points)


def test_predict_examples():
    refs = np.array([[0, 0, 0], [10, 0, 0]], dtype=float)
    m = knn_fit(refs, np.array([2, 5]), k=1)
    assert knn_predict(m, refs).tolist() == [2, 5]
    # three equidistant references a, a, b
    refs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
    assert knn_predict(knn_fit(refs, np.array([0, 0, 1]), k=3), np.zeros((1, 3))).tolist() == [0]
    # a 1-1 tie goes to the lower id
    assert knn_predict(knn_fit(refs[:2], np.array([6, 3]), k=2), np.zeros((1, 3))).tolist() == [3]


def test_predict_matches_all_pairs_oracle(rng):
    refs = rng.random((500, 3))
    labels = rng.integers(0, 4, 500).astype(np.uint16)
    q = rng.random((300, 3))
    d = ((q[:, None] - refs[None]) ** 2).sum(-1)
    for k in (2, 3, 5, 12):
        got = knn_predict(knn_fit(refs, labels, k=k), q)
        nn = np.argsort(d, axis=1)[:, :k]
        expect = [int(np.argmax(np.bincount(labels[r], minlength=4))) for r in nn]
        assert got.tolist() == expect, k


def test_absent_class_never_predicted(rng):
    refs = rng.random((200, 3))
    labels = rng.choice([0, 2], 200).astype(np.uint16)
    assert 1 not in set(knn_predict(knn_fit(refs, labels, k=1), rng.random((1000, 3))).tolist())


def _setup(rng):
    seqs = [random_sequence(rng, n_scans=3, n_points=400, seq_id=f"s{i}") for i in range(2)]
    init = {s.seq_id: random_labeling(rng, s, num_classes=4, p_ignore=0.5, provenance="atc") for s in seqs}
    return seqs, init


def test_iterate_contract(rng):
    seqs, init = _setup(rng)
    recs = iterate(seqs, init, KNNSegmenter(seed=3), rounds=3, voxel_size=0.3, num_classes=4)
    assert [r.round_index for r in recs] == [1, 2, 3]
    for r in recs:
        for s in seqs:
            p = r.predictions[s.seq_id]
            assert p.provenance == f"model-round-{r.round_index}"
            assert not (p.flat() == IGNORE_ID).any()
    # pseudo-labels between rounds are voxel consistent
    s = seqs[0]
    keys = pack_keys(voxel_keys(s.world_xyz, 0.3))
    flat = recs[1].pseudo_labels[s.seq_id].flat()
    for k in np.unique(keys):
        assert len(set(flat[keys == k].tolist())) == 1


def test_one_round_is_a_single_fit(rng):
    seqs, init = _setup(rng)
    rec = iterate(seqs, init, KNNSegmenter(seed=3), rounds=1)[0]
    seg = KNNSegmenter(seed=3)
    seg.fit({s.seq_id: (s.world_xyz[init[s.seq_id].flat() != IGNORE_ID],
                        init[s.seq_id].flat()[init[s.seq_id].flat() != IGNORE_ID]) for s in seqs})
    for s in seqs:
        np.testing.assert_array_equal(rec.predictions[s.seq_id].flat(), seg.predict(s.seq_id, s.world_xyz))


def test_iterate_errors(rng):
    seqs, init = _setup(rng)
    with pytest.raises(ConfigError):
        iterate(seqs, init, KNNSegmenter(), rounds=0)
    empty = {k: Labeling(tuple(np.full_like(a, IGNORE_ID) for a in v.labels), "atc") for k, v in init.items()}
    with pytest.raises(ConfigError):
        iterate(seqs, empty, KNNSegmenter())

    class Bad:
        def fit(self, data):
            pass

        def predict(self, seq_id, pts):
            return np.full(len(pts), IGNORE_ID)

    with pytest.raises(FormatError):
        iterate(seqs, init, Bad())


def test_iterate_callbacks(rng):
    seqs, init = _setup(rng)
    seen = []
    recs = iterate(seqs, init, KNNSegmenter(), rounds=2, evaluate=lambda p: {"n": len(p)},
                   emit=lambda n, p: seen.append(n) or [f"r{n}"])
    assert seen == [1, 2] and recs[1].metrics == {"n": 2} and recs[1].paths == ["r2"]


def test_import_predictions(tmp_path, rng):
    preds = [rng.integers(0, 5, n).astype(np.uint16) for n in (10, 20)]
    paths = []
    for i, p in enumerate(preds):
        io.write_labels(tmp_path / f"{i}.label", p)
        paths.append(tmp_path / f"{i}.label")
    lab = import_predictions(paths, [10, 20], 2)
    assert lab.provenance == "model-round-2" and all(np.array_equal(a, b) for a, b in zip(lab.labels, preds))
    with pytest.raises(FormatError):
        import_predictions(paths, [10, 21], 2)
    bad = preds[0].copy()
    bad[3] = IGNORE_ID
    io.write_labels(tmp_path / "bad.label", bad)
    with pytest.raises(FormatError):
        import_predictions([tmp_path / "bad.label"], [10], 1)
    with pytest.raises(FormatError):
        import_predictions(paths[:1], [10, 20], 1)


def test_rounds_trend_on_synthetic(small_synthetic):
    """mIoU does not drop between consecutive stages for at least two of three steps."""
    syn = small_synthetic
    noisy = [corrupt(m, NoiseModel(flip_rate=0.3, drop_rate=0.2), [11, i])["identity"]
             for i, m in enumerate(syn.label_maps)]
    vlm = backproject_sequence(syn.sequence, noisy, syn.rig)
    gt = np.concatenate(syn.semantic)
    recs = iterate([syn.sequence], {"00": vlm}, KNNSegmenter(k=5, num_classes=16), rounds=3, num_classes=16)
    miou = [semantic_scores(vlm.flat(), gt, 16).miou] + [
        semantic_scores(r.predictions["00"].flat(), gt, 16).miou for r in recs
    ]
    steps = [b >= a for a, b in zip(miou, miou[1:])]
    assert sum(steps) >= 2, miou
