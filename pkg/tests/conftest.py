import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from losc.core import IGNORE_ID, Labeling, PointCloud, Pose, Sequence
from losc.synth import CorpusSpec, NoiseModel, SceneSpec, generate, generate_corpus, write_dataset

settings.register_profile("losc", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("losc")


def random_sequence(rng, n_scans=3, n_points=200, extent=2.0, seq_id="s") -> Sequence:
    clouds, poses = [], []
    for i in range(n_scans):
        pts = np.zeros((n_points, 4))
        pts[:, :3] = rng.uniform(-extent, extent, (n_points, 3))
        clouds.append(PointCloud(pts, i))
        poses.append(Pose.from_yaw(rng.uniform(-np.pi, np.pi), rng.uniform(-1, 1, 3)))
    return Sequence(seq_id, tuple(clouds), tuple(poses))


def random_labeling(rng, seq: Sequence, num_classes=5, p_ignore=0.1, provenance="vlm") -> Labeling:
    out = []
    for n in seq.sizes:
        lab = rng.integers(0, num_classes, n).astype(np.uint16)
        lab[rng.random(n) < p_ignore] = IGNORE_ID
        out.append(lab)
    return Labeling(tuple(out), provenance)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic():
    """One short noiseless sequence with ground truth and label maps."""
    return generate(SceneSpec(seed=3, n_scans=6, points_per_scan=4000), "00")


SMALL_CORPUS = CorpusSpec(
    n_sequences=2,
    scene=SceneSpec(n_scans=6, points_per_scan=4000),
    seed=5,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A written noisy corpus small enough for CLI round trips."""
    root = tmp_path_factory.mktemp("dataset")
    manifest = write_dataset(root, generate_corpus(SMALL_CORPUS), SMALL_CORPUS)
    return manifest


@pytest.fixture(scope="session")
def small_clean_dataset(tmp_path_factory):
    spec = CorpusSpec(
        n_sequences=1, scene=SceneSpec(n_scans=4, points_per_scan=4000), shared_noise=NoiseModel(),
        variant_noise=NoiseModel(), seed=9,
    )
    root = tmp_path_factory.mktemp("clean")
    return write_dataset(root, generate_corpus(spec), spec)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
