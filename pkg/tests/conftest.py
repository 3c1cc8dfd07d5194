import numpy as np
import pytest

from aamtl import synth
from aamtl.aam import train_aam

FACE = 60.0  # reference-frame face size used by the test models


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Twelve synthetic faces varying along two motions."""
    base = synth.base_face(80.0)
    D = synth.deformation_directions(base, ["smile", "mouth_open"])
    spec = synth.SynthSpec(base_shape=base, shape_factors=((D[:, 0], 8.0), (D[:, 1], 6.0)),
                           base_texture=synth.FACE_FEATURES, pose_jitter=(0.03, 0.03, 2.0),
                           n_samples=12, rng_seed=5)
    return synth.generate(spec)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    return train_aam(small_dataset.images, small_dataset.shapes, face_size=FACE)


@pytest.fixture(scope="session")
def planted():
    return synth.planted_transfer_scenario(0)


@pytest.fixture(scope="session")
def planted_models(planted):
    src = train_aam(planted.source.images, planted.source.shapes, face_size=FACE, label="source")
    tgt = train_aam(planted.target.images, planted.target.shapes, face_size=FACE)
    return src, tgt


@pytest.fixture(scope="session")
def planted_sweep(planted, planted_models):
    """Ordering sweep over every shape ``d`` on the planted scenario (slow, shared)."""
    from aamtl.evaluation import TestSet, TrainingData, ordering_sweep
    src, tgt = planted_models
    rows = ordering_sweep(tgt, src, TrainingData(planted.target.images, list(planted.target.shapes)),
                          TestSet(planted.target_test.images, list(planted.target_test.shapes)),
                          range(src.shape.n_local + 1), workers=4)
    return src.shape.n_local, rows


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
