from dataclasses import replace

import pytest

from pcamil.data import SynthConfig, generate_synthetic
from pcamil.harness import ExperimentConfig
from pcamil.mil import MilConfig

TINY_SYNTH = SynthConfig(n_patients=40, msi_fraction=0.3, patches_min=6, patches_max=10, feature_dim=8,
                         signal_rank=2, noise_sigma=0.3, p_undefined=0.1, seed=4)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic(TINY_SYNTH, root, "train")
    generate_synthetic(replace(TINY_SYNTH, n_patients=20), root, "test")
    return root


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    return ExperimentConfig(
        train_manifest=str(tiny_dataset / "train.csv"),
        test_manifest=str(tiny_dataset / "test.csv"),
        n_folds=3,
        k_eigenvectors=4,
        mil=MilConfig(d_hidden=16, d_att=8, epochs=3, lr=1e-3),
        patch_epochs=20,
        output_dir=str(tmp_path / "out"),
        figures=False,
        seed=1,
    )
