import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    from ulmv.data import make_synthetic_dataset

    root = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(root, n_per_class=32, seed=0)
    return root


@pytest.fixture(scope="session")
def smoke_run(synthetic_dir, tmp_path_factory):
    """One CLI training run with the smoke preset, shared by every test that needs it."""
    from ulmv.cli import main

    out = tmp_path_factory.mktemp("smoke_run")
    code = main(["train", "--preset", "smoke", "--manifest", str(synthetic_dir / "manifest.csv"),
                 "--out", str(out), "--seed", "0"])
    return code, out


@pytest.fixture(scope="session")
def tiny_synthetic_dir(tmp_path_factory):
    from ulmv.data import make_synthetic_dataset

    root = tmp_path_factory.mktemp("tiny_synthetic")
    make_synthetic_dataset(root, n_per_class=6, seed=3, size=64)
    return root
