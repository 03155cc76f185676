"""Shared fixtures: canonical dataset, trained segmentation model, and the
16-frame evaluation sequence, all produced through the real CLI paths so
file formats get exercised end to end.

Training runs once per session (about two minutes); everything downstream
reuses the same weights file.
"""

import numpy as np
import pytest

from videodefense import models as M
from videodefense import pipeline as PL
from videodefense.cli import main as cli_main

DATA_SEED = 1234


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("canonical")


@pytest.fixture(scope="session")
def train_dir(workdir):
    out = workdir / "train_data"
    rc = cli_main(["gen-data", "--out", str(out), "--count", "250",
                   "--size", "64", "--seed", str(DATA_SEED)])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def model_file(workdir, train_dir):
    path = workdir / "seg.vdfm"
    rc = cli_main(["train-model", "--data", str(train_dir), "--out", str(path)])
    assert rc == 0, "canonical training must clear the accuracy gate"
    return path


@pytest.fixture(scope="session")
def trained_model(model_file):
    return M.load_model(model_file)


@pytest.fixture(scope="session")
def target_models(trained_model):
    return M.TargetModels(seg=trained_model)


@pytest.fixture(scope="session")
def sequence_dir(workdir):
    out = workdir / "sequence"
    rc = cli_main(["gen-data", "--out", str(out), "--count", "16",
                   "--size", "64", "--seed", str(DATA_SEED), "--sequence"])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def canonical_sequence(sequence_dir):
    seq, derived = PL.load_frames(sequence_dir)
    assert not derived
    return seq


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
