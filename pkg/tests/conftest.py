import numpy as np
import pytest

from prunelab.corpora import default_tokenizer
from prunelab.harness import default_experiment_config, train_baseline
from prunelab.model import load_checkpoint, save_checkpoint


def pytest_addoption(parser):
    parser.addoption(
        "--baseline-cache", default=None,
        help="path to a cached baseline checkpoint for the acceptance suite; "
             "trained fresh (and saved there) when missing")


@pytest.fixture(scope="session")
def tokenizer():
    return default_tokenizer()


@pytest.fixture(scope="session")
def acceptance_config(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    return default_experiment_config(out_dir=str(out / "matrix"))


@pytest.fixture(scope="session")
def baseline_model(request, acceptance_config, tokenizer, tmp_path_factory):
    """The frozen-recipe toy baseline; trained once per session (minutes)."""
    cache = request.config.getoption("--baseline-cache")
    if cache:
        import os

        if os.path.exists(cache):
            return load_checkpoint(cache)
    weights, run = train_baseline(acceptance_config, tokenizer,
                                  log=lambda msg: print(f"[baseline] {msg}"))
    if cache:
        save_checkpoint(weights, cache)
    return weights
