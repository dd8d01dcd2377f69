import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from hetnet.config import config_from_dict  # noqa: E402
from hetnet.dataset import CorpusSpec, synth_corpus  # noqa: E402

torch.set_num_threads(max(1, min(8, torch.get_num_threads())))


def toy_config(tmp_path=None, **overrides):
    """Small toy config; 64 px images keep every forward pass in the millisecond range."""
    raw = {
        "dataset_root": str(tmp_path / "data") if tmp_path else "/nonexistent",
        "category": "synth",
        "output_dir": str(tmp_path / "run") if tmp_path else "/tmp/hetnet-test-run",
        "toy_mode": True,
        "image_size": 64,
        "synth_image_size": 64,
        "epochs": 2,
        "batch_size": 4,
    }
    raw.update(overrides)
    return config_from_dict(raw)


@pytest.fixture
def make_cfg(tmp_path):
    def factory(**overrides):
        return toy_config(tmp_path, **overrides)

    return factory


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8 train / 3 good test / 6 defect test images at 64 px."""
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(n_train=8, n_test_good=3, n_test_defect=6, image_size=64)
    synth_corpus(spec, root, "synth", seed=5)
    return root


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
