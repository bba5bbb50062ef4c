import numpy as np
import pytest
import torch

from realrep.degradations import synthesize_dataset, write_synthetic_sources


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 procedural scenes x 4 operators, 32x32 crops."""
    root = tmp_path_factory.mktemp("tiny")
    write_synthetic_sources(root / "src", 4, 48, seed=3)
    ops = ["reinhard", "bt2446a", "bt2390eetf", "hable"]
    manifest = synthesize_dataset(root / "src", ops, root / "data", crop=32, seed=3)
    return manifest


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
