import numpy as np
import pytest

from pandalab.backbone import BackboneConfig, build_backbone, pretrain_backbone
from pandalab.taskgen import pretraining_corpus


@pytest.fixture(scope="session")
def small_backbone():
    """Untrained tiny encoder for fast mechanical checks."""
    return build_backbone(BackboneConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2, d_ff=32, seed=5))


@pytest.fixture(scope="session")
def pretrained_backbone():
    """Default-size encoder after a short masked-token warmup (a few seconds)."""
    bb = build_backbone(BackboneConfig())
    bb.unfreeze()
    pretrain_backbone(bb, pretraining_corpus(4096, seed=0), 1000, lr=3e-3)
    return bb


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, passed, detail)``."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, passed: bool, detail: str = ""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
