import pytest
import torch

from oracles import ACCEPTANCE, natural_images

from facecycle.nets import FaceCycle
from facecycle.synthetic import make_toy_corpus

torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def photos():
    return natural_images()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), identities=2, clips=1, frames=4, seed=0)


@pytest.fixture(scope="session")
def model():
    torch.manual_seed(0)
    return FaceCycle(backbone_weights="random").eval()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
