import pytest
import torch

from dormant.data import ImageDataset, make_trigger
from dormant.model import Classifier

SHAPE = (3, 8, 8)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return Classifier(SHAPE, num_classes=4, widths=(4, 8))


@pytest.fixture
def tiny_data():
    g = torch.Generator().manual_seed(1)
    x = torch.rand((40, *SHAPE), generator=g)
    y = torch.arange(40) % 4
    return ImageDataset(x, y, 4)


@pytest.fixture
def blend():
    return make_trigger("blended", SHAPE, target=0, seed=3, alpha=0.2)


# -- acceptance bookkeeping: one line per criterion in the terminal summary ----

CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        title, status, detail = CRITERIA[num]
        terminalreporter.write_line(f"[{status}] {num:2d}. {title}: {detail}")
