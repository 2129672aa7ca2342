import pytest
import torch

from attentive_de import backbone
from attentive_de.corpus import Dialogue


@pytest.fixture(autouse=True)
def _checked_mode():
    backbone.set_checked(True)
    yield
    backbone.set_checked(False)


@pytest.fixture
def toy_dialogues():
    # token counts by hand: hi 3, hello 3, are 3, you 3, ? 3, there 2, how 2, fine 2, thanks 2, the rest 1
    return [
        Dialogue(("hi there",), "hello"),
        Dialogue(("how are you?",), "fine, thanks"),
        Dialogue(("hi",), "hello"),
        Dialogue(("what is up", "not much"), "cool"),
        Dialogue(("are you there?",), "yes"),
        Dialogue(("hello",), "hi"),
        Dialogue(("thanks",), "no problem"),
        Dialogue(("how are you?",), "fine"),
    ]


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
