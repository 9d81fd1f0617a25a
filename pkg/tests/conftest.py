import numpy as np
import pytest
from hypothesis import settings

from smoothforest.forest import Forest, Leaf, SplitNode, Tree

settings.register_profile("default", max_examples=60, deadline=None, derandomize=True)
settings.register_profile("explore", max_examples=500, deadline=None)
settings.load_profile("default")


def stump(feature=0, threshold=0.5, left=0.0, right=1.0):
    return Tree(SplitNode(feature, threshold, Leaf([left]), Leaf([right])))


@pytest.fixture
def stump_forest():
    """1D forest with a single split at 0, leaves 0 (left) and 1 (right)."""
    return Forest([stump(0, 0.0, 0.0, 1.0)], input_dim=1, output_dim=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Store a one-line verdict, printed in the terminal summary, and return it."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
