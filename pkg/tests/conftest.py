import sys

import numpy as np
import pytest
import torch

from tocextract.core import ToCNode


def node(text, *children):
    return ToCNode(text=text, children=list(children))


def root(*children):
    return ToCNode(text="", children=list(children))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fig1_tree():
    """TITLE{Introduction, Method{Efficient Batch Computation}, Conclusion}."""
    return root(node("TITLE", node("Introduction"),
                     node("Method", node("Efficient Batch Computation")),
                     node("Conclusion")))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
