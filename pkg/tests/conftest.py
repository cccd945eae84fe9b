import numpy as np
import pytest
import torch

from procdiff.encoders import ToyEncoder
from procdiff.synthetic import make_toy_corpus


@pytest.fixture
def toy_encoder():
    return ToyEncoder(dim=64, seed=0)


@pytest.fixture
def corpus(tmp_path):
    recipes = make_toy_corpus(tmp_path / "corpus", n_recipes=3, min_steps=3, max_steps=5, seed=1)
    return tmp_path / "corpus" / "manifest.jsonl", recipes


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# --------------------------------------------------------------------------- acceptance summary

_criteria = {}
_outcomes = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criteria[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    prev = _outcomes.get(report.nodeid, ("PASS", 0.0))
    status = prev[0]
    if report.failed:
        status = "FAIL"
    elif report.skipped and status == "PASS":
        status = "SKIP"
    _outcomes[report.nodeid] = (status, prev[1] + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (num, title) in sorted(_criteria.items(), key=lambda kv: kv[1][0]):
        if nodeid in _outcomes:
            status, secs = _outcomes[nodeid]
            terminalreporter.write_line(f"criterion {num:2d} {status}  {title} ({secs:.1f} s)")
