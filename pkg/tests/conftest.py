import copy
import json

import numpy as np
import pytest

from rspde.cli import bundled_config
from rspde.coefficients import problem_from_dict


def problem_doc(name="heat", **grid):
    doc = copy.deepcopy(bundled_config(name)["problem"])
    doc["grid"].update(grid)
    return doc


def make_problem(name="heat", **grid):
    return problem_from_dict(problem_doc(name, **grid))


def constant_problem(value=(0.2, 0.1), **grid):
    doc = problem_doc("heat", **grid)
    doc["terminal"] = {"kind": "constant", "value": list(value)}
    return problem_from_dict(doc)


@pytest.fixture
def heat_problem():
    return make_problem("heat")


@pytest.fixture
def write_config(tmp_path):
    def _write(doc, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return str(path)
    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


def record_verdict(line):
    print(line)
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
