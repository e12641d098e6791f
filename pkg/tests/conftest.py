from __future__ import annotations

from collections import OrderedDict

import pytest

from kgrag.engine import Engine
from kgrag.genclient import MockBackend
from kgrag.ingest import load_aliases, load_rules
from kgrag.ontology import load_ontology
from kgrag.synthetic import build_demo_store
from kgrag.verbalizer import load_templates


@pytest.fixture(scope="session")
def ontology():
    return load_ontology()


@pytest.fixture(scope="session")
def templates(ontology):
    return load_templates(ontology)


@pytest.fixture(scope="session")
def aliases(ontology):
    return load_aliases(ontology)


@pytest.fixture(scope="session")
def rules(ontology):
    return load_rules(ontology)


@pytest.fixture(scope="session")
def mock_backend():
    return MockBackend.from_file()


@pytest.fixture
def demo_kg(ontology):
    return build_demo_store(ontology)


@pytest.fixture
def make_engine(templates, aliases, mock_backend):
    def make(kg, **kw):
        return Engine(kg, templates, aliases, mock_backend, **kw)

    return make


@pytest.fixture
def demo_engine(demo_kg, make_engine):
    return make_engine(demo_kg)


# -- acceptance reporting ------------------------------------------------------------

_labels: dict[str, str] = {}
_results: "OrderedDict[str, bool]" = OrderedDict()


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            label = mark.args[0]
            _labels[item.nodeid] = label
            _results.setdefault(label, True)


def pytest_runtest_logreport(report):
    label = _labels.get(report.nodeid)
    if label is None:
        return
    if report.failed or (report.when == "call" and report.skipped):
        _results[label] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_results, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(f"{'PASS' if _results[label] else 'FAIL'}  {label}")
