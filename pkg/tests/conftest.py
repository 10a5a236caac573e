import numpy as np
import pytest

from dimnet.data import Quadruple, SnapshotGraph, augment_inverse
from dimnet.params import Dims, ModelState


def make_model(n=12, nr=4, d=8, layers=2, heads=1, seed=0, scheme="glorot"):
    return ModelState.initialize(Dims(n, nr, d, layers, heads), seed=seed, scheme=scheme)


def random_snapshot(rng, n=12, nr=4, facts=10, t=0):
    raw = [Quadruple(int(s), int(rng.integers(nr)), int(o), t) for s, o in (rng.choice(n, 2, replace=False) for _ in range(facts))]
    return SnapshotGraph(t, tuple((q.subject, q.relation, q.object) for q in augment_inverse(raw, nr)))


def snapshot(edges, nr=4, t=0):
    """Snapshot from raw (s, r, o) triples plus their inverses."""
    quads = augment_inverse([Quadruple(s, r, o, t) for s, r, o in edges], nr)
    return SnapshotGraph(t, tuple((q.subject, q.relation, q.object) for q in quads))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(f"{k} {v}" for k, v in item.user_properties)
    if report.failed or report.when == "call":
        _criteria[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
