import numpy as np
import pytest

from mqpipe import build_csr, generate_sbm, split_masks

_acceptance_reports = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_reports.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for report in _acceptance_reports:
        name = report.nodeid.split("::")[-1]
        label = name.replace("test_criterion_", "").replace("_", " ")
        detail = dict(report.user_properties).get("detail", "")
        verdict = report.outcome.upper()
        terminalreporter.write_line(f"{verdict:6s} {label:32s} {detail}")

# 8 nodes, connected, mixed degrees, one explicit self-loop (node 3)
EDGES_8 = [
    (0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1),
    (2, 3), (3, 2), (3, 3), (3, 4), (4, 3), (4, 5), (5, 4),
    (5, 6), (6, 5), (6, 7), (7, 6), (7, 0), (0, 7),
    (1, 5), (5, 1), (2, 6), (6, 2),
]


@pytest.fixture
def g8():
    rng = np.random.default_rng(42)
    feats = rng.standard_normal((8, 3)).astype(np.float32)
    labels = np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=np.int32)
    g = build_csr(EDGES_8, 8, features=feats, labels=labels, num_classes=2)
    return split_masks(g, ratios=(0.5, 0.25, 0.25), seed=0)


@pytest.fixture
def g_sbm():
    g = generate_sbm([40, 40], 0.15, 0.02, seed=3)
    return split_masks(g, ratios=(0.5, 0.2, 0.3), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
