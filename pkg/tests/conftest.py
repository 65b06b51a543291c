import os

os.environ.setdefault("ARBSR_DETERMINISTIC", "1")

import pytest  # noqa: E402
import torch  # noqa: E402

from arbsr.training import configure_determinism  # noqa: E402

CRITERIA = {
    1: "parameter-count reproduction",
    2: "output shape law",
    3: "dense/local meta-upscale equivalence",
    4: "finite-difference gradient suite",
    5: "metric oracles",
    6: "gradient-penalty analytics",
    7: "overfit capability",
    8: "baseline ordering",
    9: "up-and-down identity at integer scales",
    10: "1-to-4 channel transfer contract",
    11: "determinism and checkpoint durability",
}
_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    torch.set_num_threads(1)
    configure_determinism(True)
    yield


def pytest_runtest_logreport(report):
    ids = [v for k, v in report.user_properties if k == "criterion"]
    if not ids:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(int(ids[0]), []).append(report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        k = len(results or [])
        terminalreporter.write_line(f"criterion {n:>2} {status:<7} {CRITERIA[n]} ({k} check{'s' if k != 1 else ''})")
