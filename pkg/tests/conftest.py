"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest

CRITERIA = {
    1: "invariants (rescoring, fusion, losses, gradients)",
    2: "oracle equivalence (herding, geometric median, error taxonomy)",
    3: "structural zeros and baseline error counts",
    4: "toy incremental experiment",
    5: "freeze, growth and pruning ratio",
    6: "extended CIFAR100-B0 reproduction (opt-in)",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    number = getattr(report, "criterion", None)
    if number is None:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        _outcomes.setdefault(number, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        outcomes = _outcomes.get(number)
        if not outcomes:
            continue
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "not run" if status == "SKIP" else f"{outcomes.count('passed')}/{len(outcomes)} checks passed"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({detail})")
