"""Shared fixtures plus the acceptance verdict board.

The acceptance tests each file a one-line verdict through the ``record``
fixture; pytest prints the collected board as its own terminal section so
a full run ends with one PASS/FAIL/SKIP line per promised property.
"""

import pytest

LABELS = {
    1: "mask disjointness after every bundled run",
    2: "zero forgetting across sequential groups",
    3: "analytic gradients vs central differences",
    4: "subnetwork selection vs brute-force oracle",
    5: "two-image-task accuracy, 2x256 net at p=0.1",
    6: "regression test MSE on min-max-scaled targets",
    7: "sparse entries per layer within ceil(p*W) sums",
    8: "multitask file smaller than dedicated singles",
    9: "conv smoke pair to 80% with isolation intact",
    10: "four-task text schedule to 75% with isolation",
}

# criterion -> (rank, status, detail); higher rank wins, ties go to the
# later writer, so a real-data verdict replaces its stand-in's line
_RESULTS: dict[int, tuple[int, str, str]] = {}


@pytest.fixture(scope="session")
def record():
    def _record(criterion: int, ok, detail: str, rank: int = 2) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        current = _RESULTS.get(criterion)
        if current is None or rank >= current[0]:
            _RESULTS[criterion] = (rank, status, detail)
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(LABELS):
        rank, status, detail = _RESULTS.get(criterion, (0, "NOT RUN", ""))
        line = f"{status:>7}  {criterion:>2}. {LABELS[criterion]}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
