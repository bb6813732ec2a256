import re

import pytest

from vandisc.limit import lambda_sweep
from vandisc.model import builtin_problem

SWEEP_LAMBDAS = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]

# numbered one-line verdicts printed by the acceptance gate
_VERDICT = re.compile(r"^\[(PASS|FAIL)\] \d{2} ")
_verdicts = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    for line in report.capstdout.splitlines():
        if _VERDICT.match(line):
            _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in _verdicts:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def steerable_sweep():
    return lambda_sweep(builtin_problem("steerable"), SWEEP_LAMBDAS, 201, tol=1e-6)


@pytest.fixture(scope="session")
def constant_sweep():
    return lambda_sweep(builtin_problem("constant_cost"), SWEEP_LAMBDAS, 201, tol=1e-6)


@pytest.fixture(scope="session")
def split_sweep():
    lams = SWEEP_LAMBDAS + [0.015625]
    return lambda_sweep(builtin_problem("split_homogeneous"), lams, 201, tol=1e-6)
