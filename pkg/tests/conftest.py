import pytest

from mmdt.harness.verify import rng_for, small_cfg


@pytest.fixture
def rng():
    return rng_for(1234)


@pytest.fixture
def cfg():
    return small_cfg()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
