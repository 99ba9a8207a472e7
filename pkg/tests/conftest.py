import pytest

from collectorbft.crypto import KeyRing
from collectorbft.params import derive_cluster


@pytest.fixture
def n4():
    return derive_cluster(1, 0, 16)


@pytest.fixture
def keys4(n4):
    return KeyRing.for_cluster(n4, n_clients=4)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
