import pytest

from flowmigrate.synthetic import bundled_flow_trace, bundled_signal_corpus


@pytest.fixture(scope="session")
def flow_trace():
    return bundled_flow_trace()


@pytest.fixture(scope="session")
def signal_corpus():
    return bundled_signal_corpus()


@pytest.fixture(scope="session")
def tls_setup(tmp_path_factory):
    from flowmigrate.netharness.rig import TlsSetup

    setup = TlsSetup(tmp_path_factory.mktemp("tls"))
    yield setup
    setup.cleanup()


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import NAMES, RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in NAMES:
        terminalreporter.write_line(line(n))
