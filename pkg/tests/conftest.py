import pytest

from knowe.data import LAYOUTS, SyntheticParams, layout_stream
from knowe.protocol import PRESETS, with_epochs

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def record():
    """Store a criterion result for the summary, then assert it."""

    def _record(k, ok, detail):
        ACCEPTANCE[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _record


@pytest.fixture(scope="session")
def desk_stream():
    return layout_stream(LAYOUTS["desk"], SyntheticParams(), 0)


@pytest.fixture(scope="session")
def cifar_stream():
    return layout_stream(LAYOUTS["cifar"], SyntheticParams(), 0)


@pytest.fixture(scope="session")
def quick_preset():
    return with_epochs(PRESETS["desk"], base_epochs=8, session_epochs=20)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
