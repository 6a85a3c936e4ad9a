import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance verdict; the summary prints them in order."""

    def record(number: int, ok: bool, detail: str) -> None:
        prev = _CRITERIA.get(number)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        _CRITERIA[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
