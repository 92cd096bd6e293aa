import pytest

# criterion number -> (passed, detail); filled by the acceptance suite
VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def verdict():
    def record(number: int, passed: bool | None, detail: str) -> None:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        VERDICTS[number] = (status, detail)
        print(f"criterion {number}: {status} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        status, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
